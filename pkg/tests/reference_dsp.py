"""Straight-line log-Mel reference used as an oracle.

Deliberately shares no code with the package: explicit index arithmetic for
padding, explicit cos/sin DFT matrices, loop-built filters.
"""

import math

import numpy as np

SR = 16000
N_FFT = 400
HOP = 160
N_MELS = 80
F_MAX = 8000.0
N_SAMPLES = 30 * SR


def reflect_index(i, n):
    # mirror without repeating the edge sample: -1 -> 1, n -> n - 2
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = i % period
    return np.where(i < n, i, period - i)


def naive_dft_matrices(n):
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    angle = 2.0 * math.pi * ((k * t) % n) / n
    return np.cos(angle), -np.sin(angle)


def naive_power_frames(signal, n_fft=N_FFT, hop=HOP):
    n = len(signal)
    half = n_fft // 2
    n_frames = (n + hop - 1) // hop
    idx = reflect_index(np.arange(-half, n + half), n)
    padded = np.asarray(signal, dtype=np.float64)[idx]
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * j / n_fft) for j in range(n_fft)])
    frames = np.stack([padded[t * hop : t * hop + n_fft] * window for t in range(n_frames)])
    cos_m, sin_m = naive_dft_matrices(n_fft)
    re = frames @ cos_m.T
    im = frames @ sin_m.T
    return (re**2 + im**2).T


def naive_filterbank(n_mels=N_MELS, n_fft=N_FFT, sr=SR, f_min=0.0, f_max=F_MAX):
    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    m_lo, m_hi = to_mel(f_min), to_mel(f_max)
    pts = [to_hz(m_lo + (m_hi - m_lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        height = 2.0 / (hi - lo)
        for b in range(n_fft // 2 + 1):
            f = b * sr / n_fft
            if lo < f <= c:
                fb[m, b] = height * (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, b] = height * (hi - f) / (hi - c)
    return fb


_FB = None


def reference_log_mel(samples):
    global _FB
    if _FB is None:
        _FB = naive_filterbank()
    x = np.zeros(N_SAMPLES)
    m = min(len(samples), N_SAMPLES)
    x[:m] = samples[:m]
    mel = _FB @ naive_power_frames(x)
    out = np.log10(np.where(mel > 1e-10, mel, 1e-10))
    top = out.max()
    out = np.where(out < top - 8.0, top - 8.0, out)
    return (out + 4.0) / 4.0
