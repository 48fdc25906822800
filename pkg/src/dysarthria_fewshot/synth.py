"""Synthetic stand-in for the UASpeech corpus.

Reproduces the speaker census and per-speaker file inventory exactly (or
scaled down) and renders short harmonic "words" whose acoustics separate the
classes by construction: each class has its own pitch band, and pathology
tiers add broadband noise, amplitude tremor and a slower articulation rate
that grow with severity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    TASK_CODES,
    TASK_INVENTORY,
    Cohort,
    Gender,
    Manifest,
    SpeakerRecord,
    Task,
    Tier,
    UtteranceRecord,
    save_manifest,
    tier_for_intelligibility,
)
from .dsp import AudioClip, write_wav
from .errors import InvalidConfig

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
AUDIO_DIR = "corpus"

# speaker, gender, age, intelligibility %
PATHOLOGY_SPEAKERS = (
    ("M09", Gender.MALE, 18, 86),
    ("M14", Gender.MALE, 44, 90),
    ("M10", Gender.MALE, 21, 93),
    ("M08", Gender.MALE, 28, 95),
    ("F05", Gender.FEMALE, 22, 95),
    ("M05", Gender.MALE, 21, 58),
    ("M11", Gender.MALE, 48, 62),
    ("F04", Gender.FEMALE, 18, 62),
    ("M07", Gender.MALE, 58, 28),
    ("F02", Gender.FEMALE, 30, 29),
    ("M16", Gender.MALE, 40, 43),
    ("M04", Gender.MALE, None, 2),
    ("F03", Gender.FEMALE, 51, 6),
    ("M12", Gender.MALE, 19, 7),
    ("M01", Gender.MALE, None, 17),
)
CONTROL_SPEAKERS = (
    "CF02", "CF03", "CF04", "CF05",
    "CM01", "CM04", "CM05", "CM06", "CM08", "CM09", "CM10", "CM12", "CM13",
)  # fmt: skip


def uaspeech_speakers() -> list[SpeakerRecord]:
    out = [
        SpeakerRecord(sid, Cohort.CONTROL, Gender.FEMALE if sid.startswith("CF") else Gender.MALE, None, None, Tier.CONTROL)
        for sid in CONTROL_SPEAKERS
    ]
    for sid, gender, age, pct in PATHOLOGY_SPEAKERS:
        out.append(SpeakerRecord(sid, Cohort.PATHOLOGY, gender, age, float(pct), tier_for_intelligibility(pct)))
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic-corpus parameters.

    ``scale`` multiplies the item count of every task (rounded, at least one
    item); repetition counts are kept. ``scale=1`` is the exact census.
    """

    scale: float = 1.0
    sample_rate: int = 16000
    base_duration_s: float = 0.45
    write_audio: bool = True

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise InvalidConfig("scale must be in (0, 1]")
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")

    def items(self, task: Task) -> int:
        n, _ = TASK_INVENTORY[task]
        return max(1, int(round(n * self.scale)))

    def files_per_speaker(self) -> int:
        return sum(self.items(t) * TASK_INVENTORY[t][1] for t in Task)


@dataclass(frozen=True)
class _Voice:
    f0_band: tuple[float, float]
    slowdown: float
    noise: float
    tremor: float


VOICES = {
    Tier.CONTROL: _Voice((110.0, 190.0), 1.0, 0.003, 0.0),
    Tier.HIGH: _Voice((125.0, 205.0), 1.2, 0.10, 0.15),
    Tier.MEDIUM: _Voice((140.0, 220.0), 1.4, 0.16, 0.25),
    Tier.LOW: _Voice((155.0, 235.0), 1.65, 0.24, 0.35),
    Tier.VERY_LOW: _Voice((170.0, 250.0), 1.9, 0.32, 0.5),
}
_GOLDEN = 0.6180339887498949


def utterance_id(speaker_id: str, task: Task, item: int, repetition: int) -> str:
    return f"{speaker_id}_{TASK_CODES[task]}{item:03d}_R{repetition}"


def census(spec: SynthSpec | None = None, speakers: list[SpeakerRecord] | None = None) -> Manifest:
    """Manifest for the synthetic corpus without rendering any audio."""
    spec = spec or SynthSpec()
    speakers = speakers if speakers is not None else uaspeech_speakers()
    utts = []
    for spk in speakers:
        for task in Task:
            _, reps = TASK_INVENTORY[task]
            for item in range(1, spec.items(task) + 1):
                for rep in range(1, reps + 1):
                    uid = utterance_id(spk.speaker_id, task, item, rep)
                    path = f"{AUDIO_DIR}/{spk.speaker_id}/{uid}.wav"
                    utts.append(UtteranceRecord(uid, spk.speaker_id, task, rep, path, spk.tier.value))
    return Manifest(tuple(speakers), tuple(utts))


def render_utterance(
    speaker_index: int, tier: Tier, task: Task, item: int, repetition: int, seed: int, sample_rate: int,
    base_duration_s: float = 0.45,
) -> AudioClip:
    """Deterministic waveform for one utterance."""
    task_index = list(Task).index(task)
    rng = np.random.default_rng([seed, speaker_index, task_index, item, repetition])
    voice = VOICES[tier]
    lo, hi = voice.f0_band
    speaker_shift = 1.0 + 0.04 * (((speaker_index * _GOLDEN) % 1.0) - 0.5)
    f0 = (lo + (hi - lo) * ((item * _GOLDEN + task_index * 0.17) % 1.0)) * speaker_shift
    f0 *= 1.0 + 0.01 * rng.standard_normal()

    duration = base_duration_s * voice.slowdown * (1.0 + 0.15 * rng.random())
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    glide = 1.0 + 0.08 * np.sin(np.pi * t / duration + task_index)
    phase = 2 * np.pi * np.cumsum(f0 * glide) / sample_rate
    wave = sum(np.sin(h * phase) / h for h in range(1, 7))
    envelope = np.sin(np.pi * t / duration) ** 0.5
    if voice.tremor:
        envelope = envelope * (1.0 - voice.tremor * (0.5 + 0.5 * np.sin(2 * np.pi * 5.0 * t)))
    wave = wave * envelope
    wave = wave / np.max(np.abs(wave))
    wave = wave + voice.noise * rng.standard_normal(n) * np.sqrt(envelope + 0.05)
    wave = 0.7 * wave / np.max(np.abs(wave))
    return AudioClip(wave, sample_rate)


def synth_corpus(out_dir: str | Path, spec: SynthSpec | None = None, seed: int = 0) -> Manifest:
    """Write ``manifest.csv`` and ``corpus/<speaker>/<utterance>.wav`` under ``out_dir``."""
    spec = spec or SynthSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = census(spec)
    if spec.write_audio:
        speaker_pos = {s.speaker_id: i for i, s in enumerate(manifest.speakers)}
        items = {}
        for u in manifest.utterances:
            # item number is encoded in the id: <speaker>_<code><item>_R<rep>
            items[u.utterance_id] = int(u.utterance_id.split("_")[1].lstrip("CDLUW"))
        for n, u in enumerate(manifest.utterances):
            spk = manifest.speaker(u.speaker_id)
            clip = render_utterance(
                speaker_pos[u.speaker_id], spk.tier, u.task, items[u.utterance_id], u.repetition,
                seed, spec.sample_rate, spec.base_duration_s,
            )
            path = out_dir / u.audio_path
            path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(path, clip)
            if (n + 1) % 1000 == 0:
                log.info("rendered %d/%d utterances", n + 1, len(manifest.utterances))
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
