"""Transformer audio encoder with a classification head.

The layout mirrors the Whisper audio encoder (two-convolution stem, fixed
sinusoidal positions, pre-norm residual blocks, final LayerNorm) so that
weights of that shape could be imported by name; the decoder is replaced by
mean pooling over time and one affine layer producing class logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackwardWithoutForward, InvalidConfig, ShapeMismatch

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    max_frames: int = 3000
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_mlp: int | None = None  # defaults to 4 * d_model
    n_classes: int = 2
    dropout: float = 0.0
    seed: int = 0
    pooling: str = "mean"

    def __post_init__(self):
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        if min(self.n_mels, self.d_model, self.n_heads, self.d_mlp) < 1 or self.n_layers < 0:
            raise InvalidConfig("dimensions must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2 or self.d_model < 4:
            raise InvalidConfig("sinusoidal positions need an even d_model >= 4")
        if self.max_frames < 2 or self.max_frames % 2:
            raise InvalidConfig("max_frames must be even (the stem halves the time axis)")
        if self.n_classes < 2:
            raise InvalidConfig("n_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")
        if self.pooling != "mean":
            raise InvalidConfig(f"unsupported pooling {self.pooling!r}")

    @property
    def n_positions(self) -> int:
        return self.max_frames // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> torch.Tensor:
    increment = math.log(max_timescale) / (channels // 2 - 1)
    inv_timescales = torch.exp(-increment * torch.arange(channels // 2, dtype=torch.float64))
    scaled = torch.arange(length, dtype=torch.float64)[:, None] * inv_timescales[None, :]
    return torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=1).float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model, bias=False)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads

        def heads(z):
            return z.view(b, t, h, d // h).transpose(1, 2)

        attended = F.scaled_dot_product_attention(heads(self.query(x)), heads(self.key(x)), heads(self.value(x)))
        return self.out(attended.transpose(1, 2).reshape(b, t, d))


class ResidualAttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_mlp: int, dropout: float):
        super().__init__()
        self.attn_ln = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.mlp_ln = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_mlp), nn.GELU(), nn.Linear(d_mlp, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.attn_ln(x)))
        return x + self.drop(self.mlp(self.mlp_ln(x)))


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.conv1 = nn.Conv1d(config.n_mels, d, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(d, d, kernel_size=3, stride=2, padding=1)
        self.register_buffer("positional_embedding", sinusoids(config.n_positions, d), persistent=False)
        self.blocks = nn.ModuleList(
            ResidualAttentionBlock(d, config.n_heads, config.d_mlp, config.dropout) for _ in range(config.n_layers)
        )
        self.ln_post = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_classes)
        self._recorded: torch.Tensor | None = None

    def encode(self, mel: torch.Tensor) -> torch.Tensor:
        """(batch, n_mels, max_frames) -> hidden states (batch, max_frames / 2, d_model)."""
        x = F.gelu(self.conv1(mel))
        x = F.gelu(self.conv2(x))
        x = x.transpose(1, 2) + self.positional_embedding.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.ln_post(x)

    @staticmethod
    def pool(hidden: torch.Tensor) -> torch.Tensor:
        return hidden.mean(dim=1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(self.encode(mel)))


def init_encoder(config: EncoderConfig) -> EncoderModel:
    """Build an encoder with seeded N(0, 0.02) weights, zero biases and a zero head.

    The zero head makes every initial prediction uniform over classes.
    """
    model = EncoderModel(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("head."):
                p.zero_()
            elif ".attn_ln." in name or ".mlp_ln." in name or name.startswith("ln_post."):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).mul_(INIT_STD).to(p.dtype))
    return model


def as_batch(mel, model: EncoderModel) -> torch.Tensor:
    """Coerce a MelSpectrogram, array or tensor to a (batch, n_mels, frames) tensor."""
    if isinstance(mel, torch.Tensor):
        x = mel
    else:
        x = torch.from_numpy(np.asarray(getattr(mel, "values", mel)))
    if x.ndim == 2:
        x = x.unsqueeze(0)
    cfg = model.config
    if x.ndim != 3 or x.shape[1] != cfg.n_mels or x.shape[2] != cfg.max_frames:
        raise ShapeMismatch(
            f"expected input (batch, {cfg.n_mels}, {cfg.max_frames}), got {tuple(x.shape)}"
        )
    dtype = next(model.parameters()).dtype
    return x.to(dtype)


def forward(model: EncoderModel, mel, mode: Literal["train", "eval"] = "eval") -> torch.Tensor:
    """Logits of shape (batch, n_classes); a single 2-D input gets batch size 1.

    Dropout is active only in ``train`` mode. When autograd is enabled the
    output is remembered so :func:`backward` can propagate into it.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    logits = model(as_batch(mel, model))
    model._recorded = logits if logits.requires_grad else None
    return logits


def backward(model: EncoderModel, grad_logits) -> dict[str, torch.Tensor]:
    """Back-propagate d(loss)/d(logits) from the last recorded forward pass.

    Returns gradients keyed by parameter name, for trainable parameters only.
    Each forward supports a single backward.
    """
    logits = model._recorded
    if logits is None:
        raise BackwardWithoutForward("backward() called with no recorded forward pass")
    grad = torch.as_tensor(grad_logits, dtype=logits.dtype)
    if grad.shape != logits.shape:
        raise ShapeMismatch(f"gradient shape {tuple(grad.shape)} does not match logits {tuple(logits.shape)}")
    for p in model.parameters():
        p.grad = None
    model._recorded = None
    logits.backward(grad)
    return {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
        if p.requires_grad
    }


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze_all(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def expected_parameter_count(config: EncoderConfig) -> int:
    """Closed-form parameter count of :func:`init_encoder` for ``config``."""
    d, m, c = config.d_model, config.d_mlp, config.n_classes
    stem = config.n_mels * d * 3 + d + d * d * 3 + d
    attention = (d * d + d) + d * d + (d * d + d) + (d * d + d)
    mlp = (d * m + m) + (m * d + d)
    block = 2 * d + attention + 2 * d + mlp
    return stem + config.n_layers * block + 2 * d + d * c + c
