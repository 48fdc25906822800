"""Low-rank adaptation of the encoder's attention projections.

Each targeted projection W becomes W x + (alpha / r) * B (A x) with W frozen,
A (r x d_in) drawn from N(0, init_std) and B (d_out x r) starting at zero, so
an adapted model is exactly the base model until the first update.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidConfig, RankTooLarge, ShapeMismatch
from .model import EncoderConfig, EncoderModel, init_encoder

PROJECTIONS = ("query", "key", "value", "out")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float | None = None  # defaults to rank, i.e. scaling 1
    target_projections: tuple[str, ...] = ("query", "value")
    init_std: float = 0.02
    seed: int = 0
    train_biases: bool = False
    train_norms: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target_projections", tuple(self.target_projections))
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        if self.rank < 1:
            raise InvalidConfig("LoRA rank must be >= 1")
        unknown = set(self.target_projections) - set(PROJECTIONS)
        if unknown or not self.target_projections:
            raise InvalidConfig(f"target_projections must be a non-empty subset of {PROJECTIONS}")
        if self.init_std <= 0:
            raise InvalidConfig("init_std must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "target_projections": list(self.target_projections),
            "init_std": self.init_std,
            "seed": self.seed,
            "train_biases": self.train_biases,
            "train_norms": self.train_norms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(**d)


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        self.base = base
        self.scaling = scaling
        self.lora_A = nn.Parameter(torch.zeros(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.lora_A.t()) @ self.lora_B.t())

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_B @ self.lora_A)


def lora_layers(model: nn.Module) -> dict[str, LoraLinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoraLinear)}


def is_adapted(model: nn.Module) -> bool:
    return bool(lora_layers(model))


def _trainable_after_wrap(name: str, config: LoraConfig) -> bool:
    if name.startswith("head.") or ".lora_A" in name or ".lora_B" in name or name.startswith("lora_"):
        return True
    is_norm = "_ln." in name or name.startswith("ln_post.")
    if is_norm:
        return config.train_norms
    return config.train_biases and name.endswith("bias")


def wrap_model(model: EncoderModel, config: LoraConfig, inplace: bool = False) -> EncoderModel:
    """Attach LoRA factors to every targeted projection and freeze the rest.

    The classification head stays trainable. Unless ``inplace`` is set the
    input model is left untouched.
    """
    if is_adapted(model):
        raise ValueError("model already carries LoRA adapters")
    d = model.config.d_model
    if config.rank > d:
        raise RankTooLarge(f"rank {config.rank} exceeds projection dimension {d}")
    adapted = model if inplace else copy.deepcopy(model)
    adapted._recorded = None
    gen = torch.Generator().manual_seed(config.seed)
    for block in adapted.blocks:
        for proj in config.target_projections:
            base = getattr(block.attn, proj)
            if config.rank > min(base.in_features, base.out_features):
                raise RankTooLarge(f"rank {config.rank} exceeds {proj} projection shape")
            layer = LoraLinear(base, config.rank, config.scaling)
            with torch.no_grad():
                a = torch.randn(layer.lora_A.shape, generator=gen, dtype=torch.float64) * config.init_std
                layer.lora_A.copy_(a.to(layer.lora_A.dtype))
            setattr(block.attn, proj, layer)
    for name, p in adapted.named_parameters():
        p.requires_grad_(_trainable_after_wrap(name, config))
    adapted.lora_config = config
    return adapted


def merge(adapted: EncoderModel) -> EncoderModel:
    """Collapse every LoRA layer into a plain linear map W + (alpha / r) B A."""
    merged = copy.deepcopy(adapted)
    merged._recorded = None
    for block in merged.blocks:
        for proj in PROJECTIONS:
            layer = getattr(block.attn, proj)
            if isinstance(layer, LoraLinear):
                plain = layer.base
                with torch.no_grad():
                    plain.weight.copy_(layer.merged_weight())
                setattr(block.attn, proj, plain)
    for p in merged.parameters():
        p.requires_grad_(True)
    if hasattr(merged, "lora_config"):
        del merged.lora_config
    return merged


def expected_trainable_count(encoder: EncoderConfig, config: LoraConfig) -> int:
    """r * (d_in + d_out) per wrapped projection plus the head (default freeze policy)."""
    d = encoder.d_model
    per_proj = config.rank * (d + d)
    return encoder.n_layers * len(config.target_projections) * per_proj + d * encoder.n_classes + encoder.n_classes


@dataclass
class AdapterState:
    """Only the LoRA factors and head, plus the configs needed to re-attach them."""

    encoder_config: EncoderConfig
    lora_config: LoraConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def adapter_tensor_names(model: nn.Module) -> list[str]:
    return [
        name for name, _ in model.named_parameters()
        if name.startswith("head.") or name.endswith(".lora_A") or name.endswith(".lora_B")
    ]


def adapter_state(adapted: EncoderModel) -> AdapterState:
    if not is_adapted(adapted):
        raise ValueError("model has no LoRA adapters")
    params = dict(adapted.named_parameters())
    tensors = {n: params[n].detach().cpu().numpy().copy() for n in adapter_tensor_names(adapted)}
    return AdapterState(adapted.config, adapted.lora_config, tensors)


def restore_adapter(base: EncoderModel, state: AdapterState) -> EncoderModel:
    """Wrap ``base`` with ``state``'s config and load its factors and head."""
    if base.config.d_model != state.encoder_config.d_model or base.config.n_classes != state.encoder_config.n_classes:
        raise ShapeMismatch(
            f"adapter was trained for d_model={state.encoder_config.d_model}, "
            f"n_classes={state.encoder_config.n_classes}; base has d_model={base.config.d_model}, "
            f"n_classes={base.config.n_classes}"
        )
    adapted = wrap_model(base, state.lora_config)
    load_named_tensors(adapted, state.tensors, strict_subset=True)
    return adapted


def load_named_tensors(model: nn.Module, tensors: dict[str, np.ndarray], strict_subset: bool = False) -> None:
    """Copy arrays into parameters by name, checking names and shapes.

    With ``strict_subset`` the arrays may cover only part of the model;
    otherwise every parameter must be supplied.
    """
    params = dict(model.named_parameters())
    unknown = sorted(set(tensors) - set(params))
    if unknown:
        raise ShapeMismatch(f"tensors not present in model: {', '.join(unknown[:5])}")
    if not strict_subset:
        missing = sorted(set(params) - set(tensors))
        if missing:
            raise ShapeMismatch(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    with torch.no_grad():
        for name, arr in tensors.items():
            p = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatch(f"{name}: stored shape {tuple(arr.shape)} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))


def build(encoder: EncoderConfig, lora: LoraConfig | None) -> EncoderModel:
    model = init_encoder(encoder)
    return wrap_model(model, lora, inplace=True) if lora is not None else model
