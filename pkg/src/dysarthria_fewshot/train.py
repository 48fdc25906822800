"""Supervised fine-tuning loop.

Default recipe: 10 epochs, batch size 8, learning rate 1e-3, AdamW with
betas (0.9, 0.999) and no weight decay, constant rate, final-epoch model kept.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np
import torch

from .corpus import Manifest, SplitSpec
from .errors import InvalidConfig, LabelOutOfRange, NonFiniteLoss
from .fsutil import atomic_write_text
from .model import EncoderModel, backward, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise InvalidConfig(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_jsonl())


class CrossEntropy(NamedTuple):
    loss: torch.Tensor
    grad: torch.Tensor  # d(loss) / d(logits)
    per_example: torch.Tensor


def cross_entropy(logits, labels) -> CrossEntropy:
    """Mean negative log-softmax of the true class, with its logit gradient.

    ``logits`` is (n_classes,) with an integer label, or (batch, n_classes)
    with a label sequence; the batch loss is the mean over examples.
    """
    z = torch.as_tensor(logits).detach()
    single = z.ndim == 1
    if single:
        z = z.unsqueeze(0)
    y = torch.as_tensor(np.atleast_1d(np.asarray(labels)), dtype=torch.long)
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= z.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {z.shape[1]}), got {y.tolist()}")
    shifted = z - z.max(dim=1, keepdim=True).values
    log_norm = torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    log_probs = shifted - log_norm
    per_example = -log_probs.gather(1, y[:, None]).squeeze(1)
    grad = torch.exp(log_probs)
    grad[torch.arange(z.shape[0]), y] -= 1.0
    grad /= z.shape[0]
    if single:
        return CrossEntropy(per_example[0], grad[0], per_example)
    return CrossEntropy(per_example.mean(), grad, per_example)


class FeatureSource(Protocol):
    def get(self, utterance_id: str) -> np.ndarray: ...


def _optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate)
    return torch.optim.AdamW(
        params, lr=config.learning_rate, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
    )


def batches(n: int, batch_size: int, order: Sequence[int]) -> list[list[int]]:
    # the last partial batch is kept
    return [list(order[i : i + batch_size]) for i in range(0, n, batch_size)]


def train(
    model: EncoderModel,
    split: SplitSpec,
    manifest: Manifest,
    features: FeatureSource,
    config: TrainConfig | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainHistory:
    """Fine-tune ``model`` in place on ``split.train_ids``.

    Only parameters with ``requires_grad`` are handed to the optimizer.
    Examples are reshuffled every epoch from a generator seeded by
    ``config.seed``; the same seed reproduces the run exactly. A non-finite
    batch loss aborts the run with the offending batch named.
    """
    config = config or TrainConfig()
    ids = list(split.train_ids)
    if not ids:
        raise ValueError("split has no training utterances")
    labels = np.array([manifest.label_index(i, split.label_scheme) for i in ids], dtype=np.int64)
    if labels.max() >= model.config.n_classes:
        raise LabelOutOfRange(
            f"{split.label_scheme.value} labels need {labels.max() + 1} classes, model has {model.config.n_classes}"
        )
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("model has no trainable parameters")
    optimizer = _optimizer(trainable, config)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)  # dropout masks
    history = TrainHistory()

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(ids)) if config.shuffle else np.arange(len(ids))
        losses: list[float] = []
        correct = 0
        for b, batch in enumerate(batches(len(ids), config.batch_size, order)):
            x = torch.from_numpy(np.stack([features.get(ids[i]) for i in batch]))
            y = labels[batch]
            logits = forward(model, x, "train")
            ce = cross_entropy(logits, y)
            if not torch.isfinite(ce.loss):
                model._recorded = None
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {b} (utterances {', '.join(ids[i] for i in batch)})"
                )
            backward(model, ce.grad)
            optimizer.step()
            losses.extend(ce.per_example.tolist())
            correct += int((logits.detach().argmax(dim=1).numpy() == y).sum())
        record = EpochRecord(epoch=epoch, loss=math.fsum(losses) / len(losses), accuracy=correct / len(ids))
        history.records.append(record)
        # wall time goes to the log only, so history files stay byte-reproducible
        log.info(
            "epoch %d: loss %.4f accuracy %.3f (%.1fs)",
            epoch, record.loss, record.accuracy, time.perf_counter() - start,
        )
        if on_epoch is not None:
            on_epoch(record)
    return history
