"""Predictions, confusion matrices, the five reported metrics, and report tables.

Per-class precision, recall, F1 and specificity use a one-vs-rest reduction.
In binary experiments class 1 (Pathology) is the positive class. A metric
whose denominator is zero is reported as 0 and named in ``degenerate``.
"""

from __future__ import annotations

import csv
import io
import json
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import EmptyMatrix, LabelOutOfRange, MissingFeatures
from .fsutil import atomic_write_text
from .model import EncoderModel, forward


@dataclass(frozen=True)
class Predictions:
    utterance_ids: tuple[str, ...]
    labels: np.ndarray  # (n,) int
    probabilities: np.ndarray  # (n, n_classes) float64


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: EncoderModel, utterance_ids: Sequence[str], features, batch_size: int = 16) -> Predictions:
    """Eval-mode argmax predictions; ties go to the lowest class index."""
    ids = list(utterance_ids)
    missing = [i for i in ids if not features.has(i)] if hasattr(features, "has") else []
    if missing:
        raise MissingFeatures(f"{len(missing)} test utterance(s) have no features, e.g. {missing[0]}")
    chunks = []
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            x = torch.from_numpy(np.stack([features.get(i) for i in ids[start : start + batch_size]]))
            chunks.append(forward(model, x, "eval").double().numpy())
    logits = np.concatenate(chunks) if chunks else np.zeros((0, model.config.n_classes))
    return Predictions(tuple(ids), np.argmax(logits, axis=1).astype(np.int64), softmax(logits))


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[i, j]: true class i predicted as j
    class_names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) treating class ``c`` as positive."""
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion(pred: Sequence[int], truth: Sequence[int], n_classes: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"need equal-length label sequences, got {pred.shape} and {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"{name} labels must lie in [0, {n_classes})")
    counts = np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n_classes))
    if len(names) != n_classes:
        raise ValueError("class_names length must equal n_classes")
    return ConfusionMatrix(counts, names)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    degenerate: tuple[str, ...] = ()


@dataclass(frozen=True)
class MetricsReport:
    experiment_name: str
    accuracy: float
    per_class: tuple[ClassMetrics, ...]
    confusion: tuple[tuple[int, ...], ...]

    @property
    def is_binary(self) -> bool:
        return len(self.per_class) == 2

    @property
    def positive(self) -> ClassMetrics:
        """Summary row of a binary experiment: metrics of class 1."""
        return self.per_class[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = [dict(c, degenerate=list(c["degenerate"])) for c in d["per_class"]]
        d["confusion"] = [list(r) for r in self.confusion]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per_class = tuple(ClassMetrics(**dict(c, degenerate=tuple(c.get("degenerate", ())))) for c in d["per_class"])
        return cls(d["experiment_name"], d["accuracy"], per_class, tuple(tuple(r) for r in d["confusion"]))


def _ratio(num: int, den: int, label: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(label)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix, experiment_name: str = "") -> MetricsReport:
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix holds no examples")
    per_class = []
    for c in range(cm.n_classes):
        tp, fp, fn, tn = cm.one_vs_rest(c)
        flags: list[str] = []
        p = _ratio(tp, tp + fp, "precision", flags)
        r = _ratio(tp, tp + fn, "recall", flags)
        s = _ratio(tn, tn + fp, "specificity", flags)
        if p + r > 0:
            f1 = 2 * p * r / (p + r)
        else:
            f1 = 0.0
            flags.append("f1")
        per_class.append(ClassMetrics(cm.class_names[c], p, r, f1, s, tp + fn, tuple(flags)))
    accuracy = int(np.trace(cm.counts)) / total
    return MetricsReport(experiment_name, accuracy, tuple(per_class), tuple(tuple(int(v) for v in row) for row in cm.counts))


# --- rendering ------------------------------------------------------------------

METRIC_COLUMNS = ("Precision", "Recall", "F1-Score", "Specificity")


def display(x: float, places: int = 2, scale: int = 1) -> str:
    """Round half away from zero, as printed tables do (``round`` would go to even)."""
    return str((Decimal(repr(x)) * scale).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def _cells(m: ClassMetrics) -> list[str]:
    return [display(m.precision), display(m.recall), display(m.f1), display(m.specificity)]


def _pct(x: float) -> str:
    return display(x, 0, scale=100)


def _row(cells) -> str:
    return "| " + " | ".join(cells) + " |"


def render_markdown(reports: Sequence[MetricsReport]) -> str:
    blocks = []
    binary = [r for r in reports if r.is_binary]
    if binary:
        lines = [
            _row(("Experiment name", "Accuracy (%)") + METRIC_COLUMNS),
            _row(["---"] * 6),
        ]
        lines += [_row([r.experiment_name, _pct(r.accuracy)] + _cells(r.positive)) for r in binary]
        blocks.append("\n".join(lines))
    for r in reports:
        if r.is_binary:
            continue
        lines = [f"### {r.experiment_name}", "", _row(("Class",) + METRIC_COLUMNS), _row(["---"] * 5)]
        lines += [_row([c.name] + _cells(c)) for c in r.per_class]
        lines.append(_row([f"Accuracy = {_pct(r.accuracy)}%", "", "", "", ""]))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def render_report(reports: Sequence[MetricsReport], fmt: str = "markdown") -> str:
    """Markdown tables (binary: one row per experiment; multiclass: one row per
    class plus an accuracy footer) or JSON mirroring the report fields."""
    if not reports:
        raise ValueError("render_report needs at least one report")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=1) + "\n"
    if fmt == "markdown":
        return render_markdown(reports)
    raise ValueError(f"unknown report format {fmt!r}")


def load_reports(path: str | Path) -> list[MetricsReport]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [MetricsReport.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]


def predictions_csv(preds: Predictions, truth: Sequence[int]) -> str:
    k = preds.probabilities.shape[1] if preds.probabilities.ndim == 2 else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utterance_id", "true_label", "pred_label"] + [f"prob_{j}" for j in range(k)])
    for uid, t, p, probs in zip(preds.utterance_ids, truth, preds.labels, preds.probabilities):
        w.writerow([uid, int(t), int(p)] + [repr(float(v)) for v in probs])
    return buf.getvalue()


def write_predictions(path: str | Path, preds: Predictions, truth: Sequence[int]) -> None:
    atomic_write_text(path, predictions_csv(preds, truth))
