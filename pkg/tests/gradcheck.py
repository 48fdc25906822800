"""Central finite differences against backward(), in float64."""

import numpy as np
import torch

from dysarthria_fewshot.model import backward, forward
from dysarthria_fewshot.train import cross_entropy

EPS = 1e-5


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (including the zero head and unit norms) a generic value."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return model


def loss_at(model, x, y) -> float:
    with torch.no_grad():
        return float(cross_entropy(forward(model, x, "eval"), y).loss)


def sample_indices(model, groups: dict[str, list[str]], per_group: int, seed=0):
    """Pick ``per_group`` (name, flat index) pairs from parameters whose names
    contain any of each group's substrings."""
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    picks = []
    for group, needles in groups.items():
        names = [n for n in params if params[n].requires_grad and any(s in n for s in needles)]
        assert names, f"no trainable parameters for group {group}"
        for _ in range(per_group):
            name = names[rng.integers(len(names))]
            picks.append((group, name, int(rng.integers(params[name].numel()))))
    return picks


def check(model, x, y, picks):
    """Return (group, name, index, analytic, numeric, rel_err) per sampled entry."""
    logits = forward(model, x, "eval")
    grads = backward(model, cross_entropy(logits, y).grad)
    params = dict(model.named_parameters())
    rows = []
    for group, name, idx in picks:
        flat = params[name].data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + EPS
        up = loss_at(model, x, y)
        flat[idx] = orig - EPS
        down = loss_at(model, x, y)
        flat[idx] = orig
        numeric = (up - down) / (2 * EPS)
        analytic = grads[name].view(-1)[idx].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
        rows.append((group, name, idx, analytic, numeric, rel))
    return rows
