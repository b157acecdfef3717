"""Iterative gradient-sign perturbation under an l-inf budget.

Each selector (original / mean / max / weighted contrast over input
gradients) picks the ascent direction; the image is pushed by
``step * sign(phi)`` and clamped back into the budget box intersected with
[0, 1]. Accuracy, mean ``y_t`` and mean ``p_t`` are tracked per iteration.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .contrast import Combinator, contrast_coefficients
from .data import ImageBatch
from .models import ClassifierHandle, SeedMode, _backward, softmax

logger = logging.getLogger(__name__)

SELECTORS = tuple(c.value for c in Combinator)
EPSILON_PRESETS = {"reported": 1e-3, "used": 3e-3}
CHUNK = 100  # fixed work unit so aggregation never depends on worker count


@dataclass
class PerturbConfig:
    epsilon: float = 3e-3
    n_total: int = 20
    selectors: tuple[str, ...] = SELECTORS
    target_rule: str = "true_label"  # or "predicted_label"
    frozen_explanation: bool = False
    mean_scaled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.n_total < 0:
            raise ValueError("n_total must be non-negative")
        if not self.selectors:
            raise ValueError("at least one selector is required")
        self.selectors = tuple(Combinator(s).value for s in self.selectors)
        if self.target_rule not in ("true_label", "predicted_label"):
            raise ValueError(f"unknown target_rule {self.target_rule!r}")

    @property
    def step(self) -> float:
        return self.epsilon / self.n_total if self.n_total else 0.0


def perturb_step(x_n, x_0, phi, step: float, epsilon: float):
    """One ascent step followed by the budget clamp; works on numpy or torch."""
    if x_n.shape != x_0.shape or x_n.shape != phi.shape:
        raise ValueError(f"shape mismatch: x_n {tuple(x_n.shape)}, x_0 {tuple(x_0.shape)}, phi {tuple(phi.shape)}")
    if torch.is_tensor(x_n):
        lo = torch.clamp(x_0 - epsilon, min=0.0)
        hi = torch.clamp(x_0 + epsilon, max=1.0)
        return torch.minimum(torch.maximum(x_n + step * torch.sign(phi), lo), hi)
    lo = np.maximum(x_0 - epsilon, 0.0)
    hi = np.minimum(x_0 + epsilon, 1.0)
    return np.clip(x_n + step * np.sign(phi), lo, hi)


@dataclass
class PerturbationTrace:
    series: dict[str, dict[str, list[float]]]  # selector -> {accuracy, y_t, p_t}
    metadata: dict = field(default_factory=dict)

    def final(self, selector: str, metric: str) -> float:
        return self.series[selector][metric][-1]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"metadata": self.metadata, "series": self.series},
                                         indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> PerturbationTrace:
        d = json.loads(Path(path).read_text())
        return cls(d["series"], d["metadata"])

    def to_tsv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["iteration", "selector", "accuracy", "mean_y_t", "mean_p_t"])
            for sel, s in self.series.items():
                for i, (a, y, p) in enumerate(zip(s["accuracy"], s["y_t"], s["p_t"])):
                    w.writerow([i, sel, repr(a), repr(y), repr(p)])


def _metrics(logits: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor):
    rows = torch.arange(len(targets))
    y = logits[rows, targets]
    p = torch.softmax(logits, dim=1)[rows, targets]
    correct = (logits.argmax(dim=1) == labels).to(logits.dtype)
    return torch.stack([correct, y, p]).sum(dim=1).numpy()  # per-chunk sums


def _run_chunk(handle: ClassifierHandle, pixels: np.ndarray, labels: np.ndarray, config: PerturbConfig):
    x0 = handle.as_tensor(pixels)
    labels_t = torch.as_tensor(labels)
    with torch.no_grad():
        clean, _ = handle.run(x0)
    targets = labels_t if config.target_rule == "true_label" else clean.argmax(dim=1)
    sums = {s: np.zeros((config.n_total + 1, 3)) for s in config.selectors}
    for sel in config.selectors:
        x = x0.clone()
        sums[sel][0] = _metrics(clean, labels_t, targets)
        frozen = None
        for n in range(1, config.n_total + 1):
            if frozen is None or not config.frozen_explanation:
                with torch.no_grad():
                    logits, _ = handle.run(x)
                coeff, _ = contrast_coefficients(logits.numpy(), targets.numpy(), sel, config.mean_scaled)
                _, _, _, grads = _backward(handle, x, targets, SeedMode.LOGIT,
                                           coefficients=torch.as_tensor(coeff))
                frozen = grads[0]
            x = perturb_step(x, x0, frozen, config.step, config.epsilon)
            with torch.no_grad():
                logits, _ = handle.run(x)
            sums[sel][n] = _metrics(logits, labels_t, targets)
    return sums


def run_perturbation(handle: ClassifierHandle, dataset: ImageBatch, config: PerturbConfig,
                     jobs: int = 1, metadata: dict | None = None) -> PerturbationTrace:
    """Average the per-iteration metrics over ``dataset`` for each selector."""
    dataset.check_labels(handle.num_classes)
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    chunks = [(dataset.pixels[i:i + CHUNK], dataset.labels[i:i + CHUNK]) for i in range(0, n, CHUNK)]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda c: _run_chunk(handle, c[0], c[1], config), chunks))
    series = {}
    for sel in config.selectors:
        total = np.zeros((config.n_total + 1, 3))
        for r in results:  # fixed chunk order
            total += r[sel]
        mean = total / n
        series[sel] = {"accuracy": mean[:, 0].tolist(), "y_t": mean[:, 1].tolist(), "p_t": mean[:, 2].tolist()}
    meta = {"model_id": handle.model_id, "epsilon": config.epsilon, "n_total": config.n_total,
            "step": config.step, "sample_count": n, "target_rule": config.target_rule,
            "frozen_explanation": config.frozen_explanation, "selectors": list(config.selectors)}
    meta.update(metadata or {})
    return PerturbationTrace(series, meta)
