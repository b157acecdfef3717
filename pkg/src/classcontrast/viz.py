"""Heatmap overlays, comparison grids, trace plots and the norm-vs-logit fit.

Colour recipe: the map is bilinearly upsampled to the image, scaled by its
largest magnitude so zero sits at the colormap midpoint, coloured with the
blue-white-red ramp and alpha-blended over the image at 0.5.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import plotting

logger = logging.getLogger(__name__)


def upsample(values: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of (H', W') or (N, H', W') maps to ``size``."""
    values = np.asarray(values, dtype=np.float64)
    size = tuple(int(s) for s in size)
    if values.shape[-2:] == size:
        return values.copy()
    t = torch.as_tensor(values)
    lead = t.shape[:-2]
    t = t.reshape((-1, 1) + t.shape[-2:])
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out.reshape(lead + size).numpy()


@dataclass
class RenderSpec:
    overlay_alpha: float = 0.5
    center: str = "zero"  # "median" re-centres single-signed maps for display only

    def __post_init__(self):
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ValueError("overlay_alpha must lie in [0, 1]")
        if self.center not in ("zero", "median"):
            raise ValueError(f"unknown centering {self.center!r}")


def centered_norm(values: np.ndarray, center: str = "zero") -> np.ndarray:
    """Map values to [-1, 1] with 0 fixed, dividing by the largest magnitude."""
    v = np.asarray(values, dtype=np.float64)
    if center == "median":
        v = v - np.median(v)
    m = np.abs(v).max() if v.size else 0.0
    return v / m if m > 0 else np.zeros_like(v)


def bwr(u: np.ndarray) -> np.ndarray:
    """Blue-white-red ramp on [-1, 1] evaluated exactly (no lookup table), (..., 3)."""
    u = np.clip(u, -1.0, 1.0)
    pos, neg = np.maximum(u, 0.0), np.maximum(-u, 0.0)
    return np.stack([1.0 - neg, 1.0 - pos - neg, 1.0 - pos], axis=-1)


def render_heatmap(values: np.ndarray, size=None, center: str = "zero") -> np.ndarray:
    if size is not None:
        values = upsample(values, size)
    return bwr(centered_norm(values, center))


@dataclass
class Overlay:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    all_zero: bool = False

    def to_uint8(self) -> np.ndarray:
        return np.round(self.rgb * 255.0).astype(np.uint8)

    def save(self, path) -> Path:
        path = Path(path)
        Image.fromarray(self.to_uint8()).save(path, format="PNG")
        return path


def render_overlay(image: np.ndarray, values, spec: RenderSpec | None = None, path=None) -> Overlay:
    """Blend the coloured map over ``image`` (C, H, W) in [0, 1]."""
    spec = spec or RenderSpec()
    values = getattr(values, "values", values)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("explanation map contains non-finite values")
    image = np.asarray(image, dtype=np.float64)
    rgb_image = np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image
    rgb_image = rgb_image.transpose(1, 2, 0)
    heat = render_heatmap(values, image.shape[-2:], spec.center)
    all_zero = not np.any(values)
    if all_zero:
        logger.warning("all-zero explanation map; rendering a neutral overlay")
    a = spec.overlay_alpha
    out = Overlay((1.0 - a) * rgb_image + a * heat, all_zero)
    if path is not None:
        out.save(path)
    return out


@dataclass
class GridCell:
    image: np.ndarray
    values: np.ndarray
    label: str = ""


def render_grid(rows: Sequence[Sequence[GridCell]], path, row_labels: Sequence[str] | None = None,
                col_labels: Sequence[str] | None = None, spec: RenderSpec | None = None,
                cell_size: float = 1.4) -> Path:
    """Grid of overlays laid out row-major, one labelled cell per map."""
    if not rows or not any(rows):
        raise ValueError("render_grid needs at least one cell")
    nrows, ncols = len(rows), max(len(r) for r in rows)
    fig, axes = plotting.figure(nrows, ncols, cell_size, cell_size + 0.3)
    for i, row in enumerate(rows):
        for j in range(ncols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j >= len(row):
                ax.axis("off")
                continue
            cell = row[j]
            ax.imshow(render_overlay(cell.image, cell.values, spec).rgb, interpolation="nearest")
            ax.set_title(cell.label, fontsize=6)
            if j == 0 and row_labels:
                ax.set_ylabel(row_labels[i], fontsize=7)
            if i == 0 and col_labels and j < len(col_labels):
                ax.set_xlabel(col_labels[j], fontsize=7)
                ax.xaxis.set_label_position("top")
    fig.tight_layout()
    plotting.save(fig, path)
    return Path(path)


@dataclass
class SampleSelection:
    ids: list[str]
    indices: list[int]
    top_probs: list[list[float]]  # p_1..p_3 per selected sample
    top_classes: list[list[int]]
    status: str = "ok"


def select_samples(handle, dataset, threshold="p2 > 0.1", k: int | None = None, seed: int = 0) -> SampleSelection:
    """Uniformly draw up to ``k`` qualifying samples (all of them if ``k`` is None)."""
    from .ablate import Threshold
    from .models import forward, softmax

    thr = Threshold.parse(threshold) if isinstance(threshold, str) else threshold
    probs = softmax(forward(handle, dataset)) if len(dataset) else np.zeros((0, handle.num_classes))
    qualifying = np.flatnonzero(thr(probs)) if len(dataset) else np.zeros(0, dtype=int)
    if len(qualifying) == 0:
        return SampleSelection([], [], [], [], "empty")
    rng = np.random.default_rng(seed)
    take = len(qualifying) if k is None else min(k, len(qualifying))
    chosen = np.sort(rng.choice(qualifying, size=take, replace=False))
    order = np.argsort(-probs[chosen], axis=1, kind="stable")[:, :3]
    return SampleSelection(
        [dataset.ids[i] for i in chosen], chosen.tolist(),
        [probs[i, o].tolist() for i, o in zip(chosen, order)], order.tolist())


def plot_traces(trace, path, metrics=("accuracy", "y_t", "p_t")) -> Path:
    """Three panels, one curve per selector, annotated with model id and epsilon."""
    if not trace.series:
        raise ValueError("empty trace")
    lengths = {len(s[m]) for s in trace.series.values() for m in metrics}
    if len(lengths) != 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    n = lengths.pop()
    meta = trace.metadata
    fig, axes = plotting.figure(1, len(metrics))
    labels = {"accuracy": "accuracy", "y_t": "mean $y_t$", "p_t": "mean $p_t$"}
    for ax, metric in zip(axes[0], metrics):
        for sel, s in trace.series.items():
            ax.plot(range(n), s[metric], label=sel, color=plotting.SELECTOR_COLORS.get(sel))
        ax.set_xlabel("iteration")
        ax.set_ylabel(labels.get(metric, metric))
        ax.set_title(f"{meta.get('model_id', '')}  eps={meta.get('epsilon', float('nan')):g}")
    axes[0][0].legend(frameon=False)
    fig.tight_layout()
    plotting.save(fig, path)
    return Path(path)


@dataclass
class RegressionReport:
    points: list[tuple[float, float]]  # (logit, explanation norm)
    coefficients: list[float]  # highest degree first
    r_squared: float
    norm: str = "l2"
    metadata: dict = field(default_factory=dict)

    def slope_at(self, y: float) -> float:
        a, b, _ = self.coefficients
        return 2 * a * y + b

    def relative_curvature(self) -> float:
        """|a| * range(y)^2 / mean norm: size of the quadratic term across the data."""
        ys = np.array([p[0] for p in self.points])
        ns = np.array([p[1] for p in self.points])
        return float(abs(self.coefficients[0]) * np.ptp(ys) ** 2 / np.abs(ns).mean())

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def fit_quadratic(points) -> RegressionReport:
    pts = np.asarray(points, dtype=np.float64)
    y, n = pts[:, 0], pts[:, 1]
    if len(np.unique(y)) < 3:
        raise ValueError("degenerate design: need at least three distinct logit values")
    coeffs = np.polyfit(y, n, 2)
    resid = n - np.polyval(coeffs, y)
    ss_tot = float(((n - n.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return RegressionReport([tuple(map(float, p)) for p in pts], coeffs.tolist(), r2)


def norm_logit_regression(handle, dataset, num_images: int, classes_per_image: int,
                          seed: int = 0, norm: str = "l2") -> RegressionReport:
    """Fit ||grad_x y_s|| against y_s over random (image, class) pairs."""
    from .models import _backward

    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    if norm not in ("l2", "l1"):
        raise ValueError(f"unknown norm {norm!r}")
    rng = np.random.default_rng(seed)
    n = min(num_images, len(dataset))
    idx = np.sort(rng.choice(len(dataset), size=n, replace=False))
    k = min(classes_per_image, handle.num_classes)
    classes = np.stack([rng.choice(handle.num_classes, size=k, replace=False) for _ in idx])
    points = []
    for j in range(k):
        pix = dataset.pixels[idx]
        _, logits, _, grads = _backward(handle, pix, classes[:, j], "logit")
        g = grads[0].reshape(len(idx), -1)
        norms = g.norm(dim=1) if norm == "l2" else g.abs().sum(dim=1)
        ys = logits[torch.arange(len(idx)), torch.as_tensor(classes[:, j])]
        points += list(zip(ys.tolist(), norms.tolist()))
    report = fit_quadratic(points)
    report.norm = norm
    report.metadata = {"model_id": handle.model_id, "num_images": int(n), "classes_per_image": int(k), "seed": seed}
    return report


def plot_regression(report: RegressionReport, path) -> Path:
    pts = np.asarray(report.points)
    fig, axes = plotting.figure(1, 1, 3.6, 2.8)
    ax = axes[0][0]
    ax.scatter(pts[:, 0], pts[:, 1], s=3, alpha=0.4, color="#4575b4", linewidths=0)
    xs = np.linspace(pts[:, 0].min(), pts[:, 0].max(), 200)
    ax.plot(xs, np.polyval(report.coefficients, xs), color="#d73027")
    ax.set_xlabel("logit $y$")
    ax.set_ylabel(r"$\|\nabla_x y\|$")
    ax.set_title(f"{report.metadata.get('model_id', '')}  $R^2$={report.r_squared:.2f}")
    fig.tight_layout()
    plotting.save(fig, path)
    return Path(path)
