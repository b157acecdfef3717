"""Blur/mask faithfulness benchmark.

For every image passing a threshold on its second-highest probability, the
explanation for each of its top-two classes is turned into a keep-mask of
positive or negative pixels; all other pixels are replaced by a baseline and
the relative probability of that class among the clean top two is measured.
"""

from __future__ import annotations

import csv
import json
import logging
import operator
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torchvision.transforms.functional import gaussian_blur

from .data import ImageBatch
from .explainers import ExplainRequest, Method, explain
from .models import ClassifierHandle, SeedMode, softmax
from .viz import upsample

logger = logging.getLogger(__name__)

BASELINES = ("gaussian_blur", "zeros", "channel_mean")
SIGNS = ("positive", "negative")
VARIANTS = {"original": SeedMode.LOGIT, "weighted": SeedMode.SOFTMAX}
CHUNK = 50

_OPS = {">": operator.gt, "<": operator.lt, ">=": operator.ge, "<=": operator.le}


@dataclass(frozen=True)
class Threshold:
    """Predicate on the k-th highest softmax probability, e.g. ``p2 > 0.1``."""

    rank: int = 2
    op: str = ">"
    value: float = 0.1

    @classmethod
    def parse(cls, text: str) -> Threshold:
        m = re.fullmatch(r"\s*p_?(\d+)\s*(>=|<=|>|<)\s*([0-9.eE+-]+)\s*", text)
        if not m:
            raise ValueError(f"malformed threshold {text!r}; expected e.g. 'p2 > 0.1'")
        return cls(int(m.group(1)), m.group(2), float(m.group(3)))

    def __str__(self) -> str:
        return f"p{self.rank} {self.op} {self.value:g}"

    def __call__(self, probs: np.ndarray) -> np.ndarray:
        if self.rank < 1 or self.rank > probs.shape[-1]:
            raise ValueError(f"threshold rank {self.rank} outside 1..{probs.shape[-1]}")
        ranked = -np.sort(-probs, axis=-1)
        return _OPS[self.op](ranked[..., self.rank - 1], self.value)


@dataclass
class AblationConfig:
    methods: tuple[str, ...] = ("gradcam", "linear_approx", "xgradcam")
    layer_name: str = "block4"
    variants: tuple[str, ...] = ("original", "weighted")
    baselines: tuple[str, ...] = BASELINES
    feature_signs: tuple[str, ...] = SIGNS
    threshold: str = "p2 > 0.1"
    equal_area: bool = True
    blur_sigma: float | None = None  # None: 10 px scaled from a 224-px image
    blur_kernel: int | None = None  # None: 51 px scaled, forced odd
    dataset_channel_mean: bool = False

    def __post_init__(self):
        self.methods = tuple(Method(m).value for m in self.methods)
        if Method.FULLGRAD.value in self.methods:
            logger.warning("fullgrad maps are typically single-signed; kept-feature masks may be empty")
        if len(self.variants) > 2:
            raise ValueError("at most two variants (original, weighted) are compared")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ValueError(f"unknown baseline {b!r}")
        for s in self.feature_signs:
            if s not in SIGNS:
                raise ValueError(f"unknown feature sign {s!r}")
        if not (self.methods and self.variants and self.baselines and self.feature_signs):
            raise ValueError("ablation axes must be non-empty")
        if self.blur_kernel is not None and self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        Threshold.parse(self.threshold)

    def blur_params(self, image_size: int) -> tuple[int, float]:
        scale = image_size / 224.0
        sigma = self.blur_sigma if self.blur_sigma is not None else 10.0 * scale
        kernel = self.blur_kernel
        if kernel is None:
            kernel = max(3, int(round(51 * scale)))
            kernel += kernel % 2 == 0
        return kernel, sigma


def relative_probability(y_t1, y_t2):
    """exp(y_t1) / (exp(y_t1) + exp(y_t2)), overflow-safe."""
    y1 = np.asarray(y_t1, dtype=np.float64)
    y2 = np.asarray(y_t2, dtype=np.float64)
    m = np.maximum(y1, y2)
    e1, e2 = np.exp(y1 - m), np.exp(y2 - m)
    return e1 / (e1 + e2)


@dataclass
class FeatureMask:
    mask: np.ndarray  # bool (H, W), True = kept
    provenance: dict = field(default_factory=dict)
    empty_warning: bool = False

    @property
    def kept_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _candidates(values: np.ndarray, sign: str) -> np.ndarray:
    if sign == "positive":
        return values > 0
    if sign == "negative":
        return values < 0
    raise ValueError(f"unknown feature sign {sign!r}")


def top_k_mask(values: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Keep the k candidate cells of largest |value|; ties go to the earlier row-major cell."""
    flat = np.where(candidates.ravel(), np.abs(values.ravel()), -np.inf)
    order = np.argsort(-flat, kind="stable")[:k]
    out = np.zeros(values.size, dtype=bool)
    out[order] = True
    return out.reshape(values.shape) & candidates


def build_mask(values: np.ndarray, sign: str, partner: np.ndarray | None = None,
               equal_area: bool = True, provenance: dict | None = None) -> FeatureMask:
    """Keep-mask of ``sign`` cells; with a partner map, truncate to the smaller count."""
    values = np.asarray(values)
    cand = _candidates(values, sign)
    mask = cand
    applied = False
    if partner is not None and equal_area:
        k = min(int(cand.sum()), int(_candidates(np.asarray(partner), sign).sum()))
        mask = top_k_mask(values, cand, k)
        applied = True
    prov = dict(provenance or {}, sign=sign, equal_area=applied)
    empty = not mask.any()
    if empty:
        logger.debug("empty %s mask (%s)", sign, prov)
    return FeatureMask(mask, prov, empty)


def apply_baseline(image: np.ndarray, mask: np.ndarray, baseline: str, config: AblationConfig | None = None,
                   channel_mean: np.ndarray | None = None) -> np.ndarray:
    """Keep ``mask`` pixels of ``image`` (C, H, W); replace the rest by the baseline."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[-2:]}")
    config = config or AblationConfig()
    if baseline == "zeros":
        fill = np.zeros_like(image)
    elif baseline == "channel_mean":
        mean = image.mean(axis=(-2, -1), keepdims=True) if channel_mean is None else \
            np.asarray(channel_mean).reshape(-1, 1, 1)
        fill = np.broadcast_to(mean, image.shape)
    elif baseline == "gaussian_blur":
        kernel, sigma = config.blur_params(image.shape[-1])
        fill = gaussian_blur(torch.as_tensor(image)[None], [kernel, kernel], [sigma, sigma])[0].numpy()
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    return np.where(mask[None], image, fill)


@dataclass
class AblationRecord:
    cells: dict  # "method/variant/baseline/sign/t1" -> {"mean": float, "count": int}
    clean: dict  # {"t1": float, "t2": float}
    sample_count: int
    status: str = "ok"  # or "empty"
    metadata: dict = field(default_factory=dict)

    def value(self, method, variant, baseline, sign, rank) -> float:
        return self.cells[f"{method}/{variant}/{baseline}/{sign}/{rank}"]["mean"]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"status": self.status, "sample_count": self.sample_count, "clean": self.clean,
             "cells": self.cells, "metadata": self.metadata}, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> AblationRecord:
        d = json.loads(Path(path).read_text())
        return cls(d["cells"], d["clean"], d["sample_count"], d["status"], d["metadata"])

    def to_tsv(self, path) -> None:
        """Rows: method x rank; columns: baseline x sign x variant (Table-1 layout)."""
        m = self.metadata
        cols = [(b, s, v) for b in m["baselines"] for s in m["feature_signs"] for v in m["variants"]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["method", "rank", "clean"] + [f"{b}:{s}:{v}" for b, s, v in cols])
            for method in m["methods"]:
                for rank in ("t1", "t2"):
                    row = [method, rank, _fmt(self.clean.get(rank))]
                    row += [_fmt(self.cells.get(f"{method}/{v}/{b}/{s}/{rank}", {}).get("mean")) for b, s, v in cols]
                    w.writerow(row)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _upsampled(handle, pixels, method, variant, targets, layer):
    req = ExplainRequest(method, VARIANTS[variant], "none", 0,
                         None if Method(method) in (Method.GRADIENT, Method.FULLGRAD) else layer)
    vals = explain(handle, pixels, req, target=targets).values
    return upsample(vals, pixels.shape[-2:])


def _run_chunk(handle, pixels, config: AblationConfig, dataset_mean):
    x = handle.as_tensor(pixels)
    with torch.no_grad():
        clean = handle.run(x)[0].numpy()
    ranked = np.argsort(-clean, axis=1, kind="stable")
    t1, t2 = ranked[:, 0], ranked[:, 1]
    rows = np.arange(len(pixels))
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    empties = 0
    for method in config.methods:
        for rank, targets in (("t1", t1), ("t2", t2)):
            maps = {v: _upsampled(handle, pixels, method, v, targets, config.layer_name) for v in config.variants}
            for sign in config.feature_signs:
                masks = {}
                for v in config.variants:
                    partner = [maps[o] for o in config.variants if o != v]
                    ms = [build_mask(maps[v][i], sign, partner[0][i] if partner else None,
                                     config.equal_area).mask for i in rows]
                    masks[v] = np.stack(ms)
                    empties += int((~masks[v].reshape(len(rows), -1).any(1)).sum())
                for b in config.baselines:
                    for v in config.variants:
                        cm = dataset_mean if config.dataset_channel_mean else None
                        replaced = np.stack([apply_baseline(pixels[i], masks[v][i], b, config, cm) for i in rows])
                        with torch.no_grad():
                            y = handle.run(handle.as_tensor(replaced))[0].numpy()
                        y_ti = y[rows, targets]
                        other = t2 if rank == "t1" else t1
                        rel = relative_probability(y_ti, y[rows, other])
                        key = f"{method}/{v}/{b}/{sign}/{rank}"
                        sums[key] = sums.get(key, 0.0) + float(rel.sum())
                        counts[key] = counts.get(key, 0) + len(rows)
    clean_rel = relative_probability(clean[rows, t1], clean[rows, t2])
    return sums, counts, float(clean_rel.sum()), float((1 - clean_rel).sum()), empties


def run_ablation(handle: ClassifierHandle, dataset: ImageBatch, config: AblationConfig,
                 jobs: int = 1) -> AblationRecord:
    threshold = Threshold.parse(config.threshold)
    with torch.no_grad():
        logits = np.concatenate([handle.run(handle.as_tensor(dataset.pixels[i:i + 256]))[0].numpy()
                                 for i in range(0, len(dataset), 256)]) if len(dataset) else np.zeros((0, handle.num_classes))
    keep = threshold(softmax(logits)) if len(dataset) else np.zeros(0, dtype=bool)
    selected = dataset.pixels[keep]
    meta = {"model_id": handle.model_id, "threshold": str(threshold), "methods": list(config.methods),
            "variants": list(config.variants), "baselines": list(config.baselines),
            "feature_signs": list(config.feature_signs), "equal_area": config.equal_area,
            "layer_name": config.layer_name, "blur_kernel_sigma": list(config.blur_params(handle.input_shape[-1])),
            "dataset_size": len(dataset), "selected_ids": [i for i, k in zip(dataset.ids, keep) if k]}
    n = int(keep.sum())
    if n == 0:
        logger.warning("no samples satisfy %s", threshold)
        return AblationRecord({}, {}, 0, "empty", meta)
    dataset_mean = dataset.pixels.mean(axis=(0, 2, 3))
    chunks = [selected[i:i + CHUNK] for i in range(0, n, CHUNK)]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda c: _run_chunk(handle, c, config, dataset_mean), chunks))
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    c1 = c2 = 0.0
    empties = 0
    for s, c, a, b, e in results:
        for k in s:
            sums[k] = sums.get(k, 0.0) + s[k]
            counts[k] = counts.get(k, 0) + c[k]
        c1, c2, empties = c1 + a, c2 + b, empties + e
    cells = {k: {"mean": sums[k] / counts[k], "count": counts[k]} for k in sorted(sums)}
    meta["empty_masks"] = empties
    return AblationRecord(cells, {"t1": c1 / n, "t2": c2 / n}, n, "ok", meta)
