"""Class-contrastive combinators over per-class explanations.

Each combinator is a fixed linear combination of per-class maps,
``sum_s c_s phi^s``, so the same coefficient rows drive both map-level
combination and the one-pass back-propagation used by the perturbation
benchmark.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .explainers import ExplainRequest, ExplanationMap, Method, ReluMode, explain
from .models import ClassifierHandle, SeedMode, forward, softmax

logger = logging.getLogger(__name__)


class Combinator(str, enum.Enum):
    ORIGINAL = "original"
    MEAN = "mean"
    MAX = "max"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class ContrastSpec:
    combinator: Combinator
    target_class: int
    mean_scaled: bool = True  # mean subtracts (1/(C-1)) * sum of the others

    def __post_init__(self):
        object.__setattr__(self, "combinator", Combinator(self.combinator))


def alpha_weights(logits, t: int) -> np.ndarray:
    """Softmax over the non-target logits, returned as a length-C vector with 0 at ``t``."""
    y = np.asarray(logits, dtype=np.float64)
    c = y.shape[-1]
    if c < 2:
        raise ValueError("contrast needs at least two classes")
    if not 0 <= t < c:
        raise ValueError(f"target {t} out of range [0, {c})")
    others = np.delete(y, t)
    e = np.exp(others - others.max())
    return np.insert(e / e.sum(), t, 0.0)


def contrast_coefficients(logits, targets, combinator, mean_scaled: bool = True):
    """Coefficient rows (N, C) for ``phi = sum_s c_s phi^s``.

    Returns ``(coefficients, ties)`` where ``ties`` lists the rows in which the
    max combinator had to break a runner-up tie (lowest class index wins).
    """
    y = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, c = y.shape
    t = np.broadcast_to(np.asarray(targets), (n,))
    comb = Combinator(combinator)
    coeff = np.zeros((n, c))
    ties = []
    for i in range(n):
        ti = int(t[i])
        coeff[i, ti] = 1.0
        if comb is Combinator.ORIGINAL:
            continue
        if c < 2:
            raise ValueError("contrast needs at least two classes")
        if comb is Combinator.MEAN:
            scale = 1.0 / (c - 1) if mean_scaled else 1.0
            coeff[i, np.arange(c) != ti] = -scale
        elif comb is Combinator.MAX:
            masked = np.where(np.arange(c) == ti, -np.inf, y[i])
            s_star = int(np.argmax(masked))
            if np.count_nonzero(masked == masked[s_star]) > 1:
                ties.append(i)
            coeff[i, s_star] = -1.0
        else:
            coeff[i] -= alpha_weights(y[i], ti)
    if ties:
        logger.info("max contrast: runner-up ties broken by lowest index in rows %s", ties)
    return coeff, ties


@dataclass
class ClassExplanationSet:
    """Logit-seed maps for every class of one image."""

    maps: np.ndarray  # (C, H', W')
    logits: np.ndarray  # (C,)
    method: Method
    layer_name: str | None = None
    relu_mode: ReluMode = ReluMode.NONE
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.maps.shape[0] != self.logits.shape[0]:
            raise ValueError(
                f"incomplete explanation set: {self.maps.shape[0]} maps for {self.logits.shape[0]} classes"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")


def class_explanations(handle: ClassifierHandle, image, method, layer_name=None,
                       relu_mode=ReluMode.NONE, block_index=None) -> ClassExplanationSet:
    """One logit-seed back-propagation per class."""
    logits = forward(handle, np.asarray(image)[None])[0]
    maps = []
    for s in range(handle.num_classes):
        req = ExplainRequest(method, SeedMode.LOGIT, relu_mode, s, layer_name, block_index)
        maps.append(explain(handle, image, req).values)
    return ClassExplanationSet(np.stack(maps), logits, Method(method), layer_name, ReluMode(relu_mode))


def combine(cset: ClassExplanationSet, spec: ContrastSpec) -> ExplanationMap:
    c = cset.maps.shape[0]
    if not 0 <= spec.target_class < c:
        raise ValueError(f"target {spec.target_class} out of range [0, {c})")
    coeff, ties = contrast_coefficients(cset.logits, spec.target_class, spec.combinator, spec.mean_scaled)
    values = np.tensordot(coeff[0], cset.maps, axes=1)
    prov = {"combinator": spec.combinator.value, "coefficients": coeff[0].tolist()}
    if ties:
        prov["max_tie_broken"] = True
    return ExplanationMap(values, cset.method, SeedMode.LOGIT, spec.target_class, cset.relu_mode,
                          cset.layer_name, prov)


SEED_LINEAR = {Method.GRADIENT, Method.GRADCAM, Method.LINEAR_APPROX, Method.XGRADCAM,
               Method.VIT_GRADCAM, Method.FULLGRAD}


@dataclass
class EquivalenceReport:
    method: str
    target_class: int
    p_t: float
    expected_scale: float  # p_t (1 - p_t)
    scale_factor: float  # least-squares fit of softmax map onto weighted map
    scale_rel_error: float
    max_rel_error: float  # ||softmax map - p_t(1-p_t) weighted||_inf / ||softmax map||_inf
    degenerate: bool = False  # both maps identically zero, so the scale is unidentifiable

    def passed(self, tol: float = 1e-5, scale_tol: float = 1e-4) -> bool:
        if self.degenerate:
            return self.max_rel_error == 0.0
        return self.max_rel_error <= tol and self.scale_rel_error <= scale_tol


def verify_softmax_equivalence(handle: ClassifierHandle, image, t: int, method,
                               layer_name=None, relu_mode=ReluMode.NONE,
                               block_index=None) -> EquivalenceReport:
    """Compare one softmax-seed pass against C logit-seed passes combined by weighted contrast."""
    method = Method(method)
    if method not in SEED_LINEAR:
        raise ValueError(f"{method.value} is not linear in the seed; the softmax equivalence does not apply")
    if ReluMode(relu_mode) is not ReluMode.NONE:
        raise ValueError("a final ReLU breaks linearity in the seed; use relu_mode='none'")
    cset = class_explanations(handle, image, method, layer_name, relu_mode, block_index)
    weighted = combine(cset, ContrastSpec(Combinator.WEIGHTED, t)).values
    req = ExplainRequest(method, SeedMode.SOFTMAX, relu_mode, t, layer_name, block_index)
    soft = explain(handle, image, req).values
    p_t = float(softmax(cset.logits)[t])
    expected = p_t * (1.0 - p_t)
    denom = float(np.sum(weighted * weighted))
    scale = float(np.sum(soft * weighted) / denom) if denom > 0 else 0.0
    ref = np.abs(soft).max()
    err = np.abs(soft - expected * weighted).max()
    max_rel = float(err / ref) if ref > 0 else float(err)
    if denom == 0 and ref == 0:
        # e.g. the last transformer block under a class-token readout
        logger.info("%s: both maps are zero for target %d", method.value, t)
        return EquivalenceReport(method.value, int(t), p_t, expected, float("nan"), 0.0, 0.0, True)
    scale_rel = abs(scale - expected) / expected if expected > 0 else abs(scale)
    return EquivalenceReport(method.value, int(t), p_t, expected, scale, float(scale_rel), max_rel)
