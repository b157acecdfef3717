"""Run configuration: strict nested YAML plus ``--set a.b=c`` overrides.

Unknown keys are rejected at every level. The config hash is taken over the
canonical JSON dump (sorted keys), so it does not depend on key order in the
file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .ablate import AblationConfig
from .contrast import Combinator
from .explainers import ExplainRequest, Method, ReluMode
from .models import SeedMode
from .perturb import SELECTORS, PerturbConfig

ARTIFACTS_ENV = "CLASSCONTRAST_ARTIFACTS"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    model_id: str = "toy_cnn"
    registry: Optional[str] = None  # None: <artifact root>/models


class DataSection(_Strict):
    manifest: Optional[str] = None  # None: <artifact root>/data/test.tsv
    limit: Optional[int] = Field(None, ge=0)
    shuffle: bool = False
    seed: int = 0
    batch_size: int = Field(256, ge=1)


class ExplainSection(_Strict):
    method: Method = Method.GRADCAM
    seed_mode: SeedMode = SeedMode.LOGIT
    relu_mode: ReluMode = ReluMode.NONE
    layer_name: Optional[str] = None  # None: last conv block (CNN) or block 1 (ViT)
    block_index: Optional[int] = None
    target: Union[int, Literal["true_label", "predicted_label"]] = "predicted_label"
    combinators: tuple[Combinator, ...] = tuple(Combinator)
    mean_scaled: bool = True


class PerturbSection(_Strict):
    epsilon: float = Field(3e-3, gt=0)
    n_total: int = Field(20, ge=0)
    selectors: tuple[Combinator, ...] = tuple(Combinator(s) for s in SELECTORS)
    target_rule: Literal["true_label", "predicted_label"] = "true_label"
    frozen_explanation: bool = False
    mean_scaled: bool = True

    def build(self) -> PerturbConfig:
        return PerturbConfig(self.epsilon, self.n_total, tuple(s.value for s in self.selectors),
                             self.target_rule, self.frozen_explanation, self.mean_scaled)


class AblateSection(_Strict):
    methods: tuple[Method, ...] = (Method.GRADCAM, Method.LINEAR_APPROX, Method.XGRADCAM)
    layer_name: str = "block4"
    variants: tuple[Literal["original", "weighted"], ...] = ("original", "weighted")
    baselines: tuple[Literal["gaussian_blur", "zeros", "channel_mean"], ...] = (
        "gaussian_blur", "zeros", "channel_mean")
    feature_signs: tuple[Literal["positive", "negative"], ...] = ("positive", "negative")
    threshold: str = "p2 > 0.1"
    equal_area: bool = True
    blur_sigma: Optional[float] = Field(None, gt=0)
    blur_kernel: Optional[int] = Field(None, ge=1)
    dataset_channel_mean: bool = False

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self, threshold: str | None = None) -> AblationConfig:
        return AblationConfig(tuple(m.value for m in self.methods), self.layer_name, self.variants,
                              self.baselines, self.feature_signs, threshold or self.threshold,
                              self.equal_area, self.blur_sigma, self.blur_kernel, self.dataset_channel_mean)


class VisualizeSection(_Strict):
    threshold: str = "p2 > 0.1"
    k: int = Field(4, ge=1)
    layout: Literal["pairs", "classes"] = "pairs"  # t1/t2 x original/weighted, or top-3 x combinators
    center: Literal["zero", "median"] = "zero"
    overlay_alpha: float = Field(0.5, ge=0, le=1)


class RegressSection(_Strict):
    num_images: int = Field(200, ge=1)
    classes_per_image: int = Field(10, ge=1)
    norm: Literal["l2", "l1"] = "l2"


class MethodSpec(_Strict):
    method: Method
    layer_name: Optional[str] = None
    block_index: Optional[int] = None


class VerifySection(_Strict):
    methods: Optional[tuple[MethodSpec, ...]] = None  # None: every seed-linear method for the model kind
    num_images: int = Field(50, ge=1)
    tolerance: float = Field(1e-5, gt=0)
    target: Union[int, Literal["true_label", "predicted_label"]] = "predicted_label"


class ReproduceSection(_Strict):
    models: tuple[str, ...] = ("toy_cnn", "toy_vit")


class RunConfig(_Strict):
    seed: int = 0
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    explain: ExplainSection = ExplainSection()
    perturb: PerturbSection = PerturbSection()
    ablate: AblateSection = AblateSection()
    visualize: VisualizeSection = VisualizeSection()
    regress: RegressSection = RegressSection()
    verify: VerifySection = VerifySection()
    reproduce: ReproduceSection = ReproduceSection()

    def dump(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return digest(self.dump())

    def explain_request(self, kind: str) -> ExplainRequest:
        e = self.explain
        layer, block = resolve_layer(e.method, kind, e.layer_name, e.block_index)
        return ExplainRequest(e.method, e.seed_mode, e.relu_mode, 0, layer, block)


def resolve_layer(method, kind: str, layer_name=None, block_index=None):
    """Default layer per model kind; methods without a layer get none."""
    method = Method(method)
    if method in (Method.GRADIENT, Method.FULLGRAD, Method.ATTN_ROLLOUT):
        return None, None
    if method is Method.VIT_GRADCAM:
        # the last block's patch tokens never reach a class-token head, so default to an earlier one
        return layer_name, (1 if layer_name is None and block_index is None else block_index)
    return layer_name or "block4", None


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACTS_ENV, "artifacts"))


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form a.b=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"override {text!r} has an empty key segment")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return path, value


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=(), base: dict | None = None) -> RunConfig:
    """Merge ``base``, the YAML file and the overrides, then validate strictly."""
    raw: dict = copy.deepcopy(base or {})
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge(raw, loaded)
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a section")
        node[keys[-1]] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)
