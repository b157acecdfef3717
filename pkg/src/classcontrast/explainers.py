"""Back-propagation explanation methods, each runnable from the logit or the
softmax seed.

All maps are returned raw and signed. Layer methods return maps at the
layer's native resolution; upsampling is left to :mod:`classcontrast.viz`.
Every function accepts a single image (C, H, W) or a batch (N, C, H, W) and
returns values shaped (H', W') or (N, H', W') accordingly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .models import ClassifierHandle, SeedMode, _backward


class Method(str, enum.Enum):
    GRADIENT = "gradient"
    GRADCAM = "gradcam"
    LINEAR_APPROX = "linear_approx"
    XGRADCAM = "xgradcam"
    FULLGRAD = "fullgrad"
    VIT_GRADCAM = "vit_gradcam"
    ATTN_ROLLOUT = "attn_rollout"


class ReluMode(str, enum.Enum):
    NONE = "none"
    FINAL_RELU = "final_relu"


LAYER_METHODS = {Method.GRADCAM, Method.LINEAR_APPROX, Method.XGRADCAM, Method.VIT_GRADCAM}
RELU_METHODS = {Method.GRADCAM, Method.VIT_GRADCAM, Method.ATTN_ROLLOUT}


@dataclass
class ExplanationMap:
    values: np.ndarray
    method: Method
    seed_mode: SeedMode
    target_class: int | list[int]
    relu_mode: ReluMode = ReluMode.NONE
    layer_name: str | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def native_resolution(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3

    def __getitem__(self, i: int) -> ExplanationMap:
        if not self.batched:
            raise TypeError("map is not batched")
        t = self.target_class[i] if isinstance(self.target_class, list) else self.target_class
        return ExplanationMap(self.values[i], self.method, self.seed_mode, t, self.relu_mode,
                              self.layer_name, dict(self.provenance))

    def sidecar(self) -> dict:
        return {
            "method": Method(self.method).value,
            "seed_mode": SeedMode(self.seed_mode).value,
            "relu_mode": ReluMode(self.relu_mode).value,
            "target_class": self.target_class,
            "layer_name": self.layer_name,
            "native_resolution": list(self.native_resolution),
            "shape": list(self.values.shape),
            "provenance": self.provenance,
        }


def save_map(m: ExplanationMap, path) -> tuple[Path, Path]:
    """Write ``<path>.npy`` (float64 values) and ``<path>.json`` (sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npy, meta = path.with_suffix(".npy"), path.with_suffix(".json")
    np.save(npy, np.asarray(m.values, dtype=np.float64))
    meta.write_text(json.dumps(m.sidecar(), indent=2, sort_keys=True) + "\n")
    return npy, meta


def load_map(path) -> ExplanationMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.load(path.with_suffix(".npy"))
    if list(values.shape) != meta["shape"]:
        raise ValueError(f"{path}: values shape {values.shape} disagrees with sidecar {meta['shape']}")
    return ExplanationMap(values, Method(meta["method"]), SeedMode(meta["seed_mode"]),
                          meta["target_class"], ReluMode(meta["relu_mode"]), meta["layer_name"],
                          meta.get("provenance", {}))


@dataclass(frozen=True)
class ExplainRequest:
    method: Method
    seed_mode: SeedMode = SeedMode.LOGIT
    relu_mode: ReluMode = ReluMode.NONE
    target_class: int = 0
    layer_name: str | None = None
    block_index: int | None = None

    def __post_init__(self):
        for name, kind in (("method", Method), ("seed_mode", SeedMode), ("relu_mode", ReluMode)):
            object.__setattr__(self, name, kind(getattr(self, name)))
        m = self.method
        if m in (Method.GRADCAM, Method.LINEAR_APPROX, Method.XGRADCAM) and not self.layer_name:
            raise ValueError(f"{m.value} requires layer_name")
        if m is Method.VIT_GRADCAM and self.layer_name is None and self.block_index is None:
            raise ValueError("vit_gradcam requires a block (layer_name or block_index)")
        if m in (Method.GRADIENT, Method.ATTN_ROLLOUT, Method.FULLGRAD) and self.layer_name:
            raise ValueError(f"{m.value} does not take a layer_name")
        if self.relu_mode is ReluMode.FINAL_RELU and m not in RELU_METHODS:
            raise ValueError(f"{m.value} has no ReLU option")


def _squeeze(values: torch.Tensor, single: bool) -> np.ndarray:
    v = values.detach().numpy()
    return v[0] if single else v


def _targets_meta(target, n):
    t = np.broadcast_to(np.asarray(target), (n,))
    return int(t[0]) if np.ndim(target) == 0 else [int(v) for v in t]


def _layer_pass(handle, image, layer, target, seed_mode, coefficients=None):
    handle.check_layer(layer)
    single = np.ndim(image) == 3
    _, _, acts, grads = _backward(handle, image, target, seed_mode, [layer], coefficients)
    return acts[layer], grads[1], single


def _spatial(acts, layer):
    if acts.ndim != 4:
        raise ValueError(f"layer {layer!r} is not a spatial feature map (shape {tuple(acts.shape)})")


def explain_gradient(handle: ClassifierHandle, image, target, seed_mode=SeedMode.LOGIT,
                     coefficients=None) -> ExplanationMap:
    """Input gradient of the seed, channel-summed to a pixel map.

    The per-channel gradient is available from
    :func:`classcontrast.models.grad_wrt_input`.
    """
    single = np.ndim(image) == 3
    _, _, _, grads = _backward(handle, image, target, seed_mode, coefficients=coefficients)
    values = grads[0].sum(dim=1)
    return ExplanationMap(_squeeze(values, single), Method.GRADIENT, SeedMode(seed_mode),
                          _targets_meta(target, values.shape[0]))


def explain_gradcam(handle, image, target, layer, seed_mode=SeedMode.LOGIT,
                    relu_mode=ReluMode.NONE, coefficients=None) -> ExplanationMap:
    acts, grads, single = _layer_pass(handle, image, layer, target, seed_mode, coefficients)
    _spatial(acts, layer)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = (weights * acts).sum(dim=1)
    if ReluMode(relu_mode) is ReluMode.FINAL_RELU:
        cam = F.relu(cam)
    return ExplanationMap(_squeeze(cam, single), Method.GRADCAM, SeedMode(seed_mode),
                          _targets_meta(target, cam.shape[0]), ReluMode(relu_mode), layer)


def explain_linear_approx(handle, image, target, layer, seed_mode=SeedMode.LOGIT,
                          coefficients=None) -> ExplanationMap:
    acts, grads, single = _layer_pass(handle, image, layer, target, seed_mode, coefficients)
    _spatial(acts, layer)
    values = (acts * grads).sum(dim=1)
    return ExplanationMap(_squeeze(values, single), Method.LINEAR_APPROX, SeedMode(seed_mode),
                          _targets_meta(target, values.shape[0]), layer_name=layer)


def xgradcam_weights(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Per-channel weights sum_ij a_ij / ||a||_1 * g_ij; zero for empty channels."""
    l1 = acts.abs().sum(dim=(2, 3), keepdim=True)
    num = (acts * grads).sum(dim=(2, 3), keepdim=True)
    return torch.where(l1 > 0, num / torch.where(l1 > 0, l1, torch.ones_like(l1)), torch.zeros_like(num))


def explain_xgradcam(handle, image, target, layer, seed_mode=SeedMode.LOGIT,
                     coefficients=None) -> ExplanationMap:
    """XGradCAM without the final ReLU, normalizing by the channel's l1 mass."""
    acts, grads, single = _layer_pass(handle, image, layer, target, seed_mode, coefficients)
    _spatial(acts, layer)
    values = (xgradcam_weights(acts, grads) * acts).sum(dim=1)
    return ExplanationMap(_squeeze(values, single), Method.XGRADCAM, SeedMode(seed_mode),
                          _targets_meta(target, values.shape[0]), layer_name=layer)


def explain_fullgrad(handle, image, target, seed_mode=SeedMode.LOGIT,
                     coefficients=None) -> ExplanationMap:
    """FullGrad with a linear post-processing map.

    Input term ``grad_x(seed) * x`` plus, for every spatial affine layer,
    ``bias * grad_out(seed)``; each term is bilinearly resized to the input
    and channel-summed. No abs and no per-term rescaling.
    """
    biases = handle.bias_layers()
    if not biases:
        raise TypeError(f"{handle.model_id} has no recorded bias layers")
    single = np.ndim(image) == 3
    names = list(biases)
    x, _, _, grads = _backward(handle, image, target, seed_mode, names, coefficients)
    size = x.shape[-2:]
    total = (grads[0] * x).sum(dim=1)
    for name, g in zip(names, grads[1:]):
        b = biases[name].detach().to(g.dtype).view(1, -1, 1, 1)
        term = (b * g).sum(dim=1, keepdim=True)
        if term.shape[-2:] != size:
            term = F.interpolate(term, size=size, mode="bilinear", align_corners=False)
        total = total + term[:, 0]
    return ExplanationMap(_squeeze(total, single), Method.FULLGRAD, SeedMode(seed_mode),
                          _targets_meta(target, total.shape[0]),
                          provenance={"bias_layers": names})


def _block_name(handle, block_index=None, layer=None) -> str:
    if handle.kind != "patch_transformer":
        raise TypeError(f"{handle.model_id} is a {handle.kind}, not a patch transformer")
    blocks = handle.block_names
    if layer is not None:
        if layer not in blocks:
            raise KeyError(f"unknown block {layer!r}; valid blocks: {', '.join(blocks)}")
        return layer
    if not 0 <= block_index < len(blocks):
        raise IndexError(f"block_index {block_index} out of range [0, {len(blocks)})")
    return blocks[block_index]


def explain_vit_gradcam(handle, image, target, block_index=None, seed_mode=SeedMode.LOGIT,
                        relu_mode=ReluMode.NONE, layer=None, coefficients=None) -> ExplanationMap:
    """GradCAM on a transformer block's patch tokens, treated as a spatial grid.

    Channel weights are token-averaged gradients; the map is the *mean* over
    embedding channels of weight * activation.
    """
    layer = _block_name(handle, block_index, layer)
    acts, grads, single = _layer_pass(handle, image, layer, target, seed_mode, coefficients)
    rows, cols = handle.token_grid
    n, t, d = acts.shape
    acts, grads = acts[:, t - rows * cols:], grads[:, t - rows * cols:]
    weights = grads.mean(dim=1, keepdim=True)
    cam = (weights * acts).mean(dim=2).reshape(n, rows, cols)
    if ReluMode(relu_mode) is ReluMode.FINAL_RELU:
        cam = F.relu(cam)
    return ExplanationMap(_squeeze(cam, single), Method.VIT_GRADCAM, SeedMode(seed_mode),
                          _targets_meta(target, n), ReluMode(relu_mode), layer)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Divide each row by its sum of absolute values; all-zero rows stay zero."""
    norm = np.abs(m).sum(axis=-1, keepdims=True)
    return np.divide(m, norm, out=np.zeros_like(m), where=norm > 0)


def rollout(weighted: list[np.ndarray], residual: str = "identity", relu: str = "per_layer") -> np.ndarray:
    """Multiply per-block (…, T, T) matrices from first to last block.

    Returns ``R = G_L @ … @ G_1`` after optional per-layer ReLU, identity
    addition and row renormalization.
    """
    if residual not in ("identity", "none"):
        raise ValueError(f"rollout residual must be 'identity' or 'none', got {residual!r}")
    if relu not in ("per_layer", "none"):
        raise ValueError(f"rollout relu must be 'per_layer' or 'none', got {relu!r}")
    result = None
    for g in weighted:
        if relu == "per_layer":
            g = np.maximum(g, 0.0)
        if residual == "identity":
            g = g + np.eye(g.shape[-1])
        g = normalize_rows(g)
        result = g if result is None else g @ result
    return result


def explain_attention_rollout(handle, image, target, seed_mode=SeedMode.LOGIT,
                              relu_mode=ReluMode.NONE, residual: str = "identity",
                              coefficients=None) -> ExplanationMap:
    """Gradient-weighted attention rollout read out on the class-token row.

    ``relu_mode=final_relu`` clamps each block's head-averaged weighted
    attention at zero before the product.
    """
    from .models import capture_attentions

    stack = capture_attentions(handle, image, target, seed_mode, coefficients)
    weighted = [(a * g).mean(axis=-3) for a, g in zip(stack.attentions, stack.gradients)]
    relu = "per_layer" if ReluMode(relu_mode) is ReluMode.FINAL_RELU else "none"
    r = rollout(weighted, residual, relu)
    rows, cols = stack.token_grid
    values = r[..., 0, 1:].reshape(r.shape[:-2] + (rows, cols))
    n = 1 if values.ndim == 2 else values.shape[0]
    return ExplanationMap(values, Method.ATTN_ROLLOUT, SeedMode(seed_mode), _targets_meta(target, n),
                          ReluMode(relu_mode), provenance={"rollout_residual": residual,
                                                           "rollout_relu": relu})


def explain(handle: ClassifierHandle, image, request: ExplainRequest, target=None,
            coefficients=None) -> ExplanationMap:
    """Dispatch an :class:`ExplainRequest`; ``target`` overrides its class."""
    t = request.target_class if target is None else target
    m, seed, relu, layer = request.method, request.seed_mode, request.relu_mode, request.layer_name
    kw = {"coefficients": coefficients}
    if m is Method.GRADIENT:
        return explain_gradient(handle, image, t, seed, **kw)
    if m is Method.GRADCAM:
        return explain_gradcam(handle, image, t, layer, seed, relu, **kw)
    if m is Method.LINEAR_APPROX:
        return explain_linear_approx(handle, image, t, layer, seed, **kw)
    if m is Method.XGRADCAM:
        return explain_xgradcam(handle, image, t, layer, seed, **kw)
    if m is Method.FULLGRAD:
        return explain_fullgrad(handle, image, t, seed, **kw)
    if m is Method.VIT_GRADCAM:
        return explain_vit_gradcam(handle, image, t, request.block_index, seed, relu, layer, **kw)
    return explain_attention_rollout(handle, image, t, seed, relu, **kw)
