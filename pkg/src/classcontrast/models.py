"""Classifier handles and the desk-scale model zoo.

Every model's ``forward`` returns ``(logits, tensors)`` where ``tensors`` maps
hook-able names to the intermediate tensors of *this* call. Optional ``taps``
(name -> callable) replace a named tensor in flight, which is how activation
and attention finite differences are run. No state is kept on the module
between calls.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Taps = Mapping[str, Callable[[torch.Tensor], torch.Tensor]]


class SeedMode(str, enum.Enum):
    """Scalar that back-propagation starts from."""

    LOGIT = "logit"
    SOFTMAX = "softmax"


def _tap(taps: Taps | None, tensors: dict, name: str, t: torch.Tensor) -> torch.Tensor:
    if taps and name in taps:
        t = taps[name](t)
    tensors[name] = t
    return t


class ToyCNN(nn.Module):
    """VGG-style stand-in: conv-bn-relu blocks with max-pools, then a
    flatten + fully-connected classifier."""

    def __init__(self, num_classes: int = 10, widths: Sequence[int] = (16, 32, 64, 64),
                 in_channels: int = 3, pool_after: Sequence[int] = (0, 1, 3),
                 image_size: int = 32, hidden: int = 128):
        super().__init__()
        self.widths = tuple(widths)
        self.pool_after = tuple(pool_after)
        convs, bns = [], []
        c = in_channels
        for w in widths:
            convs.append(nn.Conv2d(c, w, 3, padding=1, bias=True))
            bns.append(nn.BatchNorm2d(w))
            c = w
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        side = image_size // 2 ** len(self.pool_after)
        self.fc = nn.Linear(c * side * side, hidden)
        self.head = nn.Linear(hidden, num_classes)

    def block_names(self) -> list[str]:
        return [f"block{i + 1}" for i in range(len(self.convs))]

    def layer_names(self) -> list[str]:
        names = []
        for b in self.block_names():
            names += [f"{b}.conv", f"{b}.bn", b]
        return names + ["fc", "logits"]

    def bias_layers(self) -> dict[str, torch.Tensor]:
        """Effective per-channel bias of every spatial affine layer."""
        out = {}
        for b, conv, bn in zip(self.block_names(), self.convs, self.bns):
            out[f"{b}.conv"] = conv.bias
            scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
            out[f"{b}.bn"] = bn.bias - bn.running_mean * scale
        return out

    def forward(self, x, taps: Taps | None = None):
        tensors: dict[str, torch.Tensor] = {}
        for i, (name, conv, bn) in enumerate(zip(self.block_names(), self.convs, self.bns)):
            x = _tap(taps, tensors, f"{name}.conv", conv(x))
            x = _tap(taps, tensors, f"{name}.bn", bn(x))
            x = _tap(taps, tensors, name, F.relu(x))
            if i in self.pool_after:
                x = F.max_pool2d(x, 2)
        x = _tap(taps, tensors, "fc", F.relu(self.fc(x.flatten(1))))
        logits = _tap(taps, tensors, "logits", self.head(x))
        return logits, tensors


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, name: str, taps, tensors):
        n, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(n, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        attn = _tap(taps, tensors, f"{name}.attn", attn)
        y = (attn @ v).transpose(1, 2).reshape(n, t, d)
        x = x + self.proj(y)
        x = x + self.mlp(self.norm2(x))
        return _tap(taps, tensors, name, x)


class ToyViT(nn.Module):
    """Small patch transformer with a class token and pre-norm blocks."""

    def __init__(self, num_classes: int = 10, image_size: int = 32, patch: int = 4,
                 dim: int = 48, depth: int = 4, heads: int = 4, in_channels: int = 3):
        super().__init__()
        self.grid = (image_size // patch, image_size // patch)
        self.patch_embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.randn(1, 1 + self.grid[0] * self.grid[1], dim) * 0.02)
        self.blocks = nn.ModuleList([_Block(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_classes)

    def block_names(self) -> list[str]:
        return [f"block{i}" for i in range(len(self.blocks))]

    def layer_names(self) -> list[str]:
        names = ["tokens"]
        for b in self.block_names():
            names += [f"{b}.attn", b]
        return names + ["logits"]

    def forward(self, x, taps: Taps | None = None):
        tensors: dict[str, torch.Tensor] = {}
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        x = _tap(taps, tensors, "tokens", x)
        for name, blk in zip(self.block_names(), self.blocks):
            x = blk(x, name, taps, tensors)
        logits = _tap(taps, tensors, "logits", self.head(self.norm(x)[:, 0]))
        return logits, tensors


class ToyLinear(nn.Module):
    """Linear softmax classifier on flattened pixels, for closed-form checks."""

    def __init__(self, num_classes: int = 2, in_features: int = 12, bias: bool = False):
        super().__init__()
        self.head = nn.Linear(in_features, num_classes, bias=bias)

    def block_names(self) -> list[str]:
        return []

    def layer_names(self) -> list[str]:
        return ["logits"]

    def forward(self, x, taps: Taps | None = None):
        tensors: dict[str, torch.Tensor] = {}
        return _tap(taps, tensors, "logits", self.head(x.flatten(1))), tensors


class ToyConv1x1(nn.Module):
    """1x1 convolution, global average pool, linear head."""

    def __init__(self, num_classes: int = 3, channels: int = 4, in_channels: int = 3, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, channels, 1, bias=bias)
        self.head = nn.Linear(channels, num_classes)

    def block_names(self) -> list[str]:
        return ["features"]

    def layer_names(self) -> list[str]:
        return ["features", "logits"]

    def bias_layers(self) -> dict[str, torch.Tensor]:
        return {"features": self.conv.bias} if self.conv.bias is not None else {}

    def forward(self, x, taps: Taps | None = None):
        tensors: dict[str, torch.Tensor] = {}
        f = _tap(taps, tensors, "features", self.conv(x))
        return _tap(taps, tensors, "logits", self.head(f.mean(dim=(2, 3)))), tensors


ARCHITECTURES = {"toy_cnn": ToyCNN, "toy_vit": ToyViT, "toy_linear": ToyLinear,
                 "toy_conv1x1": ToyConv1x1}


@dataclass(frozen=True)
class ClassifierHandle:
    """Uniform, read-only view of a differentiable classifier.

    Inputs are pixels in [0, 1]; ``mean``/``std`` normalization is applied
    inside :meth:`run`.
    """

    model: nn.Module
    model_id: str
    num_classes: int
    input_shape: tuple[int, int, int]
    kind: str  # "cnn" | "patch_transformer"
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)
    dtype: torch.dtype = torch.float64
    arch: str = ""
    arch_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model.eval()
        self.model.to(self.dtype)

    @property
    def layer_names(self) -> list[str]:
        return self.model.layer_names()

    @property
    def block_names(self) -> list[str]:
        return self.model.block_names()

    @property
    def token_grid(self) -> tuple[int, int]:
        if self.kind != "patch_transformer":
            raise TypeError(f"{self.model_id} is a {self.kind}, not a patch transformer")
        return self.model.grid

    def bias_layers(self) -> dict[str, torch.Tensor]:
        if not hasattr(self.model, "bias_layers"):
            raise TypeError(f"{self.model_id} does not record spatial bias layers")
        return self.model.bias_layers()

    def as_tensor(self, pixels) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(pixels) if not torch.is_tensor(pixels) else pixels, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match model input {tuple(self.input_shape)}"
            )
        return x

    def run(self, x: torch.Tensor, taps: Taps | None = None):
        mean = torch.tensor(self.mean, dtype=self.dtype).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=self.dtype).view(1, -1, 1, 1)
        return self.model((x - mean) / std, taps)

    def check_target(self, target, n: int) -> torch.Tensor:
        t = torch.as_tensor(np.broadcast_to(np.asarray(target), (n,)).copy(), dtype=torch.long)
        if (t < 0).any() or (t >= self.num_classes).any():
            raise ValueError(f"target class out of range [0, {self.num_classes}): {target}")
        return t

    def check_layer(self, layer_name: str) -> None:
        if layer_name not in self.layer_names:
            raise KeyError(f"unknown layer {layer_name!r}; valid layers: {', '.join(self.layer_names)}")

    def descriptor(self) -> dict:
        return {
            "model_id": self.model_id,
            "kind": self.kind,
            "arch": self.arch,
            "arch_kwargs": self.arch_kwargs,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layer_names": self.layer_names,
            "mean": list(self.mean),
            "std": list(self.std),
        }


def build_handle(arch: str, model_id: str | None = None, num_classes: int = 10,
                 image_size: int = 32, seed: int | None = 0, dtype=torch.float64,
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), in_channels: int = 3,
                 **arch_kwargs) -> ClassifierHandle:
    if seed is not None:
        torch.manual_seed(seed)
    cls = ARCHITECTURES[arch]
    kind = "cnn"
    if arch in ("toy_vit", "toy_cnn"):
        model = cls(num_classes=num_classes, image_size=image_size, in_channels=in_channels, **arch_kwargs)
        kind = "patch_transformer" if arch == "toy_vit" else "cnn"
    elif arch == "toy_linear":
        model = cls(num_classes=num_classes, in_features=in_channels * image_size**2, **arch_kwargs)
    else:
        model = cls(num_classes=num_classes, in_channels=in_channels, **arch_kwargs)
    return ClassifierHandle(model, model_id or arch, num_classes, (in_channels, image_size, image_size),
                            kind, tuple(mean), tuple(std), dtype, arch, dict(arch_kwargs))


# --- registry ---------------------------------------------------------------


def save_handle(handle: ClassifierHandle, registry) -> Path:
    registry = Path(registry)
    registry.mkdir(parents=True, exist_ok=True)
    torch.save(handle.model.state_dict(), registry / f"{handle.model_id}.pt")
    path = registry / f"{handle.model_id}.json"
    path.write_text(json.dumps(handle.descriptor(), indent=2) + "\n")
    return path


def load_handle(registry, model_id: str, dtype=torch.float64) -> ClassifierHandle:
    registry = Path(registry)
    desc_path = registry / f"{model_id}.json"
    if not desc_path.exists():
        raise FileNotFoundError(
            f"model {model_id!r} not found in {registry}; run `classcontrast bootstrap` first"
        )
    desc = json.loads(desc_path.read_text())
    handle = build_handle(desc["arch"], desc["model_id"], desc["num_classes"],
                          desc["input_shape"][-1], seed=None, dtype=dtype,
                          in_channels=desc["input_shape"][0], **desc.get("arch_kwargs", {}))
    state = torch.load(registry / f"{model_id}.pt", map_location="cpu", weights_only=True)
    handle.model.load_state_dict(state)
    return ClassifierHandle(handle.model, desc["model_id"], desc["num_classes"],
                            tuple(desc["input_shape"]), desc["kind"], tuple(desc["mean"]),
                            tuple(desc["std"]), dtype, desc["arch"], desc.get("arch_kwargs", {}))


# --- gradient access ----------------------------------------------------------


def forward(handle: ClassifierHandle, batch) -> np.ndarray:
    """Logits (N, C) for an ImageBatch or pixel array."""
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    with torch.no_grad():
        logits, _ = handle.run(handle.as_tensor(pixels))
    return logits.numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def seed_scalars(logits: torch.Tensor, target: torch.Tensor, mode: SeedMode | str,
                 coefficients: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample scalar to back-propagate from.

    ``coefficients`` (N, C), when given, replaces the one-hot target and yields
    the logit combination ``sum_s c_s y_s`` (coefficients held constant).
    """
    mode = SeedMode(mode)
    if coefficients is not None:
        if mode is not SeedMode.LOGIT:
            raise ValueError("coefficient seeds combine logits only")
        return (logits * coefficients.to(logits.dtype)).sum(dim=1)
    rows = torch.arange(len(target))
    if mode is SeedMode.LOGIT:
        return logits[rows, target]
    return torch.softmax(logits, dim=1)[rows, target]


def _backward(handle, pixels, target, seed_mode, names=(), coefficients=None, taps=None):
    x = handle.as_tensor(pixels).clone().requires_grad_(True)
    with torch.enable_grad():
        logits, tensors = handle.run(x, taps)
        t = handle.check_target(target, x.shape[0])
        scalar = seed_scalars(logits, t, seed_mode, coefficients).sum()
        inputs = [x] + [tensors[n] for n in names]
        grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    if any(g is None for g in grads):
        missing = [n for n, g in zip(("input",) + tuple(names), grads) if g is None]
        raise RuntimeError(f"seed is not differentiable w.r.t. {missing}")
    return x.detach(), logits.detach(), {n: tensors[n].detach() for n in names}, grads


def grad_wrt_input(handle: ClassifierHandle, batch, target, seed_mode=SeedMode.LOGIT,
                   coefficients=None) -> np.ndarray:
    """Gradient of the seed scalar w.r.t. the [0, 1] pixels, shaped like pixels."""
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    _, _, _, grads = _backward(handle, pixels, target, seed_mode, coefficients=coefficients)
    g = grads[0].numpy()
    return g if np.ndim(pixels) == 4 else g[0]


def grad_wrt_layer(handle: ClassifierHandle, batch, layer_name: str, target,
                   seed_mode=SeedMode.LOGIT, coefficients=None):
    """(activations, gradient of the seed w.r.t. those activations)."""
    handle.check_layer(layer_name)
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    _, _, acts, grads = _backward(handle, pixels, target, seed_mode, [layer_name], coefficients)
    a, g = acts[layer_name].numpy(), grads[1].numpy()
    if np.ndim(pixels) == 3:
        a, g = a[0], g[0]
    return a, g


@dataclass
class AttentionStack:
    attentions: list[np.ndarray]  # per block, (N, heads, T, T) or (heads, T, T)
    gradients: list[np.ndarray]
    token_grid: tuple[int, int]
    has_class_token: bool = True

    def __post_init__(self):
        rows, cols = self.token_grid
        for a in self.attentions:
            if rows * cols + int(self.has_class_token) != a.shape[-1]:
                raise ValueError(f"token grid {self.token_grid} inconsistent with {a.shape[-1]} tokens")


def capture_attentions(handle: ClassifierHandle, batch, target, seed_mode=SeedMode.LOGIT,
                       coefficients=None) -> AttentionStack:
    if handle.kind != "patch_transformer":
        raise TypeError(f"capture_attentions needs a patch transformer, {handle.model_id} is a {handle.kind}")
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    names = [f"{b}.attn" for b in handle.block_names]
    _, _, acts, grads = _backward(handle, pixels, target, seed_mode, names, coefficients)
    squeeze = np.ndim(pixels) == 3
    attentions = [acts[n].numpy()[0] if squeeze else acts[n].numpy() for n in names]
    gradients = [g.numpy()[0] if squeeze else g.numpy() for g in grads[1:]]
    return AttentionStack(attentions, gradients, handle.token_grid, True)
