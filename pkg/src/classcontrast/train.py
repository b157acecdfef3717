"""Minimal toy-model fitting and the bootstrap that builds the desk-scale zoo."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch, synthesize, write_dataset
from .models import ClassifierHandle, build_handle, forward, save_handle

logger = logging.getLogger(__name__)


def fit(handle: ClassifierHandle, train: ImageBatch, epochs: int = 8, batch_size: int = 64,
        lr: float = 1e-3, weight_decay: float = 5e-4, seed: int = 0) -> ClassifierHandle:
    """Train in float32 with Adam, then return the handle in its own dtype."""
    dtype = handle.dtype
    model = handle.model.float()
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=epochs * int(np.ceil(len(train) / batch_size)))
    gen = torch.Generator().manual_seed(seed)
    x_all = torch.as_tensor(train.pixels, dtype=torch.float32)
    y_all = torch.as_tensor(train.labels)
    mean = torch.tensor(handle.mean).view(1, -1, 1, 1)
    std = torch.tensor(handle.std).view(1, -1, 1, 1)
    for epoch in range(epochs):
        perm = torch.randperm(len(train), generator=gen)
        total = 0.0
        for i in range(0, len(train), batch_size):
            idx = perm[i:i + batch_size]
            x = x_all[idx]
            # horizontal flips keep shape classes intact
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
            logits, _ = model((x - mean) / std)
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        logger.info("%s epoch %d loss %.4f", handle.model_id, epoch, total / len(train))
    model.eval()
    model.to(dtype)
    return handle


def accuracy(handle: ClassifierHandle, batch: ImageBatch) -> float:
    return float((forward(handle, batch).argmax(1) == batch.labels).mean())


@dataclass
class BootstrapConfig:
    n_train: int = 6000
    n_test: int = 2000
    image_size: int = 32
    cnn_epochs: int = 8
    vit_epochs: int = 12
    seed: int = 0


def bootstrap(root, config: BootstrapConfig | None = None, write_images: bool = True) -> dict:
    """Generate the synthetic dataset and train ``toy_cnn`` and ``toy_vit``.

    Layout under ``root``: ``data/{train,test}.tsv`` + PNGs, ``models/<id>.{pt,json}``.
    """
    config = config or BootstrapConfig()
    torch.set_num_threads(max(1, torch.get_num_threads()))
    root = Path(root)
    train = synthesize(config.n_train, seed=config.seed, size=config.image_size, prefix="train")
    test = synthesize(config.n_test, seed=config.seed + 1, size=config.image_size, prefix="test")
    if write_images:
        write_dataset(train, root / "data", "train")
        write_dataset(test, root / "data", "test")
    summary = {}
    for arch, epochs, lr in (("toy_cnn", config.cnn_epochs, 3e-3), ("toy_vit", config.vit_epochs, 2e-3)):
        handle = build_handle(arch, image_size=config.image_size, seed=config.seed)
        fit(handle, train, epochs=epochs, lr=lr, seed=config.seed)
        save_handle(handle, root / "models")
        summary[arch] = {"test_accuracy": accuracy(handle, test)}
        logger.info("%s test accuracy %.3f", arch, summary[arch]["test_accuracy"])
    return summary
