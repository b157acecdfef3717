import os
from pathlib import Path

import numpy as np
import pytest
import torch

from classcontrast.data import load_dataset, synthesize
from classcontrast.models import build_handle, load_handle
from classcontrast.train import bootstrap

torch.set_num_threads(max(1, os.cpu_count() or 1))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains or sweeps the desk-scale zoo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def images():
    return synthesize(8, seed=42)


@pytest.fixture(scope="session")
def cnn():
    """Untrained fixed-seed toy CNN; BN statistics randomized so BN is not the identity."""
    h = build_handle("toy_cnn", "cnn_seed0", seed=0)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for bn in h.model.bns:
            bn.running_mean.copy_(torch.randn(bn.num_features, generator=g, dtype=torch.float64) * 0.1)
            bn.running_var.copy_(torch.rand(bn.num_features, generator=g, dtype=torch.float64) + 0.5)
            bn.bias.copy_(torch.randn(bn.num_features, generator=g, dtype=torch.float64) * 0.1)
    return h


@pytest.fixture(scope="session")
def vit():
    return build_handle("toy_vit", "vit_seed0", seed=0, depth=3)


def linear_handle(num_classes=2, weights=None, image_size=2, channels=1, bias=False, seed=0):
    h = build_handle("toy_linear", num_classes=num_classes, image_size=image_size,
                     in_channels=channels, seed=seed, mean=(0.0,) * channels, std=(1.0,) * channels,
                     bias=bias)
    if weights is not None:
        with torch.no_grad():
            h.model.head.weight.copy_(torch.as_tensor(weights, dtype=torch.float64))
    return h


@pytest.fixture(scope="session")
def zoo(request):
    """Trained toy CNN + ViT and the synthetic dataset, cached across sessions."""
    root = Path(os.environ.get("CLASSCONTRAST_TEST_ZOO") or request.config.cache.mkdir("classcontrast-zoo"))
    if not (root / "models" / "toy_vit.json").exists():
        bootstrap(root)
    return root


@pytest.fixture(scope="session")
def trained_cnn(zoo):
    return load_handle(zoo / "models", "toy_cnn")


@pytest.fixture(scope="session")
def trained_vit(zoo):
    return load_handle(zoo / "models", "toy_vit")


@pytest.fixture(scope="session")
def test_set(zoo):
    return load_dataset(zoo / "data" / "test.tsv", batch_size=256).load_all()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    results = getattr(test_acceptance, "RESULTS", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        r = results[n]
        ok = all(p[1] for p in r["parts"])
        failed = [f"{p[0]}: {p[2]}" for p in r["parts"] if not p[1]]
        detail = "; ".join(failed) if failed else "; ".join(p[2] for p in r["parts"] if p[2])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {r['title']}  [{detail}]")
