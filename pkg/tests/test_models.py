import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from classcontrast.data import ImageBatch, load_dataset, synthesize, write_dataset, write_manifest
from classcontrast.models import (
    SeedMode,
    build_handle,
    capture_attentions,
    forward,
    grad_wrt_input,
    grad_wrt_layer,
    load_handle,
    save_handle,
    softmax,
)

from .conftest import linear_handle
from .oracles import assert_rel_close, central_difference, sample_coords, seed_value, softmax_jacobian

DATA = Path(__file__).parent / "data"


# --- forward ---------------------------------------------------------------


def test_identity_linear_model_selects_pixels():
    h = linear_handle(2, weights=np.eye(2, 4))
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 1] = 0.7
    np.testing.assert_array_equal(forward(h, x)[0], [0.0, 0.7])


def test_zero_input_bias_free_model_gives_zero_logits():
    h = linear_handle(3, image_size=2)
    np.testing.assert_array_equal(forward(h, np.zeros((2, 1, 2, 2))), 0.0)


def test_golden_logits():
    golden = json.loads((DATA / "golden_logits.json").read_text())
    h = build_handle(golden["arch"], seed=golden["seed"])
    b = synthesize(2, seed=golden["image_seed"])
    np.testing.assert_allclose(forward(h, b), golden["logits"], rtol=1e-10, atol=1e-12)


def test_shape_mismatch_reports_dimensions(cnn):
    with pytest.raises(ValueError, match=r"\(3, 16, 16\).*\(3, 32, 32\)"):
        forward(cnn, np.zeros((1, 3, 16, 16)))


def test_forward_is_deterministic(cnn, images):
    a, b = forward(cnn, images), forward(cnn, images)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a)) and a.shape == (len(images), 10)
    np.testing.assert_allclose(softmax(a).sum(1), 1.0, atol=1e-6)


def test_gradients_repeatable(cnn, images):
    g1 = grad_wrt_input(cnn, images, 3, SeedMode.SOFTMAX)
    g2 = grad_wrt_input(cnn, images, 3, SeedMode.SOFTMAX)
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-12)


# --- input gradients -------------------------------------------------------------


def test_two_class_softmax_gradient_closed_form(rng):
    w = rng.normal(size=(2, 4))
    h = linear_handle(2, weights=w)
    x = rng.uniform(size=(1, 2, 2))
    p = softmax(forward(h, x[None]))[0]
    g = grad_wrt_input(h, x, 0, SeedMode.SOFTMAX).ravel()
    np.testing.assert_allclose(g, p[0] * (1 - p[0]) * (w[0] - w[1]), rtol=1e-12)


def test_softmax_gradient_is_jacobian_weighted_logit_gradients(cnn, images):
    x = images.pixels[0]
    t = 4
    j = softmax_jacobian(forward(cnn, x[None])[0])
    expected = sum(j[t, s] * grad_wrt_input(cnn, x, s) for s in range(cnn.num_classes))
    np.testing.assert_allclose(grad_wrt_input(cnn, x, t, SeedMode.SOFTMAX), expected, rtol=1e-9, atol=1e-15)


def test_zero_head_row_gives_zero_gradient(rng):
    w = rng.normal(size=(3, 4))
    w[1] = 0
    h = linear_handle(3, weights=w)
    assert not grad_wrt_input(h, rng.uniform(size=(1, 2, 2)), 1).any()


@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_input_gradient_matches_finite_differences(cnn, images, mode, rng):
    x = images.pixels[1]
    t = 2
    g = grad_wrt_input(cnn, x, t, mode)
    coords = sample_coords(x.shape, 20, rng)
    fd = central_difference(lambda z: seed_value(cnn, z, t, mode), x, coords)
    assert_rel_close([g[c] for c in coords], fd, 1e-3)


def test_target_out_of_range(cnn, images):
    with pytest.raises(ValueError, match="out of range"):
        grad_wrt_input(cnn, images.pixels[0], 10)


# --- layer gradients ------------------------------------------------------------


def test_logits_layer_gradient_is_one_hot(cnn, images):
    _, g = grad_wrt_layer(cnn, images.pixels[0], "logits", 6)
    np.testing.assert_array_equal(g, np.eye(10)[6])


def test_one_by_one_conv_layer_gradient_is_head_column():
    h = build_handle("toy_conv1x1", num_classes=3, image_size=4, seed=3, channels=5)
    x = np.random.default_rng(0).uniform(size=(3, 4, 4))
    a, g = grad_wrt_layer(h, x, "features", 1)
    assert a.shape == g.shape == (5, 4, 4)
    # logits = W_head @ mean_ij(features) + b  =>  dy_1/df_kij = W_head[1, k] / 16
    w = h.model.head.weight.detach().numpy()
    np.testing.assert_allclose(g, np.broadcast_to((w[1] / 16)[:, None, None], g.shape), rtol=1e-14)


@pytest.mark.parametrize("layer", ["block3", "block1.bn", "block4.bn"])
def test_layer_gradient_matches_finite_differences(cnn, images, layer, rng):
    x = images.pixels[2]
    t = 5
    a, g = grad_wrt_layer(cnn, x, layer, t, SeedMode.SOFTMAX)
    coords = sample_coords(a.shape, 20, rng)

    def f(delta_at):
        c, d = delta_at

        def tap(z):
            z = z.clone()
            z[(0,) + tuple(c)] += d
            return z

        return seed_value(cnn, x, t, "softmax", {layer: tap})

    # small step keeps the probe away from ReLU and max-pool kinks
    h = 1e-6
    fd = [(f((c, h)) - f((c, -h))) / (2 * h) for c in coords]
    assert_rel_close([g[c] for c in coords], fd, 1e-3)


def test_unknown_layer_lists_valid_names(cnn, images):
    with pytest.raises(KeyError, match="block1.conv"):
        grad_wrt_layer(cnn, images.pixels[0], "nope", 0)


# --- attention --------------------------------------------------------------


def test_attention_rows_are_stochastic(vit, images):
    stack = capture_attentions(vit, images.pixels[0], 1)
    assert len(stack.attentions) == len(vit.block_names) == 3
    for a, g in zip(stack.attentions, stack.gradients):
        assert a.shape == g.shape == (4, 65, 65)
        assert (a >= 0).all()
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)
    rows, cols = stack.token_grid
    assert rows * cols + 1 == 65


def test_attention_gradient_matches_finite_differences(vit, images, rng):
    x = images.pixels[3]
    t = 7
    stack = capture_attentions(vit, x, t, SeedMode.SOFTMAX)
    for block in (0, 2):
        name = f"block{block}.attn"
        coords = sample_coords(stack.attentions[block].shape, 10, rng)

        def f(c, d):
            def tap(z):
                z = z.clone()
                z[(0,) + tuple(c)] += d
                return z

            return seed_value(vit, x, t, "softmax", {name: tap})

        fd = [(f(c, 1e-4) - f(c, -1e-4)) / 2e-4 for c in coords]
        assert_rel_close([stack.gradients[block][c] for c in coords], fd, 1e-3)


def test_capture_attentions_rejects_cnn(cnn, images):
    with pytest.raises(TypeError, match="patch transformer"):
        capture_attentions(cnn, images.pixels[0], 0)


# --- softmax jacobian ------------------------------------------------------------


def test_softmax_jacobian_identity_against_autodiff(rng):
    for _ in range(20):
        y = torch.as_tensor(rng.normal(scale=3, size=7))
        auto = torch.autograd.functional.jacobian(lambda v: torch.softmax(v, 0), y).numpy()
        np.testing.assert_allclose(softmax_jacobian(y.numpy()), auto, atol=1e-8)


@pytest.mark.parametrize("margin", [20.0, 30.0, 60.0])
def test_dominating_class_jacobian_vanishes(rng, margin):
    y = rng.normal(size=10)
    y[3] = y.max() + margin
    auto = torch.autograd.functional.jacobian(lambda v: torch.softmax(v, 0), torch.as_tensor(y)).numpy()
    assert np.abs(auto).max() <= 1e-8


# --- registry and data -------------------------------------------------------------


def test_registry_roundtrip(tmp_path, cnn, images):
    save_handle(cnn, tmp_path)
    desc = json.loads((tmp_path / "cnn_seed0.json").read_text())
    assert desc["kind"] == "cnn" and desc["num_classes"] == 10 and "block4" in desc["layer_names"]
    loaded = load_handle(tmp_path, "cnn_seed0")
    np.testing.assert_allclose(forward(loaded, images), forward(cnn, images), rtol=1e-12)


def test_missing_model_points_to_bootstrap(tmp_path):
    with pytest.raises(FileNotFoundError, match="bootstrap"):
        load_handle(tmp_path, "toy_cnn")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    stream = load_dataset(tmp_path / "m.tsv")
    assert list(stream) == []


def test_single_224_image(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    write_manifest(tmp_path / "m.tsv", [("a", "a.png", 3)])
    batches = list(load_dataset(tmp_path / "m.tsv"))
    assert len(batches) == 1
    assert batches[0].pixels.shape == (1, 3, 224, 224)
    np.testing.assert_allclose(batches[0].pixels[0], arr.transpose(2, 0, 1) / 255.0)


def test_shuffled_load_is_deterministic(tmp_path):
    write_dataset(synthesize(12, seed=1), tmp_path, "s")
    ids = [[i for b in load_dataset(tmp_path / "s.tsv", batch_size=5, shuffle=True, seed=0) for i in b.ids]
           for _ in range(2)]
    assert ids[0] == ids[1] and ids[0] != sorted(ids[0])
    assert len(ids[0]) == 12


def test_missing_image_names_id(tmp_path):
    write_manifest(tmp_path / "m.tsv", [("ghost", "ghost.png", 0)])
    with pytest.raises(FileNotFoundError, match="ghost"):
        list(load_dataset(tmp_path / "m.tsv"))


def test_corrupt_image_skipped_and_counted(tmp_path):
    write_dataset(synthesize(3, seed=2), tmp_path, "s")
    (tmp_path / "s" / "img00001.png").write_bytes(b"not a png")
    stream = load_dataset(tmp_path / "s.tsv")
    batch = stream.load_all()
    assert batch.ids == ["img00000", "img00002"]
    assert stream.skipped == ["img00001"]


def test_image_batch_invariants():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImageBatch(np.full((1, 3, 2, 2), 1.5), [0], ["a"])
    with pytest.raises(ValueError, match="unique"):
        ImageBatch(np.zeros((2, 3, 2, 2)), [0, 1], ["a", "a"])
    with pytest.raises(ValueError, match="must lie in"):
        ImageBatch(np.zeros((1, 3, 2, 2)), [12], ["a"]).check_labels(10)
