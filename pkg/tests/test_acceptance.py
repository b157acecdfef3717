"""Acceptance gate: one block per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed by the terminal-summary
hook in ``conftest.py``. A criterion passes only if every part of it passed.
"""

import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from classcontrast.ablate import AblationConfig, run_ablation
from classcontrast.contrast import (
    ContrastSpec,
    class_explanations,
    combine,
    contrast_coefficients,
    verify_softmax_equivalence,
)
from classcontrast.data import synthesize
from classcontrast.explainers import explain_attention_rollout, explain_xgradcam, rollout
from classcontrast.models import SeedMode, build_handle, capture_attentions, grad_wrt_input, grad_wrt_layer
from classcontrast.perturb import PerturbConfig, perturb_step, run_perturbation
from classcontrast.viz import GridCell, norm_logit_regression, render_grid, render_heatmap, render_overlay

from .conftest import linear_handle
from .oracles import assert_rel_close, central_difference, sample_coords, seed_value

JOBS = min(4, os.cpu_count() or 1)
RESULTS: dict[int, dict] = {}

TITLES = {
    1: "softmax-seed map == p_t(1-p_t) x weighted contrast, 50 images, rel 1e-5, < 2 min",
    2: "XGradCAM chain sum_s dp_t/dy_s phi^s == softmax-seed map, rel 1e-5",
    3: "perturbation ordering, 500 images, eps 3e-3, 20 steps, < 10 min",
    4: "budget and clamp invariants over 10k random cases",
    5: "ablation ordering at p2 > 0.1, three baselines, t1 and t2, < 10 min",
    6: "dominating-class collapse: smaller gap at p2 < 0.1; |J| <= 1e-8 at margin >= 20",
    7: "two-class mean == max == weighted bitwise",
    8: "rollout sanity: identity, single block, row-stochastic",
    9: "finite-difference fidelity for input, layer and attention gradients",
    10: "norm-vs-logit regression: positive slope on CNN, flat on linear model",
    11: "render mirror symmetry and byte determinism",
}


@contextmanager
def criterion(n: int, part: str):
    entry = RESULTS.setdefault(n, {"title": TITLES[n], "parts": []})
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        entry["parts"].append((part, False, info["detail"] or f"{type(exc).__name__}: {str(exc)[:160]}"))
        print(f"criterion {n} [{part}]: FAIL {info['detail']}")
        raise
    entry["parts"].append((part, True, info["detail"]))
    print(f"criterion {n} [{part}]: PASS {info['detail']}")


# --- 1 -------------------------------------------------------------------------------------


CNN_METHODS = [("gradient", None), ("gradcam", "block4"), ("linear_approx", "block4"),
               ("xgradcam", "block4"), ("fullgrad", None), ("gradcam", "block3"), ("xgradcam", "block3")]


def test_c01_softmax_equivalence(trained_cnn, trained_vit):
    with criterion(1, "cnn methods and vit_gradcam on non-final blocks") as info:
        data = synthesize(50, seed=101)
        targets = np.random.default_rng(101).integers(0, 10, 50)
        t0 = time.perf_counter()
        worst = {}
        for method, layer in CNN_METHODS:
            key = f"{method}@{layer}" if layer else method
            worst[key] = max(verify_softmax_equivalence(trained_cnn, x, int(t), method, layer).max_rel_error
                             for x, t in zip(data.pixels, targets))
        last = len(trained_vit.block_names) - 1
        for block in range(last):
            reps = [verify_softmax_equivalence(trained_vit, x, int(t), "vit_gradcam", block_index=block)
                    for x, t in zip(data.pixels, targets)]
            assert not any(r.degenerate for r in reps)
            worst[f"vit_gradcam@block{block}"] = max(r.max_rel_error for r in reps)
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max rel error {max(worst.values()):.2e} in {elapsed:.0f}s"
        assert max(worst.values()) <= 1e-5, worst
        assert elapsed < 120


def test_c01_final_vit_block_is_degenerate_not_wrong(trained_vit):
    # the class-token head never reads the last block's patch tokens: both maps are exactly zero
    with criterion(1, "final vit block is all-zero for both seeds"):
        last = len(trained_vit.block_names) - 1
        for x in synthesize(5, seed=102).pixels:
            r = verify_softmax_equivalence(trained_vit, x, 3, "vit_gradcam", block_index=last)
            assert r.degenerate and r.max_rel_error == 0.0


# --- 2 -------------------------------------------------------------------------------------


@pytest.mark.parametrize("layer", ["block4", "block3"])
def test_c02_xgradcam_chain(trained_cnn, test_set, layer):
    with criterion(2, layer) as info:
        worst = 0.0
        for i in range(10):
            x, t = test_set.pixels[i], int(test_set.labels[i])
            with torch.no_grad():
                logits = trained_cnn.run(trained_cnn.as_tensor(test_set.pixels[i:i + 1]))[0][0]
            jac = torch.autograd.functional.jacobian(lambda v: torch.softmax(v, 0), logits).numpy()
            per_class = [explain_xgradcam(trained_cnn, x, s, layer).values for s in range(10)]  # C back-props
            chain = sum(jac[t, s] * per_class[s] for s in range(10))
            soft = explain_xgradcam(trained_cnn, x, t, layer, SeedMode.SOFTMAX).values  # one back-prop
            worst = max(worst, np.abs(chain - soft).max() / np.abs(soft).max())
        info["detail"] = f"max rel error {worst:.2e}"
        assert worst <= 1e-5


# --- 3 -------------------------------------------------------------------------------------


def test_c03_perturbation_ordering(trained_cnn, test_set):
    with criterion(3, "toy cnn") as info:
        t0 = time.perf_counter()
        tr = run_perturbation(trained_cnn, test_set[:500], PerturbConfig(epsilon=3e-3, n_total=20), jobs=JOBS)
        elapsed = time.perf_counter() - t0
        s = tr.series
        w, o, m = s["weighted"], s["original"], s["max"]
        gain_w, gain_m = w["p_t"][-1] - w["p_t"][0], m["p_t"][-1] - m["p_t"][0]
        info["detail"] = (f"p_t w/o {w['p_t'][-1]:.4f}/{o['p_t'][-1]:.4f}, acc w/clean {w['accuracy'][-1]:.3f}/"
                          f"{w['accuracy'][0]:.3f}, y_t o/w {o['y_t'][-1]:.3f}/{w['y_t'][-1]:.3f}, "
                          f"gain max/w {gain_m:.4f}/{gain_w:.4f}, {elapsed:.0f}s")
        assert tr.metadata["sample_count"] == 500
        assert w["p_t"][-1] > o["p_t"][-1]
        assert w["accuracy"][-1] >= w["accuracy"][0]
        assert o["y_t"][-1] > w["y_t"][-1]
        assert abs(gain_m - gain_w) <= 0.2 * gain_w
        assert elapsed < 600


# --- 4 -------------------------------------------------------------------------------------


def test_c04_budget_and_clamp_invariants():
    with criterion(4, "10k random cases") as info:
        rng = np.random.default_rng(4)
        violations = steps = 0
        for case in range(10_000):
            size = int(rng.integers(1, 7))
            x0 = rng.uniform(size=(3, size, size))
            edge = rng.uniform(size=x0.shape)
            x0[edge < 0.1] = 0.0
            x0[edge > 0.9] = 1.0
            eps = float(rng.choice([1e-3, 3e-3, rng.uniform(1e-4, 0.3)]))
            n_total = int(rng.integers(1, 25))
            step = eps / n_total
            x = x0.copy()
            for _ in range(int(rng.integers(1, n_total + 5))):
                phi = rng.normal(size=x0.shape)
                phi[rng.uniform(size=x0.shape) < 0.2] = 0.0
                prev = x
                x = perturb_step(x, x0, phi, step, eps)
                steps += 1
                bad = (np.abs(x - x0).max() > eps + 1e-12 or x.min() < 0.0 or x.max() > 1.0
                       or not np.array_equal(x[phi == 0], prev[phi == 0]))
                violations += bool(bad)
        info["detail"] = f"{violations} violations over 10000 cases ({steps} steps)"
        assert violations == 0


# --- 5 and 6 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_high(trained_cnn, test_set):
    t0 = time.perf_counter()
    rec = run_ablation(trained_cnn, test_set, AblationConfig(threshold="p2 > 0.1"), jobs=JOBS)
    return rec, time.perf_counter() - t0


def test_c05_ablation_ordering(ablation_high):
    with criterion(5, "gradcam, linear_approx, xgradcam") as info:
        rec, elapsed = ablation_high
        assert rec.status == "ok" and rec.sample_count > 0
        failures = []
        for method in rec.metadata["methods"]:
            for b in ("gaussian_blur", "zeros", "channel_mean"):
                for rank in ("t1", "t2"):
                    pw, po = (rec.value(method, v, b, "positive", rank) for v in ("weighted", "original"))
                    nw, no = (rec.value(method, v, b, "negative", rank) for v in ("weighted", "original"))
                    if not pw > po:
                        failures.append(f"{method}/{b}/{rank}/pos {pw:.4f}<={po:.4f}")
                    if not nw < no:
                        failures.append(f"{method}/{b}/{rank}/neg {nw:.4f}>={no:.4f}")
        info["detail"] = f"{rec.sample_count} samples, {36 * 2 - len(failures)}/72 orderings, {elapsed:.0f}s"
        assert not failures, failures
        assert elapsed < 600


def test_c06_gap_shrinks_for_dominating_class(trained_cnn, test_set, ablation_high):
    with criterion(6, "ablation gap") as info:
        high, _ = ablation_high
        low = run_ablation(trained_cnn, test_set, AblationConfig(threshold="p2 < 0.1"), jobs=JOBS)
        assert low.status == "ok"
        worse = []
        ratios = []
        for method in high.metadata["methods"]:
            for b in ("gaussian_blur", "zeros", "channel_mean"):
                gap = [abs(r.value(method, "original", b, "positive", "t1") - r.value(method, "weighted", b, "positive", "t1"))
                       for r in (low, high)]
                ratios.append(gap[0] / gap[1])
                if not gap[0] < gap[1]:
                    worse.append((method, b, gap))
        info["detail"] = f"{low.sample_count} vs {high.sample_count} samples, max gap ratio {max(ratios):.3f}"
        assert not worse, worse


def _autodiff_jacobian(y: np.ndarray) -> np.ndarray:
    return torch.autograd.functional.jacobian(lambda v: torch.softmax(v, 0), torch.as_tensor(y)).numpy()


@pytest.mark.parametrize("num_classes", [2, 3, 5, 10])
def test_c06_jacobian_bound_at_margin_20(num_classes):
    # literal reading: every entry, any logit vector whose top-2 margin is >= 20
    with criterion(6, f"jacobian C={num_classes}") as info:
        worst_case = np.zeros(num_classes)
        worst_case[0] = 20.0  # every rival sits exactly at the margin
        worst = np.abs(_autodiff_jacobian(worst_case)).max()
        info["detail"] = f"max |J| {worst:.3e} at the worst case"
        assert worst <= 1e-8


def test_c06_cross_class_entries_vanish():
    # every entry except the target's own diagonal is bounded by exp(-20) < 1e-8 at any class count;
    # the target diagonal is bounded by (C - 1) exp(-20)
    with criterion(6, "off-target entries, C in 2..12") as info:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(2000):
            c = int(rng.integers(2, 13))
            y = rng.uniform(-50, 0, size=c) * (rng.uniform() < 0.5)
            t = int(rng.integers(c))
            y[t] = np.delete(y, t).max() + rng.uniform(20, 200)
            jac = _autodiff_jacobian(y)
            mask = np.ones_like(jac, dtype=bool)
            mask[t, t] = False
            worst = max(worst, np.abs(jac[mask]).max())
            assert jac[t, t] <= (c - 1) * np.exp(-20.0) * (1 + 1e-12)
        info["detail"] = f"max off-target |J| {worst:.3e}"
        assert worst <= 1e-8


# --- 7 -------------------------------------------------------------------------------------


def test_c07_two_class_rows_bitwise():
    with criterion(7, "coefficient rows"):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            y = rng.normal(scale=rng.choice([1.0, 30.0, 1e3]), size=2)
            t = int(rng.integers(2))
            rows = [contrast_coefficients(y, t, c)[0] for c in ("mean", "max", "weighted")]
            assert rows[0].tobytes() == rows[1].tobytes() == rows[2].tobytes()


@pytest.mark.parametrize("arch, method, layer", [
    ("toy_cnn", "gradcam", "block4"), ("toy_cnn", "xgradcam", "block3"), ("toy_cnn", "gradient", None),
    ("toy_linear", "gradient", None), ("toy_vit", "vit_gradcam", None),
])
def test_c07_two_class_maps_bitwise(arch, method, layer):
    with criterion(7, f"{arch} {method}"):
        kw = {"image_size": 32} if arch != "toy_vit" else {"depth": 2}
        h = build_handle(arch, num_classes=2, seed=7, **kw)
        for x in synthesize(4, seed=7).pixels:
            block = 0 if method == "vit_gradcam" else None
            cset = class_explanations(h, x, method, layer, block_index=block)
            for t in (0, 1):
                maps = [combine(cset, ContrastSpec(c, t)).values for c in ("mean", "max", "weighted")]
                assert maps[0].tobytes() == maps[1].tobytes() == maps[2].tobytes()


# --- 8 -------------------------------------------------------------------------------------


def test_c08_identity_attentions_give_zero_patch_map(trained_vit, monkeypatch):
    with criterion(8, "identity weighted attentions"):
        tokens = 65
        r = rollout([np.eye(tokens)] * 4)
        assert not r[0, 1:].any() and r[0, 0] == 1.0
        import classcontrast.models as models

        real = capture_attentions(trained_vit, synthesize(1, seed=8).pixels[0], 0)
        heads = real.attentions[0].shape[0]
        eye = [np.broadcast_to(np.eye(tokens), (heads, tokens, tokens)).copy() for _ in real.attentions]
        ones = [np.ones_like(e) for e in eye]
        fake = type(real)(eye, ones, real.token_grid)
        monkeypatch.setattr(models, "capture_attentions", lambda *a, **k: fake)
        m = explain_attention_rollout(trained_vit, synthesize(1, seed=8).pixels[0], 0)
        assert not m.values.any()


@pytest.mark.parametrize("relu_mode", ["none", "final_relu"])
def test_c08_single_block_is_normalized_class_row(relu_mode):
    with criterion(8, f"single block equals its weighted class-token row ({relu_mode})"):
        h = build_handle("toy_vit", num_classes=10, seed=8, depth=1)
        for x in synthesize(3, seed=8).pixels:
            stack = capture_attentions(h, x, 4)
            w = (stack.attentions[0] * stack.gradients[0]).mean(0)
            if relu_mode == "final_relu":
                w = np.maximum(w, 0)
            g = w + np.eye(65)
            row = g[0] / np.abs(g[0]).sum()
            m = explain_attention_rollout(h, x, 4, relu_mode=relu_mode)
            np.testing.assert_allclose(m.values.ravel(), row[1:], rtol=1e-10, atol=1e-18)


def test_c08_row_stochastic_after_renormalization(trained_vit, test_set):
    with criterion(8, "row-stochastic") as info:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(50):
            mats = [np.abs(rng.normal(size=(17, 17))) * (rng.uniform(size=(17, 17)) < 0.5) for _ in range(4)]
            worst = max(worst, np.abs(rollout(mats).sum(1) - 1).max())
        for i in range(5):
            stack = capture_attentions(trained_vit, test_set.pixels[i], int(test_set.labels[i]))
            mats = [(a * g).mean(0) for a, g in zip(stack.attentions, stack.gradients)]
            worst = max(worst, np.abs(rollout(mats).sum(1) - 1).max())
        info["detail"] = f"max |row sum - 1| {worst:.1e}"
        assert worst <= 1e-6


# --- 9 -------------------------------------------------------------------------------------

STEP = 1e-4


@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_c09_input_gradient(trained_cnn, trained_vit, test_set, mode):
    with criterion(9, f"input {mode}"):
        rng = np.random.default_rng(9)
        for h in (trained_cnn, trained_vit):
            x, t = test_set.pixels[0], int(test_set.labels[0])
            g = grad_wrt_input(h, x, t, mode)
            coords = sample_coords(x.shape, 20, rng)
            fd = central_difference(lambda z: seed_value(h, z, t, mode), x, coords, STEP)
            assert_rel_close([g[c] for c in coords], fd, 1e-3)


def _layer_fd(h, x, t, mode, name, coords):
    def f(c, d):
        def tap(z):
            z = z.clone()
            z[(0,) + tuple(c)] += d
            return z

        return seed_value(h, x, t, mode, {name: tap})

    return [(f(c, STEP) - f(c, -STEP)) / (2 * STEP) for c in coords]


@pytest.mark.parametrize("layer", ["block3", "block1.bn", "block4.bn", "fc", "block4"])
@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_c09_layer_gradient(trained_cnn, test_set, layer, mode):
    with criterion(9, f"layer {layer} {mode}"):
        rng = np.random.default_rng(19)
        x, t = test_set.pixels[1], int(test_set.labels[1])
        a, g = grad_wrt_layer(trained_cnn, x, layer, t, mode)
        coords = sample_coords(a.shape, 20, rng)
        fd = _layer_fd(trained_cnn, x, t, mode, layer, coords)
        assert_rel_close([g[c] for c in coords], fd, 1e-3)


@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_c09_attention_gradient(trained_vit, test_set, mode):
    with criterion(9, f"attention {mode}"):
        rng = np.random.default_rng(29)
        x, t = test_set.pixels[2], int(test_set.labels[2])
        stack = capture_attentions(trained_vit, x, t, mode)
        for block in range(len(stack.attentions)):
            coords = sample_coords(stack.attentions[block].shape, 20, rng)
            fd = _layer_fd(trained_vit, x, t, mode, f"block{block}.attn", coords)
            assert_rel_close([stack.gradients[block][c] for c in coords], fd, 1e-3)


# The trained CNN is piecewise linear (ReLU, max-pool), so a central difference whose
# +/- step crosses a kink measures an average of two slopes. The diagnostics below do
# not gate criterion 9: they show that every coordinate missing the tolerance at the
# fixed step changes the activation pattern across the step, and that the same
# coordinates agree once the step is small enough to stay on one linear piece.


def _pattern(h, x, taps=None):
    """ReLU masks and max-pool winners of one CNN forward pass."""
    seen = []
    m = h.model

    def rec(name, pool):
        def tap(z):
            if name in (taps or {}):
                z = taps[name](z)
            seen.append((z > 0).numpy().copy())
            if pool:
                seen.append(torch.nn.functional.max_pool2d(z, 2, return_indices=True)[1].numpy().copy())
            return z

        return tap

    rec_taps = dict(taps or {})
    for i, b in enumerate(m.block_names()):
        rec_taps[f"{b}.bn"] = rec(f"{b}.bn", False)
        rec_taps[b] = rec(b, i in m.pool_after)
    rec_taps["fc"] = rec("fc", False)
    with torch.no_grad():
        h.run(h.as_tensor(x), rec_taps)
    return seen


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def _shift(x, c, d):
    z = x.copy()
    z[c] += d
    return z


@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_input_fd_misses_are_kinks(trained_cnn, test_set, mode):
    rng = np.random.default_rng(9)  # same draw as the input-gradient check above
    h = trained_cnn
    x, t = test_set.pixels[0], int(test_set.labels[0])
    g = grad_wrt_input(h, x, t, mode)
    coords = sample_coords(x.shape, 20, rng)
    fd = central_difference(lambda z: seed_value(h, z, t, mode), x, coords, STEP)
    gc = np.array([g[c] for c in coords])
    miss = np.abs(gc - fd) > 1e-3 * np.maximum(np.abs(gc), np.abs(fd)) + 1e-10
    for c in np.array(coords, dtype=object)[miss]:
        c = tuple(c)
        assert not _same_pattern(_pattern(h, _shift(x, c, STEP)), _pattern(h, _shift(x, c, -STEP)))
    fine = central_difference(lambda z: seed_value(h, z, t, mode), x, coords, 1e-6)
    assert_rel_close(gc, fine, 1e-5)


@pytest.mark.parametrize("mode", ["logit", "softmax"])
def test_block4_fd_misses_are_kinks(trained_cnn, test_set, mode):
    rng = np.random.default_rng(19)  # same draw as the block4 layer check above
    x, t = test_set.pixels[1], int(test_set.labels[1])
    a, g = grad_wrt_layer(trained_cnn, x, "block4", t, mode)
    coords = sample_coords(a.shape, 20, rng)
    fd = np.array(_layer_fd(trained_cnn, x, t, mode, "block4", coords))
    gc = np.array([g[c] for c in coords])
    miss = np.abs(gc - fd) > 1e-3 * np.maximum(np.abs(gc), np.abs(fd)) + 1e-10

    def bump(c, d):
        def tap(z):
            z = z.clone()
            z[(0,) + tuple(c)] += d
            return z

        return {"block4": tap}

    for c, bad in zip(coords, miss):
        if bad:
            up = _pattern(trained_cnn, x, bump(c, STEP))
            down = _pattern(trained_cnn, x, bump(c, -STEP))
            assert not _same_pattern(up, down)
    # one-sided differences stay on one piece when the cell is a strict pool winner or loser
    for c, gv in zip(coords, gc):
        base = seed_value(trained_cnn, x, t, mode)
        up = (seed_value(trained_cnn, x, t, mode, bump(c, 1e-6)) - base) / 1e-6
        down = (base - seed_value(trained_cnn, x, t, mode, bump(c, -1e-6))) / 1e-6
        assert min(abs(up - gv), abs(down - gv)) <= 1e-4 * max(abs(gv), 1e-6) + 1e-8


# --- 10 ------------------------------------------------------------------------------------


def test_c10_regression_trend(trained_cnn, test_set):
    with criterion(10, "toy cnn slope") as info:
        rep = norm_logit_regression(trained_cnn, test_set, 200, 10, seed=10)
        y_max = max(p[0] for p in rep.points)
        info["detail"] = f"slope {rep.slope_at(y_max):.4f} at y={y_max:.2f}, {len(rep.points)} points"
        assert len(rep.coefficients) == 3
        assert rep.slope_at(y_max) > 0


def test_c10_linear_model_is_flat():
    with criterion(10, "linear model") as info:
        w = np.random.default_rng(10).normal(size=(10, 3 * 32 * 32))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        h = linear_handle(10, weights=w, image_size=32, channels=3)
        rep = norm_logit_regression(h, synthesize(100, seed=10), 100, 10)
        info["detail"] = f"relative curvature {rep.relative_curvature():.2e}"
        assert rep.relative_curvature() <= 1e-6


# --- 11 ------------------------------------------------------------------------------------


def test_c11_mirror_and_determinism(trained_cnn, test_set, tmp_path):
    with criterion(11, "mirror and bytes"):
        x = test_set.pixels[3]
        v = explain_xgradcam(trained_cnn, x, int(test_set.labels[3]), "block4").values
        a, b = render_heatmap(v, (32, 32)), render_heatmap(-v, (32, 32))
        np.testing.assert_array_equal(a[..., 0], b[..., 2])
        np.testing.assert_array_equal(a[..., 1], b[..., 1])
        np.testing.assert_array_equal(a[..., 2], b[..., 0])
        gray = np.broadcast_to(x.mean(0), x.shape)  # channel-symmetric background keeps the overlay a mirror
        oa, ob = render_overlay(gray, v).rgb, render_overlay(gray, -v).rgb
        np.testing.assert_array_equal(oa[..., ::-1], ob)
        digests = set()
        for k in range(2):
            render_overlay(x, v, path=tmp_path / f"o{k}.png")
            render_grid([[GridCell(x, v, "a"), GridCell(x, -v, "b")]], tmp_path / f"g{k}.png", ["r"], ["+", "-"])
        assert (tmp_path / "o0.png").read_bytes() == (tmp_path / "o1.png").read_bytes()
        assert (tmp_path / "g0.png").read_bytes() == (tmp_path / "g1.png").read_bytes()
