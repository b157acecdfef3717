"""Command line entry point.

    classcontrast <subcommand> [--config run.yaml] [--set a.b=value ...] [--jobs N] [--out DIR]

Artifacts go to ``$CLASSCONTRAST_ARTIFACTS/<subcommand>/<run_id>/`` unless
``--out`` is given. The run id hashes the subcommand and the validated
config, so identical reruns land in the same directory and rewrite the same
bytes (``manifest.json`` alone carries wall-clock time).

Exit codes: 0 success, 1 a stage failed or a check did not hold,
2 bad arguments or config (nothing written), 3 missing model or dataset.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, artifact_root, load_config, resolve_layer
from .contrast import ClassExplanationSet, ContrastSpec, combine, verify_softmax_equivalence
from .data import CLASS_NAMES, ImageBatch, load_dataset
from .explainers import ExplainRequest, ExplanationMap, Method, explain, save_map
from .models import ClassifierHandle, SeedMode, forward, load_handle
from .runs import Run, Stage, run_id_for

logger = logging.getLogger("classcontrast.cli")

SUBCOMMANDS = ("explain", "contrast", "perturb", "ablate", "visualize", "regress", "verify")
CHUNK = 64


class InputError(RuntimeError):
    """A referenced model or dataset is missing."""


# --- inputs -------------------------------------------------------------------


def registry_dir(cfg: RunConfig) -> Path:
    return Path(cfg.model.registry) if cfg.model.registry else artifact_root() / "models"


def manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.data.manifest) if cfg.data.manifest else artifact_root() / "data" / "test.tsv"


def load_model(cfg: RunConfig, model_id: str | None = None) -> ClassifierHandle:
    try:
        return load_handle(registry_dir(cfg), model_id or cfg.model.model_id)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None


def load_data(cfg: RunConfig):
    path = manifest_path(cfg)
    if not path.exists():
        raise InputError(f"dataset manifest {path} not found; run `classcontrast bootstrap` first")
    d = cfg.data
    stream = load_dataset(path, d.batch_size, d.shuffle, d.seed, d.limit)
    try:
        batch = stream.load_all()
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    return batch, list(stream.skipped)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if 0 <= c < len(CLASS_NAMES) else str(c)


def targets_for(rule, handle: ClassifierHandle, batch: ImageBatch) -> np.ndarray:
    if rule == "true_label":
        batch.check_labels(handle.num_classes)
        return batch.labels.copy()
    if rule == "predicted_label":
        return forward(handle, batch).argmax(1) if len(batch) else np.zeros(0, dtype=np.int64)
    return np.full(len(batch), int(rule), dtype=np.int64)


def explain_chunked(handle, pixels, req: ExplainRequest, targets) -> np.ndarray:
    targets = np.broadcast_to(np.asarray(targets), (len(pixels),))
    parts = [explain(handle, pixels[i:i + CHUNK], req, target=targets[i:i + CHUNK]).values
             for i in range(0, len(pixels), CHUNK)]
    return np.concatenate(parts)


def per_class_maps(handle, pixels, req: ExplainRequest) -> np.ndarray:
    """Logit-seed maps for every class: (C, N, h, w)."""
    return np.stack([explain_chunked(handle, pixels, req, s) for s in range(handle.num_classes)])


def _stats(v: np.ndarray) -> list[str]:
    return [f"{v.min():.6e}", f"{v.max():.6e}", f"{np.linalg.norm(v):.6e}"]


@dataclass
class Inputs:
    handle: ClassifierHandle
    batch: ImageBatch
    skipped: list[str]


def _begin(st: Stage, inputs: Inputs) -> None:
    st.sample_count = len(inputs.batch)
    st.skipped = inputs.skipped
    if inputs.skipped:
        logger.warning("%d unreadable images skipped", len(inputs.skipped))


# --- subcommands ----------------------------------------------------------------


def cmd_explain(run: Run, inputs: Inputs) -> None:
    cfg, h, b = run.config, inputs.handle, inputs.batch
    with run.stage("explain") as st:
        _begin(st, inputs)
        req = cfg.explain_request(h.kind)
        targets = targets_for(cfg.explain.target, h, b)
        values = explain_chunked(h, b.pixels, req, targets) if len(b) else np.zeros((0, 1, 1))
        m = ExplanationMap(values, req.method, req.seed_mode, targets.tolist(), req.relu_mode,
                           req.layer_name or (f"block{req.block_index}" if req.block_index is not None else None),
                           {"run_id": run.run_id, "ids": b.ids, "model_id": h.model_id})
        run.register(*save_map(m, run.path("maps")))
        run.write_tsv("explain.tsv", ["id", "label", "target", "min", "max", "l2"],
                      [[i, int(l), int(t)] + _stats(v) for i, l, t, v in zip(b.ids, b.labels, targets, values)])


def cmd_contrast(run: Run, inputs: Inputs) -> None:
    cfg, h, b = run.config, inputs.handle, inputs.batch
    with run.stage("contrast") as st:
        _begin(st, inputs)
        req = cfg.explain_request(h.kind)
        req = ExplainRequest(req.method, SeedMode.LOGIT, req.relu_mode, 0, req.layer_name, req.block_index)
        targets = targets_for(cfg.explain.target, h, b)
        logits = forward(h, b)
        maps = per_class_maps(h, b.pixels, req)
        rows = []
        for comb in cfg.explain.combinators:
            out = np.stack([combine(ClassExplanationSet(maps[:, i], logits[i], req.method, req.layer_name),
                                    ContrastSpec(comb, int(t), cfg.explain.mean_scaled)).values
                            for i, t in enumerate(targets)])
            m = ExplanationMap(out, req.method, SeedMode.LOGIT, targets.tolist(), req.relu_mode, req.layer_name,
                               {"run_id": run.run_id, "combinator": comb.value, "ids": b.ids})
            run.register(*save_map(m, run.path(f"contrast_{comb.value}")))
            rows += [[i, int(t), comb.value] + _stats(v) for i, t, v in zip(b.ids, targets, out)]
        run.write_tsv("contrast.tsv", ["id", "target", "combinator", "min", "max", "l2"], rows)


def cmd_perturb(run: Run, inputs: Inputs, name: str = "perturb") -> None:
    from .perturb import run_perturbation
    from .viz import plot_traces

    h, b = inputs.handle, inputs.batch
    with run.stage(name) as st:
        _begin(st, inputs)
        trace = run_perturbation(h, b, run.config.perturb.build(), run.jobs, {"run_id": run.run_id})
        stem = f"{name}_{h.model_id}" if name != "perturb" else "perturb"
        trace.to_json(run.path(f"{stem}.json"))
        trace.to_tsv(run.path(f"{stem}.tsv"))
        run.register(run.path(f"{stem}.json"), run.path(f"{stem}.tsv"))
        png = plot_traces(trace, run.path(f"{stem}.png"))
        run.figure_sidecar(png, {"model_id": h.model_id, "sample_count": len(b), "trace": f"{stem}.json"})
        return trace


def cmd_ablate(run: Run, inputs: Inputs, threshold: str | None = None, name: str = "ablate"):
    from .ablate import run_ablation

    h, b = inputs.handle, inputs.batch
    with run.stage(name) as st:
        _begin(st, inputs)
        rec = run_ablation(h, b, run.config.ablate.build(threshold), run.jobs)
        rec.metadata["run_id"] = run.run_id
        st.sample_count = rec.sample_count
        if rec.status == "empty":
            st.status = "empty"
        rec.to_json(run.path(f"{name}.json"))
        run.register(run.path(f"{name}.json"))
        if rec.status == "ok":
            rec.to_tsv(run.path(f"{name}.tsv"))
            run.register(run.path(f"{name}.tsv"))
        return rec


def _grid_pairs(run, h, b, sel, req, spec, name):
    from .viz import GridCell, render_grid

    pix = b.pixels[sel.indices]
    logits = forward(h, pix)
    maps = per_class_maps(h, pix, req)
    rows = []
    for i, (classes, probs) in enumerate(zip(sel.top_classes, sel.top_probs)):
        cset = ClassExplanationSet(maps[:, i], logits[i], req.method, req.layer_name)
        row = []
        for r in range(2):
            c = int(classes[r])
            for comb in ("original", "weighted"):
                v = combine(cset, ContrastSpec(comb, c)).values
                row.append(GridCell(pix[i], v, f"{class_name(c)} p={probs[r]:.2f}"))
        rows.append(row)
    cols = ["t1 original", "t1 weighted", "t2 original", "t2 weighted"]
    png = render_grid(rows, run.path(f"{name}.png"), sel.ids, cols, spec)
    run.figure_sidecar(png, {"model_id": h.model_id, "ids": sel.ids, "method": req.method.value,
                             "layer": req.layer_name, "block_index": req.block_index, "layout": "pairs"})


def _grid_classes(run, h, b, sel, req, spec, name):
    from .viz import GridCell, render_grid

    pix = b.pixels[sel.indices]
    logits = forward(h, pix)
    maps = per_class_maps(h, pix, req)
    combs = ("original", "mean", "max", "weighted")
    for i, (sid, classes, probs) in enumerate(zip(sel.ids, sel.top_classes, sel.top_probs)):
        cset = ClassExplanationSet(maps[:, i], logits[i], req.method, req.layer_name)
        rows = [[GridCell(pix[i], combine(cset, ContrastSpec(comb, int(c))).values, comb) for comb in combs]
                for c in classes]
        labels = [f"{class_name(int(c))} p={p:.2f}" for c, p in zip(classes, probs)]
        png = render_grid(rows, run.path(f"{name}_{sid}.png"), labels, list(combs), spec)
        run.figure_sidecar(png, {"model_id": h.model_id, "id": sid, "method": req.method.value,
                                 "layer": req.layer_name, "block_index": req.block_index, "layout": "classes"})


def cmd_visualize(run: Run, inputs: Inputs, name: str = "visualize"):
    from .viz import RenderSpec, select_samples

    cfg, h, b = run.config, inputs.handle, inputs.batch
    v = cfg.visualize
    with run.stage(name) as st:
        _begin(st, inputs)
        sel = select_samples(h, b, v.threshold, v.k, cfg.seed)
        run.write_tsv(f"{name}_samples.tsv", ["id", "c1", "p1", "c2", "p2", "c3", "p3"],
                      [[i] + [x for c, p in zip(cs, ps) for x in (class_name(c), f"{p:.6f}")]
                       for i, cs, ps in zip(sel.ids, sel.top_classes, sel.top_probs)])
        st.sample_count = len(sel.ids)
        if sel.status == "empty":
            logger.warning("no samples satisfy %s", v.threshold)
            st.status = "empty"
            return
        req = cfg.explain_request(h.kind)
        req = ExplainRequest(req.method, SeedMode.LOGIT, req.relu_mode, 0, req.layer_name, req.block_index)
        spec = RenderSpec(v.overlay_alpha, v.center)
        (_grid_pairs if v.layout == "pairs" else _grid_classes)(run, h, b, sel, req, spec, name)


def cmd_regress(run: Run, inputs: Inputs, name: str = "regress"):
    from .viz import norm_logit_regression, plot_regression

    cfg, h, b = run.config, inputs.handle, inputs.batch
    with run.stage(name) as st:
        _begin(st, inputs)
        r = cfg.regress
        rep = norm_logit_regression(h, b, r.num_images, r.classes_per_image, cfg.seed, r.norm)
        rep.metadata["run_id"] = run.run_id
        st.sample_count = rep.metadata["num_images"]
        rep.to_json(run.path(f"{name}.json"))
        run.register(run.path(f"{name}.json"))
        run.write_tsv(f"{name}_points.tsv", ["logit", "norm"], [[f"{y:.9e}", f"{n:.9e}"] for y, n in rep.points])
        png = plot_regression(rep, run.path(f"{name}.png"))
        run.figure_sidecar(png, {"model_id": h.model_id, "points": f"{name}_points.tsv"})
        return rep


def default_verify_methods(kind: str) -> list[tuple[Method, str | None, int | None]]:
    if kind == "patch_transformer":
        methods = (Method.GRADIENT, Method.VIT_GRADCAM)
    else:
        methods = (Method.GRADIENT, Method.GRADCAM, Method.LINEAR_APPROX, Method.XGRADCAM, Method.FULLGRAD)
    return [(m, *resolve_layer(m, kind)) for m in methods]


def cmd_verify(run: Run, inputs: Inputs, name: str = "verify"):
    cfg, h, b = run.config, inputs.handle, inputs.batch
    v = cfg.verify
    with run.stage(name) as st:
        _begin(st, inputs)
        b = b[: min(v.num_images, len(b))] if len(b) else b
        st.sample_count = len(b)
        specs = ([(s.method, *resolve_layer(s.method, h.kind, s.layer_name, s.block_index)) for s in v.methods]
                 if v.methods else default_verify_methods(h.kind))
        targets = targets_for(v.target, h, b)
        rows, worst = [], {}
        for method, layer, block in specs:
            key = method.value if layer is None and block is None else f"{method.value}@{layer or block}"
            worst[key] = 0.0
            for i in range(len(b)):
                rep = verify_softmax_equivalence(h, b.pixels[i], int(targets[i]), method, layer, block_index=block)
                worst[key] = max(worst[key], rep.max_rel_error)
                rows.append([b.ids[i], key, rep.target_class, f"{rep.p_t:.9e}", f"{rep.expected_scale:.9e}",
                             f"{rep.scale_factor:.9e}", f"{rep.max_rel_error:.3e}", int(rep.degenerate),
                             int(rep.passed(v.tolerance))])
            st.check(f"softmax equivalence {key}", worst[key] <= v.tolerance,
                     f"max_rel_error={worst[key]:.3e} tol={v.tolerance:g}")
        run.write_tsv(f"{name}.tsv", ["id", "method", "target", "p_t", "expected_scale", "fitted_scale",
                                      "max_rel_error", "degenerate", "passed"], rows)
        run.write_json(f"{name}.json", {"model_id": h.model_id, "tolerance": v.tolerance,
                                        "max_rel_error": worst, "sample_count": len(b)})


HELP = {
    "explain": "explanation maps for every image in the dataset",
    "contrast": "original, mean, max and weighted contrast maps",
    "perturb": "iterative sign-perturbation benchmark",
    "ablate": "kept-feature ablation benchmark",
    "visualize": "overlay grids for randomly selected ambiguous samples",
    "regress": "explanation norm against logit with a degree-2 fit",
    "verify": "check the softmax-seed / weighted-contrast equivalence",
}

COMMANDS = {"explain": cmd_explain, "contrast": cmd_contrast, "perturb": cmd_perturb, "ablate": cmd_ablate,
            "visualize": cmd_visualize, "regress": cmd_regress, "verify": cmd_verify}


# --- argument parsing -------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. perturb.n_total=5 (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="parallel image workers (results do not depend on it)")
    p.add_argument("--out", type=Path, help="output directory (default: artifact root / subcommand / run id)")


def build_parser() -> argparse.ArgumentParser:
    from .reproduce import BUNDLES

    parser = argparse.ArgumentParser(prog="classcontrast", description="Class-contrastive explanations and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        _common(sub.add_parser(name, help=HELP[name]))
    rp = sub.add_parser("reproduce", help="desk-scale analogue of a figure or table")
    rp.add_argument("figure", choices=sorted(BUNDLES))
    _common(rp)
    bp = sub.add_parser("bootstrap", help="generate the synthetic dataset and train the toy models")
    bp.add_argument("--root", type=Path, help="default: the artifact root")
    bp.add_argument("--n-train", type=int, default=6000)
    bp.add_argument("--n-test", type=int, default=2000)
    bp.add_argument("--seed", type=int, default=0)
    return parser


def out_dir(args, subcommand: str, cfg: RunConfig) -> Path:
    """``<root>/<subcommand>/<run_id>``; ``reproduce:fig3`` maps to ``<root>/reproduce/fig3/<run_id>``."""
    if args.out:
        return args.out
    return artifact_root().joinpath(*subcommand.split(":"), run_id_for(subcommand, cfg))


def _bootstrap(args) -> int:
    from .train import BootstrapConfig, bootstrap

    root = args.root or artifact_root()
    summary = bootstrap(root, BootstrapConfig(n_train=args.n_train, n_test=args.n_test, seed=args.seed))
    for arch, s in summary.items():
        print(f"{arch}\ttest_accuracy\t{s['test_accuracy']:.4f}")
    print(f"models in {Path(root) / 'models'}, data in {Path(root) / 'data'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bootstrap":
        return _bootstrap(args)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "reproduce":
            from .reproduce import run_bundle

            return run_bundle(args)
        cfg = load_config(args.config, args.overrides)
        handle = load_model(cfg)
        batch, skipped = load_data(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    run = Run(args.command, cfg, out_dir(args, args.command, cfg), args.jobs)
    COMMANDS[args.command](run, Inputs(handle, batch, skipped))
    return run.finish()


if __name__ == "__main__":
    sys.exit(main())
