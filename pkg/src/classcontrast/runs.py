"""Run directories, per-stage bookkeeping and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

from .config import RunConfig, digest

logger = logging.getLogger(__name__)

VERSIONED = ("classcontrast", "torch", "torchvision", "numpy", "matplotlib", "pydantic", "PyYAML", "Pillow")


def module_versions() -> dict:
    out = {"python": platform.python_version()}
    for name in VERSIONED:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


def run_id_for(subcommand: str, config: RunConfig) -> str:
    return digest({"subcommand": subcommand, "config": config.dump()})[:16]


@dataclass
class Stage:
    name: str
    status: str = "running"
    sample_count: int = 0
    warnings: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    checks: list[dict] = field(default_factory=list)
    error: str | None = None

    def check(self, name: str, passed: bool, detail: str = "", required: bool = True) -> bool:
        """Record a pattern check; informational ones (``required=False``) never fail the stage."""
        self.checks.append({"name": name, "passed": bool(passed), "detail": detail, "required": required})
        return bool(passed)

    def settle(self) -> None:
        """Re-derive the status after checks added outside the stage block."""
        if self.status in ("ok", "checks_failed"):
            self.status = "ok" if all(c["passed"] for c in self.checks if c["required"]) else "checks_failed"


class _Collector(logging.Handler):
    def __init__(self, stage: Stage):
        super().__init__(logging.WARNING)
        self.stage = stage

    def emit(self, record):
        self.stage.warnings.append(f"{record.name}: {record.getMessage()}")


class Run:
    """One invocation: owns the output directory and writes ``manifest.json`` last."""

    def __init__(self, subcommand: str, config: RunConfig, out_dir: Path, jobs: int = 1):
        self.subcommand = subcommand
        self.config = config
        self.run_id = run_id_for(subcommand, config)
        self.out = Path(out_dir)
        self.jobs = jobs
        self.stages: list[Stage] = []
        self.outputs: list[Path] = []
        self._t0 = time.time()
        self.out.mkdir(parents=True, exist_ok=True)

    # --- stages -------------------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        st = Stage(name)
        self.stages.append(st)
        handler = _Collector(st)
        pkg = logging.getLogger("classcontrast")
        pkg.addHandler(handler)
        try:
            yield st
        except Exception as exc:  # recorded per stage; the run carries on to later stages
            st.status = "failed"
            st.error = f"{type(exc).__name__}: {exc}"
            logger.error("stage %s failed: %s", name, st.error)
        else:
            if st.status == "running":
                st.status = "ok"
                st.settle()
        finally:
            pkg.removeHandler(handler)

    @property
    def ok(self) -> bool:
        return all(s.status in ("ok", "empty") for s in self.stages)

    # --- outputs ------------------------------------------------------------

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p not in self.outputs:
                self.outputs.append(p)

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({"run_id": self.run_id, **obj}, indent=2, sort_keys=True) + "\n")
        self.register(p)
        return p

    def write_tsv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.register(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.register(p)
        return p

    def figure_sidecar(self, png: Path, inputs: dict) -> Path:
        """``<figure>.png.json`` next to a raster: inputs, seed and config hash."""
        self.register(png)
        return self.write_json(Path(png).relative_to(self.out).as_posix() + ".json",
                               {"figure": Path(png).name, "inputs": inputs, "seed": self.config.seed,
                                "config_hash": self.config.hash()})

    # --- manifest -----------------------------------------------------------

    def finish(self) -> int:
        lines = [f"run {self.run_id} ({self.subcommand})"]
        for s in self.stages:
            lines.append(f"  {s.name}: {s.status}  samples={s.sample_count}  warnings={len(s.warnings)}")
            for c in s.checks:
                tag = ("PASS" if c["passed"] else "FAIL") + ("" if c["required"] else " info")
                lines.append(f"    [{tag}] {c['name']}  {c['detail']}".rstrip())
            if s.error:
                lines.append(f"    error: {s.error}")
        self.write_text("summary.txt", "\n".join(lines) + "\n")
        outputs = sorted(self.outputs, key=lambda p: p.as_posix())
        manifest = {
            "run_id": self.run_id,
            "subcommand": self.subcommand,
            "config_hash": self.config.hash(),
            "config": self.config.dump(),
            "seed": self.config.seed,
            "jobs": self.jobs,
            "versions": module_versions(),
            "wall_clock": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self._t0)),
                           "seconds": round(time.time() - self._t0, 3)},
            "stages": [asdict(s) for s in self.stages],
            "outputs": [{"path": p.relative_to(self.out).as_posix(),
                         "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in outputs],
            "status": "ok" if self.ok else "failed",
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        print("\n".join(lines))
        return 0 if self.ok else 1
