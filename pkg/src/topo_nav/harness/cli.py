"""``topo-nav <experiment> --config <file> [--out <dir>] [--seed N]``

Exit status: 0 success, 2 invalid configuration, 3 missing input artifact,
1 any other failure.  Artifacts are produced in memory first and written with
temp-then-rename, so a failed run leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from .._accel import backend_name
from .config import EXPERIMENTS, UTILITIES, ConfigError, MissingArtifactError, config_hash, dump_config, parse_config
from .experiments import RUNNERS, RunOutput
from .io import atomic_write_text, json_text
from .report import render_figure

OUTPUT_ENV = "TOPO_NAV_OUTPUT_DIR"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("topo_nav")


def _versions() -> dict:
    out = {"topo_nav": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "backend": backend_name()}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    try:
        import pydantic
        out["pydantic"] = pydantic.VERSION
    except ImportError:  # pragma: no cover
        pass
    return out


def load_config(path: Path, experiment: str | None = None, seed: int | None = None):
    """Parse ``path`` and apply command-line overrides (validated like the file)."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise MissingArtifactError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    overrides = {}
    if experiment is not None:
        overrides["experiment"] = experiment
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        doc = json.loads(dump_config(cfg))
        doc.update(overrides)
        cfg = parse_config(json.dumps(doc))
    return cfg


def render_outputs(out: RunOutput) -> dict[str, str]:
    files = dict(out.files)
    files["metrics.json"] = json_text(out.metrics)
    for fig in out.figures:
        files[f"{fig.name}.svg"] = render_figure(fig, out.figure_data)
    return files


def run(cfg, out_dir: Path, base: Path = Path(".")) -> list[Path]:
    """Run the configured experiment and write its artifacts plus a manifest."""
    files = render_outputs(RUNNERS[cfg.experiment](cfg, base))
    files["config.json"] = dump_config(cfg)
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "versions": _versions(),
        "files": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    files["manifest.json"] = json_text(manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(files):
        path = out_dir / name
        atomic_write_text(path, files[name])
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topo-nav", description="Synthetic road-world steering and localization experiments.")
    p.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS + UTILITIES)}")
    p.add_argument("--config", required=True, type=Path, help="JSON experiment configuration")
    p.add_argument("--out", type=Path, default=None, help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.experiment, args.seed)
        out_dir = args.out or (Path(os.environ[OUTPUT_ENV]) if os.environ.get(OUTPUT_ENV) else Path(cfg.output_dir))
        written = run(cfg, out_dir, args.config.parent)
    except ConfigError as exc:
        print(f"topo-nav: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"topo-nav: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - any failure maps to a nonzero status
        log.debug("run failed", exc_info=True)
        print(f"topo-nav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
