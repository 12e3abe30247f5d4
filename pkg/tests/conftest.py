import hashlib
import json
import os
import time
from pathlib import Path

import pytest

import topo_nav
from topo_nav.harness.cli import run
from topo_nav.harness.config import parse_config

PACKAGE_DIR = Path(topo_nav.__file__).parent
CACHE_DIR = Path(os.environ.get("TOPO_NAV_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test-cache"))

# 10k-sample curriculum, default optimiser settings
TRAIN_CONFIG = {"experiment": "train", "world": {"kind": "four-way"}, "seed": 0}

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(path.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(path.read_bytes())
    h.update(json.dumps(TRAIN_CONFIG, sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_run() -> tuple[Path, float]:
    """Output directory of the CLI train experiment and its wall time in seconds.

    Reused across sessions while the package source is unchanged.
    """
    out = CACHE_DIR / f"train-{_source_digest()}"
    timing = out / "wall_seconds.txt"
    if not (out / "checkpoint.json").is_file() or not timing.is_file():
        t0 = time.perf_counter()
        run(parse_config(json.dumps(TRAIN_CONFIG)), out)
        timing.write_text(f"{time.perf_counter() - t0:.1f}\n")
    return out, float(timing.read_text())


@pytest.fixture(scope="session")
def trained_checkpoint(trained_run) -> Path:
    return trained_run[0] / "checkpoint.json"


@pytest.fixture
def record():
    """``record(criterion, ok, detail)`` notes an acceptance outcome for the end-of-run summary."""
    def _record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s[1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
