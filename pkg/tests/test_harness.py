import csv
import io
import json
import math
import os
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topo_nav.harness import cli
from topo_nav.harness.config import ConfigError, ExperimentConfig, config_hash, dump_config, parse_config
from topo_nav.harness.io import atomic_write_text, csv_text
from topo_nav.harness.report import Figure, ReportError, emit_report, render_figure
from topo_nav.mdn import ModelConfig, ModelParams, save_checkpoint

MINIMAL = {"experiment": "matching", "world": {"kind": "grid"}}


def _cfg(**over):
    doc = json.loads(json.dumps(MINIMAL))
    for k, v in over.items():
        doc[k] = v
    return doc


# config ---------------------------------------------------------------------

def test_minimal_config_is_fully_defaulted():
    cfg = parse_config(json.dumps(MINIMAL))
    assert cfg.world.kind == "grid" and cfg.world.extents == 200.0 and cfg.world.block_size == 50.0
    assert cfg.sim.speed == 5.0 and cfg.sim.dt == 0.1 and cfg.sim.kappa_max == 0.2
    assert cfg.model.n_components == 3 and cfg.model.sigma_center == pytest.approx(math.log(0.02))
    assert cfg.train.momentum == 0.9 and cfg.train.n_samples == 10_000
    assert cfg.calibration.z_grid == (0.5, 1.0, 2.0, 3.0)
    assert cfg.seed == 0 and cfg.checkpoint is None
    # every default lives in the models, so parse and construct agree
    assert cfg == ExperimentConfig(experiment="matching", world={"kind": "grid"})


def test_unknown_key_is_named():
    doc = _cfg(sim={"speeed": 4.0})
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps(doc))
    assert "speeed" in str(exc.value)


def test_every_violation_is_listed():
    doc = _cfg(sim={"speed": "fast", "dt": -1.0}, train={"momentum": 1.5}, bogus=1)
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps(doc))
    fields = " ".join(exc.value.problems)
    for name in ("sim.speed", "sim.dt", "train.momentum", "bogus"):
        assert name in fields
    assert len(exc.value.problems) == 4


@pytest.mark.parametrize("text, needle", [
    ('{"experiment": "calibrate", "world": {"kind": "grid"}}', "unknown experiment"),
    ('{"experiment": "drive"}', "world"),
    ('{"experiment": "drive", "world": {"kind": "hexagon"}}', "world.kind"),
    ('{"experiment": "drive", "world": {"kind": "grid", "extents": 10, "block_size": 50}}', "extents"),
    ('[1, 2]', "JSON object"),
    ('{"experiment": ', "<json>"),
    ('{"experiment": "drive", "world": {"kind": "grid"}, "seed": 1.5}', "seed"),
    ('{"experiment": "drive", "world": {"kind": "grid"}, "model": {"size": 60}}', "divisible"),
])
def test_invalid_configs(text, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert needle in str(exc.value)


def test_integers_accepted_for_float_fields():
    cfg = parse_config(json.dumps(_cfg(sim={"speed": 4})))
    assert cfg.sim.speed == 4.0


finite = st.floats(min_value=0.01, max_value=50.0, allow_nan=False)

configs = st.fixed_dictionaries(
    {"experiment": st.sampled_from(["calibration", "localization", "confusion", "matching", "drive", "train"]),
     "world": st.fixed_dictionaries({"kind": st.sampled_from(["grid", "four-way", "roundabout", "composite"]),
                                     "extents": st.floats(200.0, 400.0), "block_size": st.floats(20.0, 100.0),
                                     "seed": st.integers(0, 10)})},
    optional={
        "seed": st.integers(-(2 ** 31), 2 ** 31),
        "checkpoint": st.text(min_size=1, max_size=12),
        "output_dir": st.text(min_size=1, max_size=12),
        "sim": st.fixed_dictionaries({}, optional={"speed": finite, "dt": finite, "gps_sigma": finite,
                                                   "obs_dropout": st.floats(0.0, 1.0)}),
        "train": st.fixed_dictionaries({}, optional={"learning_rate": finite, "epochs": st.integers(0, 100),
                                                     "clip_norm": st.one_of(st.none(), finite),
                                                     "mirror": st.booleans()}),
        "calibration": st.fixed_dictionaries({}, optional={
            "z_grid": st.lists(st.floats(0.0, 5.0), min_size=1, max_size=5)}),
        "localization": st.fixed_dictionaries({}, optional={
            "mode": st.sampled_from(["observed-steering", "paper-literal"]),
            "sigma_xy_levels": st.lists(finite, min_size=1, max_size=3)}),
    })


@settings(max_examples=100, deadline=None)
@given(configs)
def test_round_trip(doc):
    cfg = parse_config(json.dumps(doc))
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_config_hash_tracks_meaningful_fields():
    base = parse_config(json.dumps(MINIMAL))
    h = config_hash(base)
    assert config_hash(parse_config(json.dumps(MINIMAL))) == h
    assert config_hash(parse_config(json.dumps(_cfg(output_dir="elsewhere")))) == h
    # spelling out a default is not a change
    assert config_hash(parse_config(json.dumps(_cfg(sim={"speed": 5.0})))) == h
    for over in ({"seed": 1}, {"sim": {"speed": 4.0}}, {"world": {"kind": "grid", "seed": 3}},
                 {"matching": {"beta": 2.0}}):
        assert config_hash(parse_config(json.dumps(_cfg(**over)))) != h


# reports --------------------------------------------------------------------

CAL = Figure("cal", "line", ("fraction",), "Calibration", x="z")


def test_single_point_series_has_one_marker(tmp_path):
    (path,) = emit_report({"z": [1.0], "fraction": [0.7]}, [CAL], tmp_path)
    text = path.read_text()
    assert text.count('class="marker"') == 1
    assert "<polyline" not in text


def test_marker_per_point():
    text = render_figure(CAL, {"z": [0.5, 1, 2, 3], "fraction": [0.3, 0.6, 0.9, 0.97]})
    assert text.count('class="marker"') == 4


@pytest.mark.parametrize("metrics, needle", [
    ({"z": [], "fraction": []}, "empty"),
    ({"z": [1.0]}, "fraction"),
    ({"z": [1.0, 2.0], "fraction": [0.5]}, "fraction"),
])
def test_bad_series_rejected(tmp_path, metrics, needle):
    with pytest.raises(ReportError, match=needle):
        emit_report(metrics, [CAL], tmp_path)
    assert not list(tmp_path.iterdir())


def test_reports_are_deterministic_and_self_contained(tmp_path):
    metrics = {"z": [0.5, 1.0, 2.0], "fraction": [0.4, 0.7, 0.95], "ref": [0.38, 0.68, 0.95],
               "level": ["a", "b", "c"], "m": [[0.9, 0.1], [0.2, 0.8]]}
    figs = [Figure("line", "line", ("fraction", "ref"), "t", x="z"),
            Figure("bars", "bars", ("fraction",), "t", x="level"),
            Figure("heat", "heatmap", ("m",), "t")]
    a = [p.read_bytes() for p in emit_report(metrics, figs, tmp_path / "a")]
    b = [p.read_bytes() for p in emit_report(metrics, figs, tmp_path / "b")]
    assert a == b
    for blob in a:
        text = blob.decode()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
        assert re.findall(r'https?://', text) == ["http://"]  # only the namespace
        assert "href" not in text


def test_heatmap_cell_count_and_negative_bars():
    text = render_figure(Figure("h", "heatmap", ("m",)), {"m": np.eye(5).tolist()})
    assert text.count('class="marker"') == 25
    bars = render_figure(Figure("b", "bars", ("v",)), {"v": [-1.0, 2.0]})
    assert bars.count('class="marker"') == 2


# atomic writes --------------------------------------------------------------

def test_atomic_write_leaves_nothing_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "x.json"
    atomic_write_text(target, "old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["x.json"]


def test_csv_text_round_trips_floats():
    text = csv_text(("a", "b"), [(0.1, True), (1e-300, False)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["a", "b"] and float(rows[1][0]) == 0.1 and float(rows[2][0]) == 1e-300
    assert rows[1][1] == "true"


# CLI ------------------------------------------------------------------------

def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def tiny_checkpoint(tmp_path):
    cfg = ModelConfig(size=16, obs_channels=(2, 4), map_channels=2, route_channels=2, trunk=(8, 8), det_hidden=4)
    path = tmp_path / "tiny.json"
    save_checkpoint(path, ModelParams.init(cfg, np.random.default_rng(0)))
    return path


def test_unknown_experiment_exits_nonzero(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", MINIMAL)
    code = cli.main(["explore", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == cli.EXIT_CONFIG
    assert "unknown experiment" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_config_exits_2_and_writes_nothing(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", _cfg(sim={"speeed": 1}))
    assert cli.main(["matching", "--config", str(cfg), "--out", str(tmp_path / "out")]) == cli.EXIT_CONFIG
    assert "speeed" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("experiment", ["calibration", "localization", "confusion", "drive"])
def test_missing_checkpoint_is_missing_artifact(tmp_path, experiment):
    cfg = write(tmp_path / "c.json", _cfg(checkpoint="nope.json"))
    assert cli.main([experiment, "--config", str(cfg), "--out", str(tmp_path / "out")]) == cli.EXIT_MISSING
    cfg = write(tmp_path / "d.json", MINIMAL)
    assert cli.main([experiment, "--config", str(cfg), "--out", str(tmp_path / "out")]) == cli.EXIT_MISSING
    assert not (tmp_path / "out").exists()


def test_missing_config_file(tmp_path):
    assert cli.main(["matching", "--config", str(tmp_path / "none.json")]) == cli.EXIT_MISSING


def test_runtime_failure_exits_1_without_artifacts(tmp_path):
    # a world without edges has no route to match
    graph = tmp_path / "g.json"
    graph.write_text('{"format": "topo-nav-graph", "version": 1, "origin": {"lat": 0.0, "lon": 0.0}}\n'
                     '{"node": 0, "x": 0.0, "y": 0.0}\n')
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "grid", "source": "g.json"}))
    assert cli.main(["matching", "--config", str(cfg), "--out", str(tmp_path / "out")]) == cli.EXIT_FAILURE
    assert not (tmp_path / "out").exists() or not list((tmp_path / "out").iterdir())


def _numeric(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "grid", "extents": 200.0, "block_size": 100.0},
                                          matching={"n_routes": 2, "gps_sigmas": [2.0]},
                                          sim={"route_length": 150.0}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["matching", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["matching", "--config", str(cfg), "--out", str(b)]) == 0
    assert _numeric(a) == _numeric(b)
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    ma.pop("created"), mb.pop("created")
    assert ma == mb
    assert set(ma["files"]) == set(_numeric(a))
    assert {"metrics.json", "matching.csv", "matching.svg", "config.json"} <= set(ma["files"])


def test_seed_override_and_manifest(tmp_path):
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "four-way"}))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["experiment"] == "simulate"
    assert {"topo_nav", "numpy", "python", "backend"} <= set(man["versions"])
    assert man["config_hash"] == config_hash(parse_config((tmp_path / "o" / "config.json").read_text()))


def test_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "four-way"}, output_dir="from-config"))
    assert cli.main(["world", "--config", str(cfg)]) == 0
    assert (tmp_path / "from-config" / "world.json").is_file()
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "from-env"))
    assert cli.main(["world", "--config", str(cfg)]) == 0
    assert (tmp_path / "from-env" / "world.json").is_file()
    assert cli.main(["world", "--config", str(cfg), "--out", str(tmp_path / "from-flag")]) == 0
    assert (tmp_path / "from-flag" / "world.json").is_file()


def test_world_from_graph_file(tmp_path):
    from topo_nav.road_graph import WorldSpec, build_world, dumps_graph, loads_graph
    g = build_world(WorldSpec("t-junction", 100.0, 50.0))
    (tmp_path / "t.json").write_text(dumps_graph(g))
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "grid", "source": "t.json"}))
    assert cli.main(["world", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert loads_graph((tmp_path / "o" / "world.json").read_text()) == g
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["junctions"] == 1 and metrics["edges"] == 6


def test_calibration_csv_has_one_row_per_z(tmp_path, tiny_checkpoint):
    cfg = write(tmp_path / "c.json", _cfg(world={"kind": "four-way"}, checkpoint=tiny_checkpoint.name,
                                          calibration={"z_grid": [0.5, 1, 2, 3], "n_samples": 200}))
    assert cli.main(["calibration", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "calibration.csv").read_text())))
    assert [float(r["z"]) for r in rows] == [0.5, 1.0, 2.0, 3.0]
    frac = [float(r["fraction"]) for r in rows]
    assert all(b >= a for a, b in zip(frac, frac[1:]))
    svg = (tmp_path / "o" / "calibration.svg").read_text()
    assert svg.count('class="marker"') == 3 * 4


def test_train_utility_writes_loadable_checkpoint(tmp_path):
    from topo_nav.mdn import load_checkpoint
    cfg = write(tmp_path / "c.json", _cfg(
        world={"kind": "four-way"},
        model={"size": 16, "obs_channels": [2, 4], "map_channels": 2, "route_channels": 2, "trunk": [8, 8],
               "det_hidden": 4},
        train={"n_samples": 40, "epochs": 2, "batch_size": 16}))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    model = load_checkpoint(tmp_path / "o" / "checkpoint.json")
    assert model.config.size == 16 and model.all_finite()
    hist = list(csv.DictReader(io.StringIO((tmp_path / "o" / "history.csv").read_text())))
    assert [int(r["epoch"]) for r in hist] == [0, 1, 2]


def test_drive_on_one_junction_world(tmp_path, trained_checkpoint):
    cfg = write(tmp_path / "c.json", {"experiment": "drive", "world": {"kind": "four-way", "extents": 140.0,
                                                                       "block_size": 40.0},
                                      "checkpoint": str(trained_checkpoint.resolve()), "drive": {"n_seeds": 3}})
    assert cli.main(["drive", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert m["junctions_in_world"] == 1
    assert m["route_completion"] is True
    assert isinstance(m["max_lateral_deviation_m"], float) and m["max_lateral_deviation_m"] < 2.0


EXAMPLE_CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.json"))


@pytest.mark.parametrize("path", EXAMPLE_CONFIGS, ids=lambda p: p.stem)
def test_example_configs_validate(path):
    cfg = cli.load_config(path)
    assert cfg.experiment == path.stem
