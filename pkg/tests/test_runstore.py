import csv
import json
import multiprocessing as mp
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqlflow import runstore
from cqlflow.agents import BracConfig, CqlConfig
from cqlflow.plotting import PlotSpec, emit_plot
from cqlflow.runlog import CheckpointRef, RunLog, config_hash

from test_workflow import RISE_FALL, make_log


# -- run logs -------------------------------------------------------------------------

def test_runlog_round_trip_and_ordering(tmp_path):
    log = make_log(RISE_FALL, oracle=np.linspace(0, 1, len(RISE_FALL)))
    path = log.write(tmp_path / "r.jsonl")
    back = RunLog.read(tmp_path / "r.jsonl")
    assert back.meta == log.meta and back.records == log.records
    log.write(tmp_path / "runlog.jsonl")
    assert RunLog.read(tmp_path).records == log.records  # a run directory resolves to its log
    assert back.to_jsonl() == path.read_text()
    with pytest.raises(ValueError):
        log.append({"step": 0})
    with pytest.raises(ValueError):
        RunLog.from_jsonl('{"step": 0}\n')
    assert isinstance(back.checkpoints[0], CheckpointRef)


@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.floats(allow_nan=False) | st.text(),
                       min_size=1, max_size=8), st.randoms())
def test_config_hash_ignores_key_order(d, rnd):
    items = list(d.items())
    rnd.shuffle(items)
    assert config_hash(dict(items)) == config_hash(d)


# -- config files ---------------------------------------------------------------------

def test_parse_config_types_comments_and_errors():
    cfg = runstore.parse_config("# comment\nalpha = 0.5   # trailing\ncritic_tier = small\nseed = 3\n")
    assert cfg == CqlConfig(alpha=0.5, critic_tier="small", seed=3)
    brac = runstore.parse_config("algo = brac\nbeta_div = 0.2\nbehavior_joint = true\n")
    assert isinstance(brac, BracConfig) and brac.behavior_joint is True
    for bad, msg in [("alpah = 1", "unknown"), ("alpha = 1\nalpha = 2", "duplicate"),
                     ("alpha 1", "key = value"), ("seed = 1.5", "cannot parse"),
                     ("alpha = -1", "alpha"), ("algo = ppo", "unknown algo"),
                     ("beta_div = 0.1", "unknown")]:
        with pytest.raises(runstore.ConfigError, match=msg):
            runstore.parse_config(bad)
    with pytest.raises(runstore.ConfigError):
        runstore.parse_config("algo = cql", "brac")


configs = st.builds(CqlConfig, alpha=st.floats(0, 100), vib_beta=st.floats(0, 1), seed=st.integers(0, 10**6),
                    critic_tier=st.sampled_from(["small", "medium", "large", "8x8"]),
                    batch_size=st.integers(1, 512), total_steps=st.integers(0, 10**5))
brac_configs = st.builds(BracConfig, beta_div=st.floats(0, 10), behavior_joint=st.booleans(),
                         dropout_p=st.floats(0, 0.9))


@given(configs | brac_configs)
@settings(max_examples=60)
def test_config_file_round_trip(cfg):
    assert runstore.parse_config(runstore.format_config(cfg)) == cfg


# -- registry -------------------------------------------------------------------------

def test_registry_ids_status_and_missing_artifacts(tmp_path):
    reg = runstore.ExperimentRegistry(tmp_path)
    a = reg.register("abcdef0123", "ds")
    b = reg.register("abcdef0123", "ds")
    assert a.run_id == "abcdef01-000" and b.run_id == "abcdef01-001"
    with pytest.raises(ValueError):
        reg.register("x", "ds", run_id=a.run_id)
    art = tmp_path / "log.jsonl"
    art.write_text("x")
    assert reg.update(a.run_id, "completed", {"runlog": str(art)}).status == "completed"
    bad = reg.update(b.run_id, "completed", {"runlog": str(tmp_path / "nope")})
    assert bad.status == "failed" and "runlog" in bad.artifacts["missing"]
    assert {e.run_id: e.status for e in reg.entries()} == {a.run_id: "completed", b.run_id: "failed"}
    with pytest.raises(KeyError):
        reg.get("missing")
    with pytest.raises(ValueError):
        reg.update(a.run_id, "paused")


def _register_many(root, tag, n):
    reg = runstore.ExperimentRegistry(root)
    for _ in range(n):
        reg.register("feedbeef00", tag)


def test_registry_concurrent_writers_get_unique_ids(tmp_path):
    ctx = mp.get_context("fork")
    procs = [ctx.Process(target=_register_many, args=(tmp_path, f"w{i}", 10)) for i in range(4)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    ids = [e.run_id for e in runstore.ExperimentRegistry(tmp_path).entries()]
    assert len(ids) == 40 and len(set(ids)) == 40


# -- plots ------------------------------------------------------------------------------

def test_plot_csv_is_byte_equal_to_log_values(tmp_path):
    rng = np.random.default_rng(0)
    a = make_log(rng.random(9) / 3.0, run_id="a")
    b = make_log(rng.random(9) * 1e-7, run_id="b")
    spec = PlotSpec([("a", "avg_dataset_q"), ("b", "avg_dataset_q"), ("a", "td_error")],
                    y_label="Q", markers=[(300, "peak")], title="t<&>")
    csv_path, svg_path = emit_plot(spec, {"a": a, "b": b}, tmp_path / "p")
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["step", "a:avg_dataset_q", "b:avg_dataset_q", "a:td_error"]
    src = {"a": [json.loads(ln) for ln in a.to_jsonl().splitlines()[1:]],
           "b": [json.loads(ln) for ln in b.to_jsonl().splitlines()[1:]]}
    raw = {"a": a.to_jsonl().splitlines()[1:], "b": b.to_jsonl().splitlines()[1:]}
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == src["a"][i]["step"]
        for cell, (rid, metric) in zip(row[1:], spec.series):
            assert f'"{metric}":{cell}' in raw[rid][i]  # same text as the JSON source
            assert float(cell) == src[rid][i][metric]
    svg = svg_path.read_text()
    assert svg.count('class="series"') == 3
    assert re.search(r'class="marker" data-step="300"', svg)
    assert "t&lt;&amp;&gt;" in svg


def test_plot_marker_position_and_refusals(tmp_path):
    log = make_log(RISE_FALL, oracle=np.zeros(len(RISE_FALL)), run_id="a")
    _, svg = emit_plot(PlotSpec([("a", "avg_dataset_q")], markers=[(0, "s"), (1200, "e")]), {"a": log},
                       tmp_path / "m")
    xs = [float(x) for x in re.findall(r'class="marker" data-step="\d+" x1="([\d.]+)"', svg.read_text())]
    from cqlflow.plotting import MARGIN, WIDTH
    assert xs == [MARGIN["left"], WIDTH - MARGIN["right"]]
    with pytest.raises(KeyError):
        emit_plot(PlotSpec([("a", "eval_return")]), {"a": log}, tmp_path / "o")
    emit_plot(PlotSpec([("a", "eval_return")], allow_oracle=True), {"a": log}, tmp_path / "o")
    with pytest.raises(KeyError):
        emit_plot(PlotSpec([("a", "nonexistent")]), {"a": log}, tmp_path / "x")
    with pytest.raises(KeyError):
        emit_plot(PlotSpec([("zz", "avg_dataset_q")]), {"a": log}, tmp_path / "x")
    with pytest.raises(ValueError):
        emit_plot(PlotSpec([]), {"a": log}, tmp_path / "x")
