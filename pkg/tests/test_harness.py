import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prmrl.core import ConfigurationError
from prmrl.harness import (
    ExperimentConfig,
    TrialResult,
    aggregate,
    build,
    config_from_dict,
    export_heatmap,
    load_config,
    percentiles,
    read_aggregate,
    render_curve_svg,
    render_heatmap_svg,
    run_experiment,
    write_heatmap_csv,
)

SMALL = "######\n#oc.m#\n#.#..#\n#h.t.#\n######\n"


@pytest.fixture
def small_map(tmp_path):
    path = tmp_path / "small.map"
    path.write_text(SMALL)
    return str(path)


def office_config(small_map, tmp_path, **kw):
    base = dict(
        env="office",
        machines=["a_r2"],
        algorithm="prme_rs",
        trials=3,
        max_training_steps=600,
        map=small_map,
        output_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_percentiles_interpolate_linearly():
    assert percentiles([[0.0], [1.0], [2.0]]).ravel().tolist() == [0.5, 1.0, 1.5]
    assert percentiles([[0.0], [1.0], [2.0], [3.0]]).ravel().tolist() == [0.75, 1.5, 2.25]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_percentiles_are_ordered(values):
    p25, med, p75 = percentiles(np.array(values)[:, None]).ravel()
    assert min(values) <= p25 <= med <= p75 <= max(values)


def test_single_trial_is_degenerate():
    t = TrialResult(0, 0, [100, 200], [0.25, 0.5], 0.0)
    steps, p25, med, p75 = aggregate([t])
    assert steps.tolist() == [100, 200]
    assert p25.tolist() == med.tolist() == p75.tolist() == [0.25, 0.5]


def test_failed_trials_are_skipped():
    ok = TrialResult(0, 0, [100], [1.0], 0.0)
    bad = TrialResult(1, 1, [], [], 0.0, error="boom")
    assert aggregate([ok, bad])[2].tolist() == [1.0]
    with pytest.raises(RuntimeError):
        aggregate([bad])


@pytest.mark.parametrize(
    "kw",
    [
        {"env": "mars"},
        {"algorithm": "sarsa"},
        {"trials": 0},
        {"machines": []},
        {"machines": ["nope"]},
        {"grid": [None, None]},
        {"env": "two_tank", "machines": ["line"]},  # tabular on a continuous env
        {"algorithm": "ddpg"},  # continuous learner on the office
        {"params": {"bogus": 1}},
        {"params": {"use_prme": False}},
        {"params": {"lam": 2.0}},
        {"map": "/no/such/file.map"},
    ],
)
def test_config_rejects(kw, tmp_path):
    data = {"env": "office", "machines": ["a_r2"], **kw}
    with pytest.raises(ConfigurationError):
        config_from_dict(data)


def test_config_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": "office", "machines": "a_r2", "algorithm": "ql"}))
    cfg = load_config(path, trials=4)
    assert cfg.trials == 4 and cfg.machines == ["a_r2"]
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(path)
    path.write_text(json.dumps({"env": "office", "machines": ["a_r2"], "extra": 1}))
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_algorithms_set_learner_flags(small_map, tmp_path):
    for algo, prme, shaping in [("ql", False, False), ("ql_rs", False, True), ("prme", True, False), ("prme_rs", True, True)]:
        p = office_config(small_map, tmp_path, algorithm=algo).learner_params()
        assert (p.use_prme, p.use_shaping) == (prme, shaping)


def test_shaping_build_sets_potentials(small_map, tmp_path):
    setup = build(office_config(small_map, tmp_path))
    assert np.any(setup.joint.potential != 0)
    plain = build(office_config(small_map, tmp_path, algorithm="prme"))
    assert np.all(plain.joint.potential == 0)


def test_run_is_reproducible_and_writes_outputs(small_map, tmp_path):
    cfg = office_config(small_map, tmp_path, policy_eval_every=300)
    a = run_experiment(cfg)
    b = run_experiment(office_config(small_map, tmp_path, output_dir=str(tmp_path / "again")), write=False)
    np.testing.assert_array_equal(a.median, b.median)
    out = tmp_path / "run"
    for name in ("metrics.csv", "metrics_aggregate.csv", "curve.svg", "run.json", "qtable_trial0.npz"):
        assert (out / name).is_file(), name
    meta = json.loads((out / "run.json").read_text())
    assert meta["percentile_method"] == "linear"
    assert meta["config"]["params"]["lam"] == 0.9
    assert meta["config"]["trials"] == 3
    assert "use_prme" not in meta["config"]["params"]
    assert meta["failed_trials"] == []
    assert set(meta["trial_runtimes"]) == {"0", "1", "2"}
    assert len(meta["trial_extras"]["0"]["policy_value"]) == 2
    assert meta["oracle"]["product_states"] > 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 6
    steps, p25, med, p75 = read_aggregate(out / "metrics_aggregate.csv")
    np.testing.assert_array_equal(med, a.median)
    steps2, _, med2, _ = read_aggregate(out / "metrics.csv")
    np.testing.assert_array_equal(steps2, steps)
    np.testing.assert_allclose(med2, med, rtol=0, atol=0)
    # the recorded config reproduces the run
    again = config_from_dict({**meta["config"], "output_dir": str(tmp_path / "third")})
    np.testing.assert_array_equal(run_experiment(again, write=False).median, a.median)


def test_parallel_matches_serial(small_map, tmp_path):
    cfg = office_config(small_map, tmp_path, trials=2, max_training_steps=300)
    serial = run_experiment(cfg, write=False)
    parallel = run_experiment(cfg, jobs=2, write=False)
    np.testing.assert_array_equal(serial.median, parallel.median)


def test_heatmap_shape_and_walls(small_map, tmp_path):
    cfg = office_config(small_map, tmp_path, trials=1)
    setup = build(cfg)
    q = np.random.default_rng(0).random((setup.env.n_keys, setup.joint.n_states, 4))
    grid = export_heatmap(q, setup.env, setup.joint, setup.prms, "q1")
    assert len(grid) == 5 and all(len(r) == 6 for r in grid)
    assert grid[0][0] is None and grid[2][2] is None
    assert all(v is not None for v in grid[1][1:5])
    with pytest.raises(ConfigurationError):
        export_heatmap(q, setup.env, setup.joint, setup.prms, "nope")
    path = tmp_path / "h.csv"
    write_heatmap_csv(grid, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    assert "<svg" in render_heatmap_svg(grid)


def test_curve_svg():
    svg = render_curve_svg(np.array([100, 200]), np.array([0.1, 0.2]), np.array([0.2, 0.3]), np.array([0.3, 0.4]), "a<b")
    assert svg.startswith("<svg") and "a&lt;b" in svg


def test_uniform_table_gives_constant_heatmap(small_map, tmp_path):
    setup = build(office_config(small_map, tmp_path, trials=1))
    q = np.full((setup.env.n_keys, setup.joint.n_states, 4), 2.0)
    values = {v for row in export_heatmap(q, setup.env, setup.joint, setup.prms, "q0") for v in row if v is not None}
    assert values == {2.0}
