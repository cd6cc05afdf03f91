import json
import math

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.experiment_cli import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    dump_config,
    main,
    parse_config,
    report,
    run_experiment,
)


def _write(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, {"kind": "invariant-measure"}))
    assert cfg.replicas == 1000 and cfg.seed == 0
    assert cfg.environment.model == "nearest_neighbor"


def test_json_configs(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"kind": "coefficients", "options": {"which": "gamma"}}))
    assert parse_config(p).options == {"which": "gamma"}


@pytest.mark.parametrize("data,key", [
    ({"kind": "qvf", "bogus": 1}, "bogus"),
    ({"kind": "qvf", "environment": {"dd": 2}}, "environment.dd"),
    ({"kind": "qvf", "options": {"nope": 1}}, "options.nope"),
    ({"replicas": 3}, "kind"),
])
def test_bad_keys_named(data, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(data)


def test_scaling_error_surfaced():
    with pytest.raises(ConfigError, match="regime=C, d=3"):
        config_from_dict({"kind": "qvf", "environment": {"d": 3}, "scaling": {"regime": "C"}})


@given(seed=st.integers(0, 2**64 - 1), reps=st.integers(1, 10**6), d=st.integers(1, 3),
       grid=st.lists(st.integers(10, 10**7), min_size=1, max_size=4))
def test_round_trip(seed, reps, d, grid):
    cfg = config_from_dict({"kind": "erdos-taylor", "seed": seed, "replicas": reps, "environment": {"d": d},
                            "scaling": {"n_grid": grid}, "tolerances": {"relative": 0.2}})
    again = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert again.digest() == cfg.digest()


def _small(tmp_path, seed=0, reps=200):
    return config_from_dict({"kind": "local-time-d1", "seed": seed, "replicas": reps, "out": str(tmp_path),
                             "environment": {"model": "simple_random_walk", "composite_steps": 2},
                             "scaling": {"n_grid": [2000]}, "tolerances": {"relative": 0.5, "slope": 0.5}})


def test_deterministic_csv(tmp_path):
    _, _, a = run_experiment(_small(tmp_path))
    _, _, b = run_experiment(_small(tmp_path))
    assert a != b
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert len(set(man["replica_seeds"])) == 200


def test_stderr_shrinks_with_replicas(tmp_path):
    _, r1, _ = run_experiment(_small(tmp_path, reps=1000))
    _, r2, _ = run_experiment(_small(tmp_path, reps=2000))
    ratio = r2[0].stderr / r1[0].stderr
    assert abs(ratio - 1 / math.sqrt(2)) < 0.2 / math.sqrt(2)


def test_n_grid_gives_one_row_per_n(tmp_path):
    cfg = config_from_dict({"kind": "erdos-taylor", "replicas": 100, "out": str(tmp_path),
                            "environment": {"model": "simple_random_walk", "d": 2},
                            "scaling": {"n_grid": [1000, 4000]}})
    _, reps, run = run_experiment(cfg)
    rows = (run / "data.csv").read_text().splitlines()
    assert rows[0].startswith("kind,name,N,verdict")
    assert [r.split(",")[2] for r in rows[1:]] == ["1000", "4000"]


def test_report_pooling(tmp_path):
    _, r1, a = run_experiment(_small(tmp_path, seed=1))
    _, r2, b = run_experiment(_small(tmp_path, seed=2))
    agg = report([a, b])
    w1, w2 = r1[0].stderr ** -2, r2[0].stderr ** -2
    pooled = (w1 * r1[0].estimate + w2 * r2[0].estimate) / (w1 + w2)
    assert agg["pooled"][0]["estimate"] == pytest.approx(pooled)
    assert agg["pooled"][0]["stderr"] == pytest.approx((w1 + w2) ** -0.5)
    assert report([a])["pooled"][0]["estimate"] == pytest.approx(r1[0].estimate)


def test_report_refuses_conflicts(tmp_path):
    _, _, a = run_experiment(_small(tmp_path, reps=200))
    _, _, b = run_experiment(_small(tmp_path, reps=300))
    with pytest.raises(ConfigError, match="replicas"):
        report([a, b])


def test_module_error_recorded(tmp_path):
    cfg = config_from_dict({"kind": "erdos-taylor", "replicas": 10, "out": str(tmp_path)})
    man, reps, run = run_experiment(cfg)
    assert man.status == "error" and "two-dimensional" in man.error
    assert json.loads((run / "summary.json").read_text())["all_pass"] is False


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["invariant-measure", "--out", str(tmp_path), "--replicas", "200"]) == 0
    assert main(["erdos-taylor", "--out", str(tmp_path), "--replicas", "10"]) == 1
    cfg = _write(tmp_path, {"kind": "qvf", "whatever": 1})
    assert main(["qvf", "--config", str(cfg)]) == 2


def test_cli_flags_override_config(tmp_path):
    cfg = _write(tmp_path, {"kind": "coefficients", "options": {"which": "gamma"}, "seed": 3})
    assert main(["coefficients", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    run = next((tmp_path / "o").iterdir())
    assert yaml.safe_load((run / "config.yaml").read_text())["seed"] == 9
