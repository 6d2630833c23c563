import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscg import cli
from mscg import config as C
from mscg import experiments as X
from mscg.local_solver import ResonanceError

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 63 - 1), gamma=finite, n_quad=st.integers(1, 9),
       model=st.sampled_from(["bend", "lattice3"]), zero=st.booleans(),
       freqs=st.lists(finite, min_size=1, max_size=4))
def test_toml_round_trip(seed, gamma, n_quad, model, zero, freqs):
    cfg = C.ExperimentConfig(seed=seed)
    cfg.optimize.gamma = gamma
    cfg.optimize.n_quad = n_quad
    cfg.optimize.model = model
    cfg.uq.zero_surrogate = zero
    cfg.rb_train.frequencies = freqs
    assert C.loads(C.dumps(cfg)) == cfg


def test_unknown_and_mistyped_keys_rejected():
    with pytest.raises(C.ConfigError):
        C.loads("sed = 1")
    with pytest.raises(C.ConfigError):
        C.loads("[uq]\nM0 = 'ten'")
    with pytest.raises(C.ConfigError):
        C.loads("[uq.crystal]\nfoo = 1")
    with pytest.raises(C.ConfigError):
        C.loads("seed = [")
    assert C.loads("[uq]\nM0 = 12").uq.M0 == 12


def test_overrides():
    cfg = C.apply_overrides(C.ExperimentConfig(), ["uq.M0=7", "optimize.interval=[0.3, 0.4]",
                                                   "rb_train.file=model.bin",
                                                   "uq.crystal.h=0.05"])
    assert cfg.uq.M0 == 7
    assert cfg.optimize.interval == [0.3, 0.4]
    assert cfg.rb_train.file == "model.bin"
    assert cfg.uq.crystal.h == 0.05
    for bad in (["uq.nope=1"], ["nope.M0=1"], ["uq.M0"], ["uq.M0=1.5"]):
        with pytest.raises(C.ConfigError):
            C.apply_overrides(C.ExperimentConfig(), bad)


def test_cli_synthetic_uq_runs(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["uq", "--out", str(out), "--seed", "5", "--workers", "1",
                     "--set", "uq.model=synthetic", "--set", "uq.M0=20", "--set", "uq.M1=100"])
    assert code == 0
    saved = C.load(out / "config.toml")
    assert saved.seed == 5 and saved.uq.M0 == 20
    first = _without_timing(out / "mvr.csv")
    assert cli.main(["uq", "--config", str(out / "config.toml"), "--out", str(out)]) == 0
    assert _without_timing(out / "mvr.csv") == first


def _without_timing(path):
    rows = [line.split(",") for line in path.read_text().splitlines()]
    col = rows[0].index("seconds")
    return [r[:col] + r[col + 1:] for r in rows]


def test_cli_config_errors(tmp_path):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["uq", "--config", str(tmp_path / "missing.toml")]) == 2
    assert cli.main(["uq", "--out", str(tmp_path), "--set", "uq.bogus=1"]) == 2
    assert cli.main(["uq", "--out", str(tmp_path), "--seed", "-1"]) == 2
    assert cli.main(["uq", "--out", str(tmp_path), "--workers", "0"]) == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a model")
    assert cli.main(["uq", "--out", str(tmp_path), "--set", f"uq.rb_file='{bad}'",
                     "--set", "uq.n=3"]) == 2


def test_cli_solver_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ResonanceError("interior block singular")

    monkeypatch.setattr(X, "run_uq", boom)
    assert cli.main(["uq", "--out", str(tmp_path)]) == 3


def test_observed_orders():
    e = 3.0 * np.array([1, 1 / 4, 1 / 16])
    orders = X.observed_orders(e)
    assert np.isnan(orders[0])
    np.testing.assert_allclose(orders[1:], [2.0, 2.0])


def test_json_summary_of_lattice3_optimization(tmp_path):
    code = cli.main(["optimize", "--out", str(tmp_path), "--set", "optimize.model=lattice3",
                     "--set", "optimize.n_starts=1", "--set", "optimize.maxiter=3",
                     "--set", "optimize.frequency=0.3"])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["success"] and np.isfinite(summary["objective"])
    theta = np.loadtxt(tmp_path / "theta.txt")
    assert theta.shape == (2,)
    assert np.all((theta >= -0.127) & (theta <= 0.047))
    assert (tmp_path / "history.csv").read_text().startswith("iter")
