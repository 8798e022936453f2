import json

import numpy as np
import pytest

from hds import runner
from hds.model import HybridEncoding, hamiltonian_at
from hds.noise import NoiseSpec
from hds.runner import (ConfigError, ExperimentConfig, RampSchedule, emit, ising_ground_sxx,
                        ising_hybrid_system, ising_tls_system, load_config, main)

TWO_PI = 2 * np.pi


def test_defaults_validate_for_every_experiment():
    for exp in runner.EXPERIMENTS:
        cfg = ExperimentConfig.default(exp)
        assert cfg.experiment == exp
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_unit_conversion():
    cfg = ExperimentConfig.from_dict({"experiment": "prep", "params": {
        "omega": {"value": 3.5, "unit": "MHz_plain"}, "coupling": {"value": 20.0, "unit": "kHz_angular_over_2pi"}}})
    assert cfg.value("omega") == 3.5
    assert abs(cfg.value("coupling") - TWO_PI * 0.02) < 1e-15
    assert abs(ExperimentConfig.default("prep").value("omega") - TWO_PI * 3.5) < 1e-14
    assert abs(ExperimentConfig.default("prep").value("phase_bound") - np.deg2rad(2)) < 1e-15


@pytest.mark.parametrize("raw, match", [
    ({"experiment": "nope"}, "unknown experiment"),
    ({"experiment": "prep", "params": {"omega": 3.5}}, "schema"),
    ({"experiment": "prep", "params": {"omega": {"value": 3.5, "unit": "GHz"}}}, "schema"),
    ({"experiment": "prep", "params": {"bogus": 1}}, "schema"),
    ({"experiment": "prep", "n_traj": 0}, "schema"),
    ({"experiment": "prep", "params": {"omega": {"value": 3.5, "unit": "us"}}}, "time"),
    ({"experiment": "prep", "dt": {"value": 0.1, "unit": "MHz_plain"}}, "time unit"),
])
def test_schema_rejections(raw, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(raw)


def test_ramp_schedule():
    r = RampSchedule(TWO_PI * 0.04, 80.0)
    assert r.g(0.0) == 0 and abs(r.h(80.0)) < 1e-15
    t = np.linspace(0, 80, 9)
    assert np.allclose(r.g(t) + r.h(t), r.a0)
    assert np.allclose(np.diff(r.g(t), 2), 0)


def test_ising_ground_state_oracle():
    assert abs(ising_ground_sxx(8, 0.0, 1.0) - 28) < 1e-9
    assert abs(ising_ground_sxx(8, 1.0, 0.0)) < 1e-12


def test_hybrid_ising_encodes_logical_model():
    n = 3
    ramp = RampSchedule(0.3, 10.0)
    tls = ising_tls_system(n, ramp, NoiseSpec())
    hyb = ising_hybrid_system(n, ramp, 5.0, NoiseSpec())
    enc = HybridEncoding(hyb.layout)
    for t in (0.0, 4.0, 10.0):
        logical = hamiltonian_at(tls, None, t).toarray()
        projected = enc.project(hamiltonian_at(hyb, None, t))
        assert np.max(np.abs(projected - logical)) < 1e-12


def _record():
    cfg = ExperimentConfig.default("residual")
    return runner.run_residual(cfg), cfg


def test_emit_and_round_trip(tmp_path):
    rec, cfg = _record()
    csv_path, json_path = emit(rec, tmp_path / "res")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "K,residual_mean,residual_stderr,residual_brute_force_mean,residual_brute_force_stderr"
    meta = json.loads(json_path.read_text())
    for key in ("params", "seed", "conventions", "version", "wall_time_s", "config"):
        assert key in meta
    assert meta["conventions"]["ou_amplitude_is_stddev"] is True
    assert load_config(json_path) == cfg
    first = csv_path.read_bytes()
    emit(_record()[0], tmp_path / "res")
    assert csv_path.read_bytes() == first


def test_emit_missing_directory_writes_nothing(tmp_path):
    rec, _ = _record()
    with pytest.raises(FileNotFoundError, match="does not exist"):
        emit(rec, tmp_path / "missing" / "res")
    assert not any(tmp_path.rglob("*.csv"))


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["residual", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "residual", "params": {"K": "x"}}))
    assert main(["residual", "--config", str(bad)]) == 2
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"experiment": "range"}))
    assert main(["residual", "--config", str(other)]) == 2
    assert main(["residual", "--out", str(tmp_path / "nodir" / "r")]) == 2
    assert "hds: error" in capsys.readouterr().err


def test_cli_threads_do_not_change_csv(tmp_path):
    cfg = tmp_path / "prep.json"
    cfg.write_text(json.dumps({"experiment": "prep", "n_traj": 8, "master_seed": 5}))
    assert main(["prep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(["prep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_cli_overrides(tmp_path):
    assert main(["prep", "--traj", "3", "--seed", "9", "--out", str(tmp_path / "p")]) in (0, 1)
    meta = json.loads((tmp_path / "p.json").read_text())
    assert meta["config"]["n_traj"] == 3 and meta["seed"] == 9


def test_zero_noise_coherence_is_flat():
    cfg = ExperimentConfig.from_dict({"experiment": "coherence", "n_traj": 2, "params": {
        "variants": ["hybrid_ds"], "rel_fluct": {"value": [0.0], "unit": "1"},
        "delta": {"value": 0.0, "unit": "MHz_angular_over_2pi"}, "phase_bound": {"value": 0.0, "unit": "deg"},
        "t_final": {"value": 10.0, "unit": "us"}}})
    rec = runner.run_coherence(cfg)
    assert np.max(np.abs(rec.means["hybrid_ds_0_f"] - 1)) < 1e-10
