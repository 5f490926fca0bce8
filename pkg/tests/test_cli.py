import json

import numpy as np
import pytest

from qcollide.cli import RunConfigError, config_from_dict, main, parse_config, run


def fig4_style_config(**overrides):
    cfg = {
        "mode": "ensemble",
        "out_dir": "out",
        "seed": 1234,
        "dt": 0.01,
        "n_steps": 50,
        "trajectories": 4,
        "layout": {"system_dim": 2, "env_count": 51, "env_cap": 2, "lo_dim": 250},
        "coupling": {"kind": "two_point_feedback", "rate": 1.0,
                     "phase": np.pi, "delay_steps": 50},
        "system_h": {"kind": "driven_qubit", "rabi": 1.0},
        "scheme": {"kind": "homodyne", "amplitude": 10.0, "phase": 0.0},
        "observables": ["n", "y"],
    }
    cfg.update(overrides)
    return cfg


def small_markov_config(out_dir, **overrides):
    cfg = {
        "mode": "ensemble",
        "out_dir": str(out_dir),
        "seed": 7,
        "dt": 0.01,
        "n_steps": 40,
        "trajectories": 12,
        "sample_trajectories": 2,
        "layout": {"system_dim": 2, "env_count": 1, "env_cap": 1, "lo_dim": 0},
        "coupling": {"kind": "point", "rate": 1.0},
        "scheme": {"kind": "photodetection"},
        "observables": ["n"],
        "counting": {"burn_in": 0.0, "window": 0.4, "bin_width": 1.0},
    }
    cfg.update(overrides)
    return cfg


def test_feedback_homodyne_config_derived_quantities(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(fig4_style_config()))
    cfg = parse_config(path)
    coupling = cfg.coupling
    assert coupling.delay_steps == 50
    assert cfg.layout.env_count == 51
    beta = cfg.scheme.amplitude * np.sqrt(cfg.trajectory_config.dt)
    assert beta == pytest.approx(1.0)


def test_missing_scheme_names_the_key(tmp_path):
    raw = fig4_style_config()
    del raw["scheme"]
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(RunConfigError, match="scheme"):
        parse_config(path)


def test_scheme_layout_consistency_rejected():
    raw = fig4_style_config(scheme={"kind": "photodetection"})
    with pytest.raises(RunConfigError, match="lo_dim"):
        config_from_dict(raw)


def test_unknown_key_rejected_with_path():
    raw = fig4_style_config()
    raw["layout"]["wibble"] = 3
    with pytest.raises(RunConfigError, match="config.layout.*wibble"):
        config_from_dict(raw)


def test_type_mismatch_names_key_and_type():
    raw = fig4_style_config(dt="fast")
    with pytest.raises(RunConfigError, match="config.dt.*number"):
        config_from_dict(raw)


def test_negative_dt_rejected():
    raw = fig4_style_config(dt=-0.01)
    with pytest.raises(RunConfigError, match="dt"):
        config_from_dict(raw)


def test_ensemble_outputs_are_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    rc1 = run(config_from_dict(small_markov_config(out1)))
    rc2 = run(config_from_dict(small_markov_config(out2)))
    assert rc1 == rc2 == 0
    for name in ("ensemble.csv", "histogram.csv", "trajectory_00000.ndjson",
                 "trajectory_00001.ndjson"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_manifest_checksums_and_round_trip(tmp_path):
    out = tmp_path / "run"
    cfg = config_from_dict(small_markov_config(out))
    assert run(cfg) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    import hashlib

    for name, digest in manifest["outputs"].items():
        actual = "sha256:" + hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert actual == digest
    echoed = config_from_dict(manifest["config"])
    assert echoed.trajectory_config == cfg.trajectory_config
    assert echoed.mode == cfg.mode
    assert echoed.counting == cfg.counting


def test_ndjson_lines_parse(tmp_path):
    out = tmp_path / "run"
    assert run(config_from_dict(small_markov_config(out))) == 0
    lines = (out / "trajectory_00000.ndjson").read_text().splitlines()
    assert len(lines) == 40
    rec = json.loads(lines[0])
    assert set(rec) == {"time", "outcome", "observables", "norm_drift"}
    assert rec["time"] == pytest.approx(0.01)
    assert "n" in rec["observables"]


def test_spectrum_mode(tmp_path):
    out = tmp_path / "spec"
    raw = {
        "mode": "spectrum",
        "out_dir": str(out),
        "dt": 0.005,
        "n_steps": 1,
        "layout": {"system_dim": 2, "env_count": 1000, "env_cap": 1, "lo_dim": 0},
        "coupling": {"kind": "exponential", "rate": 1.0, "memory_rate": 1.0},
        "scheme": {"kind": "photodetection"},
    }
    assert run(config_from_dict(raw)) == 0
    lines = (out / "spectrum.csv").read_text().splitlines()
    assert lines[0] == "omega,kappa_sq,spectral_density,lorentzian_ref"
    assert len(lines) == 1001
    cols = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    mask = np.abs(cols[:, 0]) <= 10.0
    rel = np.abs(cols[mask, 2] - cols[mask, 3]) / cols[mask, 3]
    assert rel.max() < 0.05


def test_compare_mode_against_lindblad(tmp_path):
    out = tmp_path / "cmp"
    raw = small_markov_config(out)
    raw["mode"] = "compare"
    raw["trajectories"] = 60
    raw["oracle"] = {"kind": "lindblad", "ports": 1}
    del raw["counting"]
    del raw["sample_trajectories"]
    assert run(config_from_dict(raw)) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == "time,collision_mean_n,collision_stderr_n,oracle_n,z_n"
    z = np.array([float(ln.split(",")[-1]) for ln in lines[1:]])
    assert np.abs(z).max() < 5.0


def test_oracle_mode_mcwf(tmp_path):
    out = tmp_path / "orc"
    raw = small_markov_config(out)
    raw["mode"] = "oracle"
    raw["trajectories"] = 30
    raw["oracle"] = {"kind": "mcwf_photodetection"}
    assert run(config_from_dict(raw)) == 0
    assert (out / "oracle_ensemble.csv").exists()
    assert (out / "oracle_histogram.csv").exists()


def test_trajectory_mode_writes_one_file_per_index(tmp_path):
    out = tmp_path / "traj"
    raw = small_markov_config(out, mode="trajectory", trajectories=3)
    del raw["counting"]
    assert run(config_from_dict(raw)) == 0
    files = sorted(p.name for p in out.glob("trajectory_*.ndjson"))
    assert files == [f"trajectory_{i:05d}.ndjson" for i in range(3)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == set(files)


def test_exit_code_one_for_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(fig4_style_config(mode="dance")))
    assert main([str(path)]) == 1


def test_exit_code_two_for_numerical_failure(tmp_path):
    out = tmp_path / "boom"
    raw = small_markov_config(out)
    # a local oscillator far too small for the requested amplitude
    raw["layout"]["lo_dim"] = 3
    raw["scheme"] = {"kind": "homodyne", "amplitude": 30.0, "phase": 0.0}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    assert main([str(path)]) == 2
    assert not (out / "ensemble.csv").exists()
    assert not (out / "manifest.json").exists()


def test_cli_overrides(tmp_path):
    out = tmp_path / "ovr"
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_markov_config(tmp_path / "ignored")))
    rc = main([str(path), "--seed", "99", "--out-dir", str(out),
               "--trajectories", "3", "--coupling.rate", "0.5",
               "--sample_trajectories", "0"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 99
    assert manifest["config"]["coupling"]["rate"] == 0.5
    assert manifest["config"]["trajectories"] == 3
