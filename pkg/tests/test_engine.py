import numpy as np
import pytest

from qcollide.basis import ModeLayout
from qcollide.collision import Homodyne, Photodetection
from qcollide.engine import (
    CountingSpec,
    StepRecord,
    Trajectory,
    TrajectoryConfig,
    histogram,
    integrated_record,
    run_ensemble,
    run_trajectory,
)
from qcollide.model import DrivenQubit, PointCoupling, RawCoupling, TwoPointFeedback
from qcollide.oracles import LindbladSpec, lindblad_solve


def markov_config(**overrides):
    base = dict(
        layout=ModeLayout(2, 1, 1, 0),
        coupling=PointCoupling(rate=1.0),
        system_h=None,
        scheme=Photodetection(),
        dt=0.01,
        n_steps=200,
        master_seed=99,
        observables=("n",),
    )
    base.update(overrides)
    return TrajectoryConfig(**base)


def test_config_consistency_checks():
    with pytest.raises(ValueError):
        markov_config(scheme=Homodyne(amplitude=1.0))  # needs lo_dim
    with pytest.raises(ValueError):
        markov_config(layout=ModeLayout(2, 1, 1, 16))  # photodetection with LO
    with pytest.raises(ValueError):
        markov_config(n_steps=0)
    with pytest.raises(ValueError):
        markov_config(observables=("bogus",))


def test_decoupled_excited_system_stays_put():
    cfg = markov_config(coupling=RawCoupling(gammas=(0.0,)), n_steps=50)
    traj = run_trajectory(cfg, 0)
    assert np.all(traj.outcomes == 0.0)
    np.testing.assert_allclose(traj.observable("n"), 1.0, atol=1e-10)


def test_single_emitter_clicks_at_most_once():
    cfg = markov_config(n_steps=700)
    clicks_seen = 0
    for idx in range(40):
        traj = run_trajectory(cfg, idx)
        clicks = traj.outcomes.sum()
        assert clicks in (0.0, 1.0)
        if clicks == 1.0:
            clicks_seen += 1
            after = traj.observable("n")[traj.outcomes == 1.0]
            assert after[0] == pytest.approx(0.0, abs=1e-10)
            # population stays zero after the click
            t_click = np.nonzero(traj.outcomes == 1.0)[0][0]
            np.testing.assert_allclose(
                traj.observable("n")[t_click:], 0.0, atol=1e-10
            )
    assert clicks_seen > 25  # gamma*T = 7, nearly every trajectory clicks


def test_trajectory_determinism_and_fingerprint():
    cfg = markov_config()
    t1 = run_trajectory(cfg, 7)
    t2 = run_trajectory(cfg, 7)
    assert t1.config_fingerprint == t2.config_fingerprint
    np.testing.assert_array_equal(t1.outcomes, t2.outcomes)
    np.testing.assert_array_equal(t1.observable("n"), t2.observable("n"))
    t3 = run_trajectory(cfg, 8)
    assert not np.array_equal(t1.outcomes, t3.outcomes)


def test_record_times_and_count():
    cfg = markov_config(n_steps=25)
    traj = run_trajectory(cfg, 0)
    assert len(traj.records) == 25
    np.testing.assert_allclose(traj.times, 0.01 * np.arange(1, 26))


def test_markovian_photodetection_purity_is_one():
    cfg = markov_config(n_steps=120, rho_stride=10)
    traj = run_trajectory(cfg, 3)
    purities = [r.rho.purity() for r in traj.records if r.rho is not None]
    assert len(purities) == 12
    np.testing.assert_allclose(purities, 1.0, atol=1e-8)


def test_feedback_trajectories_can_be_mixed():
    cfg = TrajectoryConfig(
        layout=ModeLayout(2, 11, 2, 0),
        coupling=TwoPointFeedback(rate=1.0, phase=np.pi, delay_steps=10),
        system_h=DrivenQubit(rabi=1.0),
        scheme=Photodetection(),
        dt=0.05,
        n_steps=60,
        master_seed=5,
        rho_stride=5,
    )
    min_purity = 1.0
    for idx in range(6):
        traj = run_trajectory(cfg, idx)
        for r in traj.records:
            if r.rho is not None:
                r.rho.validate(psd_tol=1e-8)
                min_purity = min(min_purity, r.rho.purity())
    assert min_purity < 1 - 1e-3  # in-loop ambiguity mixes the system state


def test_ensemble_of_one_equals_single_trajectory():
    cfg = markov_config(n_steps=80)
    stats = run_ensemble(cfg, 1)
    traj = run_trajectory(cfg, 0)
    np.testing.assert_array_equal(stats.means[0], traj.observable("n"))
    assert stats.n_trajectories == 1


def test_parallel_invariance():
    cfg = markov_config(n_steps=60, batch_size=8)
    counting = CountingSpec(burn_in=0.1, window=0.4, bin_width=1.0)
    serial = run_ensemble(cfg, 40, parallelism=1, counting=counting)
    parallel = run_ensemble(cfg, 40, parallelism=4, counting=counting)
    np.testing.assert_array_equal(serial.means, parallel.means)
    np.testing.assert_array_equal(serial.variances, parallel.variances)
    np.testing.assert_array_equal(serial.integrated_values, parallel.integrated_values)
    np.testing.assert_array_equal(serial.histogram_counts, parallel.histogram_counts)
    assert serial.histogram_counts.sum() == 40  # one entry per trajectory


def test_ensemble_mean_density_matrix_tracks_master_equation():
    cfg = markov_config(n_steps=100, rho_stride=20, master_seed=2024)
    n_traj = 600
    stats = run_ensemble(cfg, n_traj)
    a = np.array([[0, 1], [0, 0]], dtype=complex)
    spec = LindbladSpec(
        hamiltonian=np.zeros((2, 2)),
        collapse_ops=[a],  # rate 1 collapse
        rho0=np.diag([0.0, 1.0]).astype(complex),
        times=stats.rho_times,
    )
    oracle = lindblad_solve(spec)
    for j, rho_mean in enumerate(stats.mean_rho):
        target = oracle[j].matrix
        p = target[1, 1].real
        sigma = max(np.sqrt(p * (1 - p) / n_traj), 1e-4)
        assert abs(rho_mean[1, 1].real - p) < 3 * sigma
        assert abs(rho_mean[0, 1]) < 4 * sigma


def test_norm_drift_is_small():
    cfg = markov_config(n_steps=150)
    traj = run_trajectory(cfg, 1)
    assert max(r.norm_drift for r in traj.records) < 1e-8


def test_integrated_record_basics():
    records = [
        StepRecord(time=0.1 * (i + 1), outcome=0.0, observables={}, norm_drift=0.0)
        for i in range(10)
    ]
    traj = Trajectory(config_fingerprint="x", index=0, dt=0.1, records=records)
    assert integrated_record(traj, window=0.5, burn_in=0.2) == 0.0
    records[4].outcome = 1.0  # t = 0.5, inside (0.2, 0.7]
    assert integrated_record(traj, window=0.5, burn_in=0.2) == 1.0
    records[2].outcome = 1.0  # t = 0.3, inside
    records[1].outcome = 1.0  # t = 0.2, boundary: excluded (burn_in open)
    assert integrated_record(traj, window=0.5, burn_in=0.2) == 2.0
    with pytest.raises(ValueError):
        integrated_record(traj, window=2.0, burn_in=0.2)


def test_histogram_conventions():
    edges, counts = histogram([0.0, 0.0, 0.0], 1.0)
    assert counts.tolist() == [3]
    assert edges[0] == -0.5 and edges[1] == 0.5
    # boundary values go to the right bin
    edges, counts = histogram([0.5, 0.4999], 1.0)
    assert counts.tolist() == [1, 1]
    vals = np.random.default_rng(1).normal(size=500)
    for width in (0.3, 1.7):
        _, counts = histogram(vals, width)
        assert counts.sum() == 500
    edges, counts = histogram([], 2.0)
    assert counts.tolist() == [0]
    with pytest.raises(ValueError):
        histogram([1.0], 0.0)


def test_homodyne_engine_runs_and_prepares_lo_each_step():
    cfg = TrajectoryConfig(
        layout=ModeLayout(2, 1, 1, 16),
        coupling=PointCoupling(rate=1.0),
        system_h=None,
        scheme=Homodyne(amplitude=1.0, phase=0.0),
        dt=0.01,
        n_steps=100,
        master_seed=17,
        observables=("n", "y"),
    )
    traj = run_trajectory(cfg, 0)
    assert len(traj.records) == 100
    assert set(np.unique(traj.outcomes)).issubset({-1.0, 0.0, 1.0})
    assert max(r.norm_drift for r in traj.records) < 1e-8
    start = traj.observable("n")[0]
    assert start <= 1.0 + 1e-9
