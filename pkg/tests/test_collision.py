import numpy as np
import pytest

from qcollide.basis import ModeLayout, OccupationState, PureState, enumerate_basis
from qcollide.collision import (
    MeasurementError,
    apply_shift,
    batch_apply_shift,
    batch_measure_homodyne,
    batch_measure_photo,
    batch_prepare_lo,
    coherent_amplitudes,
    env_tables,
    homodyne_eigensystem,
    homodyne_probabilities,
    homodyne_q_matrix,
    measure_homodyne,
    measure_photo,
    photo_probabilities,
    prepare_lo,
    sample_outcome,
)
from qcollide.model import PointCoupling, build_coupling, build_interaction
from qcollide.propagator import evolve

from conftest import random_state


class _FixedUniform:
    """Stub RNG yielding a prescribed uniform draw."""

    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


# ---------------------------------------------------------------------------
# homodyne eigensystem

def test_eigensystem_counts_and_orthonormality():
    es = homodyne_eigensystem(6)
    assert es.count == 12
    gram = es.vectors.conj().T @ es.vectors
    np.testing.assert_allclose(gram, np.eye(12), atol=1e-14)


def test_eigensystem_diagonalizes_q():
    for lo in (2, 3, 7):
        es = homodyne_eigensystem(lo)
        q = homodyne_q_matrix(lo)
        np.testing.assert_allclose(
            q @ es.vectors, es.vectors * es.eigenvalues[None, :], atol=1e-13
        )


def test_q_action_on_labeled_states():
    es = homodyne_eigensystem(4)
    q = homodyne_q_matrix(4)
    plus1 = es.vectors[:, np.nonzero(es.labels == 1)[0][0]]
    np.testing.assert_allclose(q @ plus1, plus1, atol=1e-14)
    vac = np.zeros(8, dtype=complex)
    vac[0] = 1.0
    np.testing.assert_allclose(q @ vac, 0 * vac)


def test_branch_vectors_match_dense_counter_eigensolve():
    # N_plus/N_minus built from the beam-splitter combinations, d_LO = 3
    lo = 3
    b = np.kron(np.diag([1.0], 1), np.eye(lo))
    c = np.kron(np.eye(2), np.diag(np.sqrt(np.arange(1, lo, dtype=float)), 1))
    n_plus = 0.5 * (b + c).conj().T @ (b + c)
    n_minus = 0.5 * (b - c).conj().T @ (b - c)
    es = homodyne_eigensystem(lo)
    for col, label in enumerate(es.labels):
        if label == 0:
            continue
        n = abs(int(label))
        v = es.vectors[:, col]
        lam_same = (n + np.sqrt(n)) / 2
        lam_other = (n - np.sqrt(n)) / 2
        if label > 0:
            np.testing.assert_allclose(n_plus @ v, lam_same * v, atol=1e-13)
            np.testing.assert_allclose(n_minus @ v, lam_other * v, atol=1e-13)
        else:
            np.testing.assert_allclose(n_plus @ v, lam_other * v, atol=1e-13)
            np.testing.assert_allclose(n_minus @ v, lam_same * v, atol=1e-13)
    plus1 = es.vectors[:, np.nonzero(es.labels == 1)[0][0]]
    np.testing.assert_allclose(n_plus @ plus1, plus1, atol=1e-14)
    np.testing.assert_allclose(n_minus @ plus1, np.zeros(2 * lo), atol=1e-14)


def test_eigensystem_needs_two_levels():
    with pytest.raises(ValueError):
        homodyne_eigensystem(1)


# ---------------------------------------------------------------------------
# local-oscillator preparation

def test_prepare_lo_zero_amplitude_is_vacuum():
    enum = enumerate_basis(ModeLayout(2, 1, 1, 8))
    state = PureState.product_state(enum, [0.0, 1.0])
    out = prepare_lo(state, enum, 0.0)
    np.testing.assert_allclose(out.amplitudes, state.amplitudes)


def test_prepare_lo_mean_photon_number():
    enum = enumerate_basis(ModeLayout(1, 1, 0, 250))
    state = PureState.product_state(enum, [1.0])
    out = prepare_lo(state, enum, 1.0)
    grid = out.as_grid()
    mean = np.sum(np.arange(250) * np.abs(grid[0, 0, :]) ** 2)
    assert mean == pytest.approx(1.0, abs=1e-10)
    assert out.norm() == pytest.approx(1.0, abs=1e-12)


def test_prepare_lo_phase_is_carried():
    beta = 0.4 * np.exp(1j * 1.1)
    amps = coherent_amplitudes(beta, 40)
    assert np.angle(amps[1] / amps[0]) == pytest.approx(1.1)


def test_prepare_lo_truncation_leak_rejected():
    enum = enumerate_basis(ModeLayout(1, 1, 0, 4))
    state = PureState.product_state(enum, [1.0])
    with pytest.raises(ValueError):
        prepare_lo(state, enum, 3.0)


def test_prepare_lo_requires_vacuum_fiducial():
    enum = enumerate_basis(ModeLayout(1, 1, 0, 5))
    amps = np.zeros(5, dtype=complex)
    amps[2] = 1.0
    with pytest.raises(ValueError):
        prepare_lo(PureState(amps, enum), enum, 0.3)


# ---------------------------------------------------------------------------
# photodetection one-step laws

def _one_markov_step(psi_sys, rate, dt, lo_dim=0, beta=None):
    enum = enumerate_basis(ModeLayout(len(psi_sys), 1, 1, lo_dim))
    state = PureState.product_state(enum, psi_sys)
    if beta is not None:
        state = prepare_lo(state, enum, beta)
    h = build_interaction(enum, build_coupling(PointCoupling(rate=rate), 1, dt), dt)
    return enum, evolve(state, h, dt)


def test_photo_vacuum_never_clicks():
    enum = enumerate_basis(ModeLayout(2, 1, 1, 0))
    state = PureState.product_state(enum, [1 / np.sqrt(2), 1j / np.sqrt(2)])
    p0, p1 = photo_probabilities(state, enum)
    assert p1 == pytest.approx(0.0, abs=1e-15)
    outcome, after = measure_photo(state, enum, _FixedUniform(0.37))
    assert outcome.label == 0 and outcome.probability == pytest.approx(1.0)
    np.testing.assert_allclose(after.amplitudes, state.amplitudes, atol=1e-12)


def test_click_probability_first_order_in_dt():
    rate = 1.0
    for dt in (1e-2, 1e-3):
        enum, state = _one_markov_step([0.0, 1.0], rate, dt)
        _, p1 = photo_probabilities(state, enum)
        assert abs(p1 - rate * dt) <= 0.5 * (rate * dt) ** 2


def test_post_click_state_is_lowered_system():
    dt = 1e-2
    psi = np.array([0.6, 0.8j])
    enum, state = _one_markov_step(psi, 1.0, dt)
    outcome, after = measure_photo(state, enum, _FixedUniform(0.999999))  # force click
    assert outcome.label == 1
    sys_vec = after.as_grid()[:, 0, 0]
    lowered = np.array([psi[1], 0.0])
    lowered = lowered / np.linalg.norm(lowered)
    overlap = abs(np.vdot(sys_vec, lowered))
    assert overlap == pytest.approx(1.0, abs=1e-10)
    # chain qubit reset to vacuum
    assert np.abs(after.as_grid()[:, 1, :]).max() < 1e-14


def test_no_click_state_matches_weak_damping_factor():
    dt = 1e-3
    psi = np.array([0.6, 0.8j])
    enum, state = _one_markov_step(psi, 1.0, dt)
    outcome, after = measure_photo(state, enum, _FixedUniform(0.0))  # no click
    assert outcome.label == 0
    sys_vec = after.as_grid()[:, 0, 0]
    expect = (1 - dt * np.arange(2) / 2) * psi
    expect = expect / np.linalg.norm(expect)
    phase = np.vdot(expect, sys_vec)
    assert abs(phase) == pytest.approx(1.0, abs=5 * dt**1.5)


def test_markov_click_probability_quadratic_error_scaling():
    rate = 1.0
    errs = []
    for dt in (1e-2, 1e-3, 1e-4):
        enum, state = _one_markov_step([0.0, 1.0], rate, dt)
        _, p1 = photo_probabilities(state, enum)
        errs.append(abs(p1 - rate * dt))
    c_fits = [e / dt**2 for e, dt in zip(errs, (1e-2, 1e-3, 1e-4))]
    assert max(c_fits) / min(c_fits) < 1.2  # stable quadratic coefficient


# ---------------------------------------------------------------------------
# homodyne one-step laws (small alpha^2 dt regime)

def _jump_ops(alpha, theta, rate, dim):
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=complex)), 1)
    conj_amp = np.sqrt(rate) * np.exp(-1j * theta)
    j_plus = (alpha * np.eye(dim) - 1j * conj_amp * a) / np.sqrt(2)
    j_minus = (alpha * np.eye(dim) + 1j * conj_amp * a) / np.sqrt(2)
    return j_plus, j_minus


@pytest.mark.parametrize("theta", [0.0, 0.7])
def test_homodyne_vacuum_lo_outcome_zero(theta):
    enum = enumerate_basis(ModeLayout(2, 1, 1, 6))
    state = PureState.product_state(enum, [1.0, 0.0])
    labels, eigs, probs = homodyne_probabilities(state, enum)
    assert probs[-2] == pytest.approx(1.0)
    es = homodyne_eigensystem(6)
    outcome, _ = measure_homodyne(state, enum, es, _FixedUniform(0.5))
    assert outcome.label == 0 and outcome.eigenvalue == 0.0


@pytest.mark.parametrize("theta", [0.0, np.pi / 2])
def test_homodyne_one_step_probabilities_match_jump_law(theta):
    rate, dt, lo = 1.0, 1e-2, 30
    alpha = 1.0  # alpha^2 dt = 0.01 keeps the single-click expansion valid
    psi = np.array([0.8, 0.6])
    enum, state = _one_markov_step(psi, rate, dt, lo_dim=lo,
                                   beta=alpha * np.sqrt(dt) * np.exp(1j * theta))
    labels, eigs, probs = homodyne_probabilities(state, enum)
    jp, jm = _jump_ops(alpha, theta, rate, 2)
    p_plus_law = dt * np.linalg.norm(jp @ psi) ** 2
    p_minus_law = dt * np.linalg.norm(jm @ psi) ** 2
    p0_law = 1 - (alpha**2 + rate * abs(psi[1]) ** 2) * dt
    got_plus = probs[labels == 1][0]
    got_minus = probs[labels == -1][0]
    got_zero = probs[labels == 0].sum()
    assert got_plus == pytest.approx(p_plus_law, rel=0.05)
    assert got_minus == pytest.approx(p_minus_law, rel=0.05)
    assert got_zero == pytest.approx(p0_law, rel=0.05)


def test_homodyne_one_step_error_is_first_order():
    rate, lo, theta = 1.0, 40, 0.0
    psi = np.array([0.8, 0.6])
    rel_errs = []
    for dt in (1e-2, 1e-3):
        alpha = 1.0
        enum, state = _one_markov_step(psi, rate, dt, lo_dim=lo,
                                       beta=alpha * np.sqrt(dt))
        labels, _, probs = homodyne_probabilities(state, enum)
        jp, _ = _jump_ops(alpha, theta, rate, 2)
        law = dt * np.linalg.norm(jp @ psi) ** 2
        rel_errs.append(abs(probs[labels == 1][0] - law) / law)
    slope = np.log(rel_errs[0] / rel_errs[1]) / np.log(10.0)
    assert 0.9 <= slope <= 1.1


@pytest.mark.parametrize("branch", [1, -1])
def test_homodyne_conditioned_state_matches_jump_operator(branch):
    rate, dt, lo, theta = 1.0, 1e-2, 30, 0.4
    psi = np.array([0.8, 0.6])
    enum, state = _one_markov_step(psi, rate, dt, lo_dim=lo,
                                   beta=np.sqrt(dt) * np.exp(1j * theta))
    labels, eigs, probs = homodyne_probabilities(state, enum)
    es = homodyne_eigensystem(lo)
    # drive the sampler into the requested branch
    order = np.argsort(-probs)
    cum = 0.0
    u = None
    psorted = probs / probs.sum()
    cumv = np.cumsum(psorted)
    target = np.nonzero(labels == branch)[0][0]
    u = (cumv[target - 1] if target else 0.0) + 0.5 * psorted[target]
    outcome, after = measure_homodyne(state, enum, es, _FixedUniform(u))
    assert outcome.label == branch
    sys_vec = after.as_grid()[:, 0, 0]
    jp, jm = _jump_ops(1.0, theta, rate, 2)
    ref = (jp if branch == 1 else jm) @ psi
    ref = ref / np.linalg.norm(ref)
    fidelity = abs(np.vdot(ref, sys_vec)) ** 2
    assert fidelity > 1 - 1e-3
    # measured factor reset: qubit 0 and LO in vacuum
    grid = after.as_grid()
    assert np.abs(grid[:, 1, :]).max() < 1e-14
    assert np.abs(grid[:, :, 1:]).max() < 1e-14


def test_homodyne_completeness_random_states(rng):
    enum = enumerate_basis(ModeLayout(2, 3, 2, 5))
    for _ in range(20):
        state = random_state(rng, enum)
        _, _, probs = homodyne_probabilities(state, enum)
        assert probs.sum() == pytest.approx(1.0, abs=1e-10)
        assert probs.min() > -1e-15


def test_photo_completeness_random_states(rng):
    enum = enumerate_basis(ModeLayout(3, 4, 2, 0))
    for _ in range(20):
        state = random_state(rng, enum)
        p0, p1 = photo_probabilities(state, enum)
        assert p0 + p1 == pytest.approx(1.0, abs=1e-10)


def test_second_measurement_is_deterministic(rng):
    enum = enumerate_basis(ModeLayout(2, 2, 1, 4))
    es = homodyne_eigensystem(4)
    for u in (0.1, 0.6, 0.95):
        state = random_state(rng, enum)
        _, after = measure_homodyne(state, enum, es, _FixedUniform(u))
        labels, _, probs = homodyne_probabilities(after, enum)
        assert probs[-2] == pytest.approx(1.0, abs=1e-12)  # vacuum with certainty


# ---------------------------------------------------------------------------
# truncated shift

def test_shift_keeps_vacuum():
    enum = enumerate_basis(ModeLayout(2, 4, 2, 0))
    state = PureState.product_state(enum, [0.2, np.sqrt(1 - 0.04)])
    out = apply_shift(state, enum)
    np.testing.assert_allclose(out.amplitudes, state.amplitudes)


def test_shift_moves_single_excitation_down():
    enum = enumerate_basis(ModeLayout(1, 5, 1, 0))
    for n in range(1, 5):
        bits = [0] * 5
        bits[n] = 1
        state = PureState.from_occupation(enum, OccupationState(0, tuple(bits), 0))
        out = apply_shift(state, enum)
        expected_bits = [0] * 5
        expected_bits[n - 1] = 1
        expected = PureState.from_occupation(
            enum, OccupationState(0, tuple(expected_bits), 0)
        )
        np.testing.assert_array_equal(out.amplitudes, expected.amplitudes)


def test_shift_norm_preserved_and_matches_dense_oracle(rng):
    for n, cap in ((4, 2), (6, 2), (5, 1)):
        enum = enumerate_basis(ModeLayout(2, n, cap, 0))
        tabs = env_tables(enum)
        # dense permutation built directly from the definition of the
        # truncated free step: k-vector (0, k_1 .. k_{N-1}) -> (k_1 .. k_{N-1}, 0)
        dense = np.zeros((enum.total_dim, enum.total_dim))
        for i in range(enum.total_dim):
            occ = enum.occupation_of(i)
            if occ.env_bits[0] == 1:
                continue
            new_bits = tuple(occ.env_bits[1:]) + (0,)
            j = enum.index_of(OccupationState(occ.system_n, new_bits, occ.lo_n))
            dense[j, i] = 1.0
        amps = rng.normal(size=enum.total_dim) + 1j * rng.normal(size=enum.total_dim)
        grid = amps.reshape(2, enum.env_size, 1).copy()
        grid[:, tabs.e1, :] = 0.0
        amps = grid.reshape(-1)
        amps /= np.linalg.norm(amps)
        state = PureState(amps, enum)
        out = apply_shift(state, enum)
        np.testing.assert_allclose(out.amplitudes, dense @ amps, atol=1e-14)
        assert out.norm() == pytest.approx(1.0, abs=1e-14)


def test_shift_precondition_enforced():
    enum = enumerate_basis(ModeLayout(1, 3, 1, 0))
    state = PureState.from_occupation(enum, OccupationState(0, (1, 0, 0), 0))
    with pytest.raises(MeasurementError):
        apply_shift(state, enum)


# ---------------------------------------------------------------------------
# outcome sampling

def test_sample_outcome_certain():
    rng = np.random.default_rng(3)
    assert sample_outcome([1.0, 0.0, 0.0], rng) == 0


def test_sample_outcome_seeded_reproducibility():
    g1 = np.random.default_rng(42)
    g2 = np.random.default_rng(42)
    seq1 = [sample_outcome([0.5, 0.5], g1) for _ in range(50)]
    seq2 = [sample_outcome([0.5, 0.5], g2) for _ in range(50)]
    assert seq1 == seq2
    assert len(set(seq1)) == 2  # both outcomes actually occur


def test_sample_outcome_frequencies(rng):
    p = np.array([0.2, 0.5, 0.3])
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        counts[sample_outcome(p, rng)] += 1
    for k in range(3):
        sigma = np.sqrt(n * p[k] * (1 - p[k]))
        assert abs(counts[k] - n * p[k]) < 4 * sigma


def test_sample_outcome_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(MeasurementError):
        sample_outcome([0.7, 0.2], rng)  # sums to 0.9
    with pytest.raises(MeasurementError):
        sample_outcome([1.1, -0.1], rng)
    assert sample_outcome([1.0 + 5e-13, -5e-13], rng) == 0  # clamped negative


# ---------------------------------------------------------------------------
# batched kernels agree with the single-state reference path

def test_batched_photo_matches_reference(rng):
    enum = enumerate_basis(ModeLayout(2, 4, 2, 0))
    tabs = env_tables(enum)
    nb = 10
    states = [random_state(rng, enum) for _ in range(nb)]
    u = rng.random(nb)
    grid = np.stack([s.as_grid() for s in states], axis=-1)
    eig, err, new = batch_measure_photo(grid.copy(), tabs, u)
    for b, s in enumerate(states):
        outcome, after = measure_photo(s, enum, _FixedUniform(u[b]))
        assert outcome.eigenvalue == eig[b]
        np.testing.assert_allclose(new[..., b].reshape(-1), after.amplitudes, atol=1e-12)


def test_batched_homodyne_matches_reference(rng):
    enum = enumerate_basis(ModeLayout(2, 3, 2, 4))  # includes cap-edge sectors
    tabs = env_tables(enum)
    es = homodyne_eigensystem(4)
    nb = 12
    states = [random_state(rng, enum) for _ in range(nb)]
    u = rng.random(nb)
    grid = np.stack([s.as_grid() for s in states], axis=-1)
    eig, err, new = batch_measure_homodyne(grid.copy(), tabs, 4, u)
    for b, s in enumerate(states):
        outcome, after = measure_homodyne(s, enum, es, _FixedUniform(u[b]))
        assert outcome.eigenvalue == pytest.approx(eig[b], abs=0)
        np.testing.assert_allclose(new[..., b].reshape(-1), after.amplitudes, atol=1e-12)


def test_batched_shift_and_prepare_match_reference(rng):
    enum = enumerate_basis(ModeLayout(2, 3, 1, 8))
    tabs = env_tables(enum)
    nb = 6
    beta = 0.4 * np.exp(0.3j)
    vac_states = []
    for _ in range(nb):
        amps = np.zeros(enum.total_dim, dtype=complex)
        grid = amps.reshape(2, enum.env_size, 8)
        g = rng.normal(size=(2, enum.env_size)) + 1j * rng.normal(size=(2, enum.env_size))
        grid[:, :, 0] = g
        grid[:, tabs.e1, 0] = 0.0
        amps /= np.linalg.norm(amps)
        vac_states.append(PureState(amps.copy(), enum))
    grid = np.stack([s.as_grid() for s in vac_states], axis=-1)
    shifted = batch_apply_shift(grid, tabs)
    prepared = batch_prepare_lo(shifted, coherent_amplitudes(beta, 8))
    for b, s in enumerate(vac_states):
        ref = prepare_lo(apply_shift(s, enum), enum, beta)
        np.testing.assert_allclose(
            prepared[..., b].reshape(-1), ref.amplitudes, atol=1e-12
        )
