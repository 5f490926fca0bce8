"""Independent reference solvers used to validate the collision engine.

Nothing here touches the chain representation: the conventional jump
unravelings act on the bare system, the master-equation solver propagates a
dense density matrix, the single-excitation integrator solves the full
system-plus-modes Schrodinger equation with exact mode phases (no step
splitting, no measurement), and the delay equation is calibrated against
that integrator rather than trusting any amplitude convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

from .basis import DensityMatrix, SparseOperator
from .engine import EnsembleStats, StepRecord, Trajectory, CountingSpec, histogram
from .model import CouplingProfile, DrivenQubit, Squeezer, SystemHamiltonianSpec


class OracleError(RuntimeError):
    pass


class CalibrationError(OracleError):
    """Delay-equation coefficients failed to reproduce the full-mode solution."""


def _lowering(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=np.complex128)), 1)


def dense_system_h(spec: SystemHamiltonianSpec, dim: int) -> np.ndarray:
    a = _lowering(dim)
    if spec is None:
        return np.zeros((dim, dim), dtype=np.complex128)
    if isinstance(spec, DrivenQubit):
        return spec.rabi * (a + a.conj().T)
    if isinstance(spec, Squeezer):
        ad = a.conj().T
        return 1j * spec.strength * (ad @ ad - a @ a)
    raise TypeError(f"unknown system Hamiltonian spec {spec!r}")


def _initial_vector(dim: int, initial) -> np.ndarray:
    v = np.zeros(dim, dtype=np.complex128)
    if initial == "ground":
        v[0] = 1.0
    elif initial == "excited":
        v[1] = 1.0
    else:
        arr = np.asarray(initial, dtype=np.complex128)
        v = arr / np.linalg.norm(arr)
    return v


# ---------------------------------------------------------------------------
# conventional jump unravelings (Markovian, bare system)

@dataclass(frozen=True)
class McwfConfig:
    system_dim: int
    system_h: SystemHamiltonianSpec
    rate: float
    dt: float
    n_steps: int
    master_seed: int
    initial: object = "excited"
    observables: tuple = ()
    # homodyne only
    amplitude: float = 0.0
    phase: float = 0.0


_OBS_DENSE = {
    "n": lambda d: np.diag(np.arange(d, dtype=np.complex128)),
    "x": lambda d: _lowering(d) + _lowering(d).conj().T,
    "y": lambda d: 1j * (_lowering(d).conj().T - _lowering(d)),
}


def _mcwf_batch(cfg: McwfConfig, indices, homodyne: bool):
    d = cfg.system_dim
    a = _lowering(d)
    num = a.conj().T @ a
    h_s = dense_system_h(cfg.system_h, d)
    if homodyne:
        if (cfg.amplitude**2 + cfg.rate * (d - 1)) * cfg.dt > 0.5:
            raise OracleError("time step too coarse for the homodyne jump expansion")
        gamma_amp = np.sqrt(cfg.rate) * np.exp(-1j * cfg.phase)
        j_plus = (cfg.amplitude * np.eye(d) - 1j * gamma_amp * a) / np.sqrt(2)
        j_minus = (cfg.amplitude * np.eye(d) + 1j * gamma_amp * a) / np.sqrt(2)
        m0 = (np.eye(d) - 1j * cfg.dt * h_s
              - 0.5 * cfg.dt * (cfg.amplitude**2 * np.eye(d) + cfg.rate * num))
    else:
        rabi = getattr(cfg.system_h, "rabi", 0.0) or 0.0
        if cfg.dt * (cfg.rate + abs(rabi)) > 0.1:
            raise OracleError("time step too coarse for the jump expansion")
        m0 = np.eye(d) - 1j * cfg.dt * h_s - 0.5 * cfg.dt * cfg.rate * num
    nb = len(indices)
    psi = np.tile(_initial_vector(d, cfg.initial)[:, None], (1, nb))
    uniforms = np.stack([
        np.random.Generator(np.random.Philox(
            key=np.array([cfg.master_seed % 2**64, i % 2**64], dtype=np.uint64)
        )).random(cfg.n_steps) for i in indices
    ])
    outcomes = np.empty((nb, cfg.n_steps))
    ops = [(name, _OBS_DENSE[name](d)) for name in cfg.observables]
    obs = np.empty((len(ops), cfg.n_steps, nb))
    for step in range(cfg.n_steps):
        u = uniforms[:, step]
        new = np.empty_like(psi)
        if homodyne:
            jp = j_plus @ psi
            jm = j_minus @ psi
            pp = cfg.dt * np.sum(np.abs(jp) ** 2, axis=0)
            pm = cfg.dt * np.sum(np.abs(jm) ** 2, axis=0)
            if (pp + pm).max() > 0.5:
                raise OracleError("time step too coarse: P+ + P- exceeds 0.5")
            plus = u < pp
            minus = (~plus) & (u < pp + pm)
            none = ~(plus | minus)
            new[:, plus] = jp[:, plus]
            new[:, minus] = jm[:, minus]
            new[:, none] = m0 @ psi[:, none]
            outcomes[:, step] = np.where(plus, 1.0, np.where(minus, -1.0, 0.0))
        else:
            ap = a @ psi
            p1 = cfg.rate * cfg.dt * np.sum(np.abs(ap) ** 2, axis=0)
            click = u < p1
            new[:, click] = ap[:, click]
            new[:, ~click] = m0 @ psi[:, ~click]
            outcomes[:, step] = click.astype(float)
        nrm = np.linalg.norm(new, axis=0)
        if np.any(nrm == 0.0):
            raise OracleError("jump collapse annihilated a state")
        psi = new / nrm[None, :]
        for j, (_, op) in enumerate(ops):
            obs[j, step] = np.einsum("ib,ij,jb->b", psi.conj(), op, psi).real
    return outcomes, obs


def _mcwf_trajectory(cfg: McwfConfig, index: int, homodyne: bool) -> Trajectory:
    outcomes, obs = _mcwf_batch(cfg, [index], homodyne)
    records = []
    for step in range(cfg.n_steps):
        records.append(StepRecord(
            time=(step + 1) * cfg.dt,
            outcome=float(outcomes[0, step]),
            observables={name: float(obs[j, step, 0])
                         for j, name in enumerate(cfg.observables)},
            norm_drift=0.0,
        ))
    tag = "mcwf-homodyne" if homodyne else "mcwf-photodetection"
    return Trajectory(config_fingerprint=tag, index=index, dt=cfg.dt, records=records)


def mcwf_photodetection(cfg: McwfConfig, index: int = 0) -> Trajectory:
    """Conventional direct-photodetection unraveling of a single decay port."""
    return _mcwf_trajectory(cfg, index, homodyne=False)


def mcwf_homodyne(cfg: McwfConfig, index: int = 0) -> Trajectory:
    """Conventional finite-local-oscillator homodyne unraveling."""
    return _mcwf_trajectory(cfg, index, homodyne=True)


def mcwf_ensemble(cfg: McwfConfig, n_traj: int, homodyne: bool,
                  counting: Optional[CountingSpec] = None,
                  batch_size: int = 256) -> EnsembleStats:
    """Ensemble statistics of the conventional unraveling (index-seeded)."""
    times = cfg.dt * np.arange(1, cfg.n_steps + 1)
    n_obs = len(cfg.observables)
    mean = np.zeros((n_obs, cfg.n_steps))
    m2 = np.zeros((n_obs, cfg.n_steps))
    integrated = [] if counting is not None else None
    if counting is not None:
        in_window = (times > counting.burn_in) & \
                    (times <= counting.burn_in + counting.window)
    count = 0
    for lo in range(0, n_traj, batch_size):
        idx = range(lo, min(lo + batch_size, n_traj))
        outcomes, obs = _mcwf_batch(cfg, idx, homodyne)
        if integrated is not None:
            integrated.append(outcomes[:, in_window].sum(axis=1))
        for b in range(len(idx)):
            count += 1
            delta = obs[:, :, b] - mean
            mean += delta / count
            m2 += delta * (obs[:, :, b] - mean)
    variances = m2 / (count - 1) if count > 1 else np.zeros_like(m2)
    stats = EnsembleStats(
        times=times, observable_names=tuple(cfg.observables), means=mean,
        variances=np.maximum(variances, 0.0), n_trajectories=count,
    )
    if integrated is not None:
        values = np.concatenate(integrated)
        stats.integrated_values = values
        edges, counts = histogram(values, counting.bin_width, counting.center)
        stats.histogram_edges = edges
        stats.histogram_counts = counts
    return stats


# ---------------------------------------------------------------------------
# Lindblad master equation (dense, vectorized RHS)

@dataclass
class LindbladSpec:
    hamiltonian: np.ndarray
    collapse_ops: list
    rho0: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        def dense(x):
            return x.to_dense() if isinstance(x, SparseOperator) else np.asarray(
                x, dtype=np.complex128)
        self.hamiltonian = dense(self.hamiltonian)
        self.collapse_ops = [dense(c) for c in self.collapse_ops]
        self.rho0 = dense(self.rho0)
        self.times = np.asarray(self.times, dtype=float)
        d = self.hamiltonian.shape[0]
        if self.rho0.shape != (d, d):
            raise ValueError("rho0 dimension mismatch")
        for c in self.collapse_ops:
            if c.shape != (d, d):
                raise ValueError("collapse operator dimension mismatch")


def lindblad_solve(spec: LindbladSpec, rtol: float = 1e-10,
                   check_tol: float = 1e-8) -> list:
    """rho(t) at the requested times; trace and positivity are checked."""
    h = spec.hamiltonian
    d = h.shape[0]
    cs = [(c, c.conj().T, c.conj().T @ c) for c in spec.collapse_ops]

    def rhs(_t, y):
        rho = y.reshape(d, d)
        drho = -1j * (h @ rho - rho @ h)
        for c, cd, cdc in cs:
            drho += c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)
        return drho.ravel()

    # hit every output time as an integration endpoint: the interpolant of a
    # high-order explicit step can wiggle above the positivity tolerance in
    # stiff (large memory-rate) cases
    y = spec.rho0.ravel().astype(complex)
    t_prev = 0.0
    snapshots = []
    for t in spec.times:
        if t > t_prev:
            sol = solve_ivp(rhs, (t_prev, float(t)), y, method="DOP853",
                            rtol=rtol, atol=rtol * 1e-2)
            if not sol.success:
                raise OracleError(f"master-equation integration failed: {sol.message}")
            y = sol.y[:, -1]
            t_prev = float(t)
        snapshots.append(y.copy())
    out = []
    for j in range(spec.times.size):
        rho = snapshots[j].reshape(d, d)
        tr = np.trace(rho)
        if abs(tr - 1.0) > check_tol:
            raise OracleError(f"trace drifted to {tr!r}")
        if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -check_tol:
            raise OracleError("positivity violated beyond tolerance")
        out.append(DensityMatrix(matrix=rho))
    return out


# ---------------------------------------------------------------------------
# pseudomode mapping for the exponential memory

def jc_pseudomode(rate: float, memory_rate: float, rabi: float,
                  cavity_levels: int, times) -> LindbladSpec:
    """Driven qubit coupled to a damped cavity reproducing the exponential memory.

    Kernel matching fixes the pair: g^2 e^{-(kappa/2)|t|} = (rate*memory_rate/2)
    e^{-memory_rate |t|}  =>  g = sqrt(rate*memory_rate/2), kappa = 2*memory_rate.
    """
    if rate <= 0 or memory_rate <= 0:
        raise ValueError("rate and memory_rate must be > 0")
    if cavity_levels < 2:
        raise ValueError("cavity needs at least 2 levels")
    g = np.sqrt(rate * memory_rate / 2.0)
    kappa = 2.0 * memory_rate
    sm = _lowering(2)
    c = _lowering(cavity_levels)
    idq = np.eye(2)
    idc = np.eye(cavity_levels)
    h = (rabi * np.kron(sm + sm.conj().T, idc)
         + g * (np.kron(sm.conj().T, c) + np.kron(sm, c.conj().T)))
    collapse = [np.sqrt(kappa) * np.kron(idq, c)]
    dim = 2 * cavity_levels
    rho0 = np.zeros((dim, dim), dtype=np.complex128)
    excited = 1 * cavity_levels + 0  # |e, 0>
    rho0[excited, excited] = 1.0
    return LindbladSpec(hamiltonian=h, collapse_ops=collapse, rho0=rho0,
                        times=np.asarray(times, dtype=float))


def qubit_population(rho: DensityMatrix, cavity_levels: int) -> float:
    """Excited-qubit probability of a qubit (x) cavity density matrix."""
    m = rho.matrix.reshape(2, cavity_levels, 2, cavity_levels)
    return float(np.einsum("cc->", m[1, :, 1, :]).real)


# ---------------------------------------------------------------------------
# single-excitation full-mode integrator (exact mode phases)

def single_excitation_schrodinger(profile: CouplingProfile, dt: float, horizon: float,
                                  times: Optional[np.ndarray] = None,
                                  ring_length: Optional[int] = None):
    """Excited-state amplitude c(t) of the full chain model, one excitation.

    The mode ring is zero-padded past the coupling support so the emitted
    field cannot wrap back within the horizon; passing an explicit
    ring_length that cannot hold the horizon raises OracleError.
    """
    g = profile.gammas
    support = int(np.max(np.nonzero(np.abs(g) > 0)[0])) if np.any(g) else 0
    needed = int(np.ceil((horizon + (support + 2) * dt) / dt)) + 16
    n_ring = needed if ring_length is None else int(ring_length)
    if horizon > n_ring * dt:
        raise OracleError(
            f"ring of {n_ring} modes spans {n_ring * dt:.3f} < horizon {horizon:.3f}: "
            "the emitted field wraps around"
        )
    if n_ring < g.size:
        raise OracleError("ring_length shorter than the coupling profile")
    padded = np.zeros(n_ring, dtype=np.complex128)
    padded[: g.size] = g
    length = n_ring * dt
    k = np.arange(n_ring)
    om = 2 * np.pi * k / length
    om = np.where(k > n_ring // 2, om - 2 * np.pi / dt, om)
    kap = (n_ring / np.sqrt(length)) * np.fft.ifft(padded)
    h = np.zeros((n_ring + 1, n_ring + 1), dtype=np.complex128)
    h[0, 1:] = kap
    h[1:, 0] = kap.conj()
    # mode energies -w_k: the free step e^{-i H_E dt} then shifts chain
    # excitations one site toward the detector
    h[np.arange(1, n_ring + 1), np.arange(1, n_ring + 1)] = -om
    lam, v = np.linalg.eigh(h)
    w = (v[0, :] * v[0, :].conj()).real
    if times is None:
        times = np.linspace(0.0, horizon, 501)
    times = np.asarray(times, dtype=float)
    c = np.empty(times.size, dtype=np.complex128)
    chunk = max(1, 10_000_000 // (n_ring + 1))
    for lo in range(0, times.size, chunk):
        tt = times[lo: lo + chunk]
        c[lo: lo + chunk] = np.exp(-1j * np.outer(tt, lam)) @ w
    return times, c


# ---------------------------------------------------------------------------
# delay differential equation for two-point feedback

@dataclass(frozen=True)
class DDESpec:
    rate: float          # decay rate per coupling port
    phase: float
    delay: float
    horizon: float
    step: float

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.delay > 0 and self.step > self.delay / 10:
            raise ValueError("step must be <= delay/10")
        if self.horizon <= 0 or self.step <= 0:
            raise ValueError("horizon and step must be > 0")


@dataclass(frozen=True)
class DDECoefficients:
    gamma0: float
    gamma_fb: float
    max_rel_err: float = 0.0


def _integrate_dde(gamma0: float, gamma_fb: float, phase: float, delay: float,
                   horizon: float, step: float, times: np.ndarray) -> np.ndarray:
    """c' = -gamma0 c - gamma_fb e^{i phase} c(t - delay) for t > delay."""
    fb = gamma_fb * np.exp(1j * phase)
    if delay == 0.0:
        return np.exp(-(gamma0 + fb) * times)
    segments = []  # (t_start, t_end, dense interpolant)

    def history(t):
        if t <= 0.0:
            return 1.0 + 0.0j
        for t0, t1, interp in segments:
            if t0 - 1e-12 <= t <= t1 + 1e-12:
                return complex(interp(np.clip(t, t0, t1))[0])
        raise OracleError(f"no stored history at t = {t}")

    t_edge = 0.0
    c_edge = 1.0 + 0.0j
    while t_edge < horizon - 1e-12:
        t_next = min(t_edge + delay, horizon)

        def rhs(t, y):
            d = history(t - delay) if t > delay else 0.0
            return -gamma0 * y - fb * d

        sol = solve_ivp(rhs, (t_edge, t_next), np.array([c_edge], dtype=complex),
                        method="DOP853", rtol=1e-10, atol=1e-12,
                        max_step=step, dense_output=True)
        if not sol.success:
            raise OracleError(f"delay-equation integration failed: {sol.message}")
        segments.append((t_edge, t_next, sol.sol))
        t_edge = t_next
        c_edge = complex(sol.y[0, -1])
    out = np.empty(times.size, dtype=np.complex128)
    for j, t in enumerate(times):
        out[j] = 1.0 + 0.0j if t <= 0 else history(t)
    return out


def calibrate_feedback_dde(spec: DDESpec, oracle_dt: Optional[float] = None,
                           tol: float = 0.01) -> DDECoefficients:
    """Fit (gamma0, gamma_fb) against the full-mode single-excitation solution.

    Raises CalibrationError if the fitted delay equation misses the full-mode
    amplitude by more than tol (relative to the amplitude scale).
    """
    if spec.delay <= 0:
        raise ValueError("calibration needs a positive delay")
    dt = oracle_dt or min(spec.delay / 100.0, 0.01 / max(spec.rate, 1e-12))
    m = max(1, round(spec.delay / dt))
    dt = spec.delay / m
    gammas = np.zeros(m + 1, dtype=np.complex128)
    gammas[0] = np.sqrt(spec.rate) * np.exp(1j * spec.phase)
    gammas[m] = np.sqrt(spec.rate)
    profile = CouplingProfile(gammas=gammas, variant=None, dt=dt)
    times = np.linspace(0.0, spec.horizon, 401)
    _, c_ref = single_excitation_schrodinger(profile, dt, spec.horizon, times=times)
    scale = np.abs(c_ref).max()

    def residual(x):
        c = _integrate_dde(x[0], x[1], spec.phase, spec.delay, spec.horizon,
                           spec.step, times)
        d = (c - c_ref) / scale
        return np.concatenate([d.real, d.imag])

    fit = least_squares(residual, x0=[spec.rate, spec.rate],
                        bounds=([0.0, 0.0], [np.inf, np.inf]),
                        xtol=1e-12, ftol=1e-12, gtol=1e-12)
    err = float(np.abs(residual(fit.x)).max())
    if err > tol:
        raise CalibrationError(
            f"calibrated delay equation misses the full-mode oracle by {err:.3%}"
        )
    return DDECoefficients(gamma0=float(fit.x[0]), gamma_fb=float(fit.x[1]),
                           max_rel_err=err)


def feedback_dde(spec: DDESpec, coefficients: Optional[DDECoefficients] = None,
                 times: Optional[np.ndarray] = None):
    """Amplitude series of the calibrated feedback delay equation."""
    if times is None:
        times = np.linspace(0.0, spec.horizon, 501)
    times = np.asarray(times, dtype=float)
    if coefficients is None:
        if spec.delay == 0.0:
            coefficients = DDECoefficients(gamma0=spec.rate, gamma_fb=spec.rate)
        else:
            coefficients = calibrate_feedback_dde(spec)
    c = _integrate_dde(coefficients.gamma0, coefficients.gamma_fb, spec.phase,
                       spec.delay, spec.horizon, spec.step, times)
    return times, c
