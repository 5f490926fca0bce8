"""Trajectory engine: iterate evolve -> measure -> shift and aggregate ensembles.

Each trajectory is seeded by a counter-based Philox stream keyed on
(master_seed, trajectory_index) and draws exactly one uniform per step, so a
trajectory is bit-reproducible in isolation and ensembles are invariant
under the parallelism degree: trajectories are grouped into fixed-size
batches by index (vectorized across the trailing axis of the state grid)
and aggregated in index order regardless of how many workers ran them.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .basis import DensityMatrix, ModeLayout, enumerate_basis
from .collision import (
    Homodyne,
    MeasurementError,
    MeasurementScheme,
    Photodetection,
    batch_apply_shift,
    batch_measure_homodyne,
    batch_measure_photo,
    batch_prepare_lo,
    coherent_amplitudes,
    env_tables,
)
from .model import (
    CouplingVariant,
    DrivenQubit,
    ExponentialCoupling,
    PointCoupling,
    RawCoupling,
    Squeezer,
    SystemHamiltonianSpec,
    TwoPointFeedback,
    build_coupling,
    build_interaction,
    build_system_h,
)
from .propagator import PropagatorConfig, make_step_applicator


class EngineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrajectoryConfig:
    layout: ModeLayout
    coupling: CouplingVariant
    system_h: SystemHamiltonianSpec
    scheme: MeasurementScheme
    dt: float
    n_steps: int
    master_seed: int
    observables: tuple = ("n",)
    rho_stride: int = 0  # 0 disables reduced-density-matrix recording
    initial_system: Union[str, tuple] = "excited"
    propagator: PropagatorConfig = field(default_factory=PropagatorConfig)
    batch_size: int = 0  # 0 = automatic

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if isinstance(self.scheme, Homodyne):
            if self.layout.lo_dim < 2:
                raise ValueError("homodyne detection needs lo_dim >= 2 in the layout")
        elif isinstance(self.scheme, Photodetection):
            if self.layout.lo_dim != 0:
                raise ValueError("photodetection requires lo_dim = 0")
        else:
            raise TypeError(f"unknown scheme {self.scheme!r}")
        for name in self.observables:
            if name not in _OBSERVABLE_BUILDERS:
                raise ValueError(f"unknown observable {name!r}")
        if isinstance(self.initial_system, str):
            if self.initial_system not in ("ground", "excited"):
                raise ValueError("initial_system must be 'ground', 'excited', or amplitudes")

    def to_dict(self) -> dict:
        lay = self.layout
        d = {
            "layout": {
                "system_dim": lay.system_dim,
                "env_count": lay.env_count,
                "env_cap": lay.env_cap,
                "lo_dim": lay.lo_dim,
            },
            "coupling": _coupling_to_dict(self.coupling),
            "system_h": _system_h_to_dict(self.system_h),
            "scheme": _scheme_to_dict(self.scheme),
            "dt": self.dt,
            "n_steps": self.n_steps,
            "seed": self.master_seed,
            "observables": list(self.observables),
            "rho_stride": self.rho_stride,
            "initial_system": (
                self.initial_system
                if isinstance(self.initial_system, str)
                else [[float(c.real), float(c.imag)] for c in self.initial_system]
            ),
            "propagator": {
                "method": self.propagator.method,
                "rtol": self.propagator.rtol,
                "max_substeps": self.propagator.max_substeps,
            },
            "batch_size": self.batch_size,
        }
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coupling_to_dict(c: CouplingVariant) -> dict:
    if isinstance(c, PointCoupling):
        return {"kind": "point", "rate": c.rate}
    if isinstance(c, TwoPointFeedback):
        return {"kind": "two_point_feedback", "rate": c.rate, "phase": c.phase,
                "delay_steps": c.delay_steps}
    if isinstance(c, ExponentialCoupling):
        return {"kind": "exponential", "rate": c.rate, "memory_rate": c.memory_rate}
    if isinstance(c, RawCoupling):
        return {"kind": "raw",
                "gammas": [[float(np.real(g)), float(np.imag(g))] for g in c.gammas]}
    raise TypeError(f"unknown coupling {c!r}")


def _system_h_to_dict(s: SystemHamiltonianSpec) -> dict:
    if s is None:
        return {"kind": "none"}
    if isinstance(s, DrivenQubit):
        return {"kind": "driven_qubit", "rabi": s.rabi}
    if isinstance(s, Squeezer):
        return {"kind": "squeezer", "strength": s.strength}
    raise TypeError(f"unknown system Hamiltonian {s!r}")


def _scheme_to_dict(s: MeasurementScheme) -> dict:
    if isinstance(s, Photodetection):
        return {"kind": "photodetection"}
    return {"kind": "homodyne", "amplitude": s.amplitude, "phase": s.phase}


# ---------------------------------------------------------------------------
# records

@dataclass
class StepRecord:
    time: float
    outcome: float
    observables: dict
    norm_drift: float
    rho: Optional[DensityMatrix] = None


@dataclass
class Trajectory:
    config_fingerprint: str
    index: int
    dt: float
    records: list

    @property
    def times(self) -> np.ndarray:
        return np.asarray([r.time for r in self.records])

    @property
    def outcomes(self) -> np.ndarray:
        return np.asarray([r.outcome for r in self.records])

    def observable(self, name: str) -> np.ndarray:
        return np.asarray([r.observables[name] for r in self.records])


@dataclass(frozen=True)
class CountingSpec:
    """Windowed sum of measurement eigenvalues for counting statistics."""

    burn_in: float
    window: float
    bin_width: float = 1.0
    center: float = 0.0


@dataclass
class EnsembleStats:
    times: np.ndarray
    observable_names: tuple
    means: np.ndarray       # (n_obs, n_steps)
    variances: np.ndarray   # (n_obs, n_steps), ddof=1
    n_trajectories: int
    rho_times: Optional[np.ndarray] = None
    mean_rho: Optional[np.ndarray] = None  # (n_rho, d_S, d_S)
    integrated_values: Optional[np.ndarray] = None
    histogram_edges: Optional[np.ndarray] = None
    histogram_counts: Optional[np.ndarray] = None

    def stderr(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variances, 0.0) / self.n_trajectories)


# ---------------------------------------------------------------------------
# observables on the system factor

def _number_op(dim):
    return np.diag(np.arange(dim, dtype=np.complex128))

def _quad_x(dim):
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=np.complex128)), 1)
    return a + a.conj().T

def _quad_y(dim):
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=np.complex128)), 1)
    return 1j * (a.conj().T - a)

_OBSERVABLE_BUILDERS = {"n": _number_op, "x": _quad_x, "y": _quad_y}


def _batch_expectation(grid: np.ndarray, op: np.ndarray, diag: Optional[np.ndarray]):
    if diag is not None:
        w = np.sum(np.abs(grid) ** 2, axis=(1, 2))  # (S, B)
        return diag @ w
    tmp = np.tensordot(op, grid, axes=(1, 0))
    return np.einsum("selb,selb->b", grid.conj(), tmp).real


def _batch_rho(grid: np.ndarray) -> np.ndarray:
    return np.einsum("aelb,celb->acb", grid, grid.conj())


# ---------------------------------------------------------------------------
# simulation context (built once per config, shared across batches)

class _SimContext:
    def __init__(self, config: TrajectoryConfig):
        lay = config.layout
        self.config = config
        self.enum = enumerate_basis(lay)
        self.tables = env_tables(self.enum)
        left_layout = ModeLayout(lay.system_dim, lay.env_count, lay.env_cap, 0)
        self.enum_left = enumerate_basis(left_layout)
        profile = build_coupling(config.coupling, lay.env_count, config.dt)
        h = build_interaction(self.enum_left, profile, config.dt)
        h = h + build_system_h(self.enum_left, config.system_h)
        self.h_left = h.matrix
        self.applicator = make_step_applicator(self.h_left, config.dt, config.propagator)
        self.is_homodyne = isinstance(config.scheme, Homodyne)
        if self.is_homodyne:
            beta = config.scheme.amplitude * np.sqrt(config.dt) * np.exp(1j * config.scheme.phase)
            self.coherent = coherent_amplitudes(beta, lay.lo_dim)
        else:
            self.coherent = None
        sdim = lay.system_dim
        self.obs_ops = []
        for name in config.observables:
            op = _OBSERVABLE_BUILDERS[name](sdim)
            off_diag = op - np.diag(np.diag(op))
            diag = np.diag(op).real.copy() if not off_diag.any() else None
            self.obs_ops.append((name, op, diag))
        self.initial_system = self._initial_vector()
        self.batch_size = config.batch_size or max(
            1, min(256, 4_000_000 // max(lay.total_dim, 1))
        )

    def _initial_vector(self) -> np.ndarray:
        lay = self.config.layout
        spec = self.config.initial_system
        v = np.zeros(lay.system_dim, dtype=np.complex128)
        if spec == "ground":
            v[0] = 1.0
        elif spec == "excited":
            if lay.system_dim < 2:
                raise ValueError("excited initial state needs system_dim >= 2")
            v[1] = 1.0
        else:
            arr = np.asarray([complex(c) for c in spec], dtype=np.complex128)
            if arr.shape != (lay.system_dim,):
                raise ValueError("initial_system amplitude vector has wrong length")
            nrm = np.linalg.norm(arr)
            if nrm == 0:
                raise ValueError("initial_system vector is zero")
            v = arr / nrm
        return v


@lru_cache(maxsize=4)
def _context(config: TrajectoryConfig) -> _SimContext:
    return _SimContext(config)


def _trajectory_uniforms(master_seed: int, index: int, n_steps: int) -> np.ndarray:
    key = np.array([master_seed % 2**64, index % 2**64], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random(n_steps)


@dataclass
class _BatchResult:
    indices: np.ndarray
    outcomes: np.ndarray           # (B, n_steps)
    observables: np.ndarray        # (n_obs, n_steps, B)
    norm_errors: np.ndarray        # (B,)
    rho: Optional[np.ndarray]      # (n_rho, S, S, B)
    rho_steps: Optional[np.ndarray]


def _run_batch(ctx: _SimContext, indices: Sequence[int]) -> _BatchResult:
    cfg = ctx.config
    lay = cfg.layout
    nb = len(indices)
    n_steps = cfg.n_steps
    grid = np.zeros(
        (lay.system_dim, ctx.enum.env_size, lay.lo_axis, nb), dtype=np.complex128
    )
    grid[:, 0, 0, :] = ctx.initial_system[:, None]
    uniforms = np.stack(
        [_trajectory_uniforms(cfg.master_seed, i, n_steps) for i in indices], axis=0
    )
    outcomes = np.empty((nb, n_steps))
    obs = np.empty((len(ctx.obs_ops), n_steps, nb))
    max_err = np.zeros(nb)
    rho_steps = (
        np.arange(cfg.rho_stride - 1, n_steps, cfg.rho_stride)
        if cfg.rho_stride > 0 else None
    )
    rho = (
        np.empty((rho_steps.size, lay.system_dim, lay.system_dim, nb), dtype=np.complex128)
        if rho_steps is not None else None
    )
    rho_at = {int(s): j for j, s in enumerate(rho_steps)} if rho_steps is not None else {}
    dl = lay.system_dim * ctx.enum.env_size
    cols = lay.lo_axis * nb
    try:
        for step in range(n_steps):
            if ctx.is_homodyne:
                grid = batch_prepare_lo(grid, ctx.coherent)
            grid = ctx.applicator.apply(grid.reshape(dl, cols)).reshape(grid.shape)
            if ctx.is_homodyne:
                eig, err, grid = batch_measure_homodyne(
                    grid, ctx.tables, lay.lo_dim, uniforms[:, step]
                )
            else:
                eig, err, grid = batch_measure_photo(grid, ctx.tables, uniforms[:, step])
            if err.max() > 1e-8:
                bad = int(np.argmax(err))
                raise MeasurementError(
                    f"trajectory {indices[bad]}: outcome probabilities sum to "
                    f"{1.0 + err[bad]:.12f}"
                )
            grid = batch_apply_shift(grid, ctx.tables)
            outcomes[:, step] = eig
            max_err = np.maximum(max_err, err)
            for j, (_, op, diag) in enumerate(ctx.obs_ops):
                obs[j, step] = _batch_expectation(grid, op, diag)
            if step in rho_at:
                rho[rho_at[step]] = _batch_rho(grid)
    except MeasurementError:
        raise
    except Exception as exc:  # attach trajectory indices to propagator failures
        raise EngineError(f"trajectories {list(indices)}: {exc}") from exc
    return _BatchResult(
        indices=np.asarray(indices), outcomes=outcomes, observables=obs,
        norm_errors=max_err, rho=rho, rho_steps=rho_steps,
    )


# ---------------------------------------------------------------------------
# public operations

def run_trajectory(config: TrajectoryConfig, trajectory_index: int) -> Trajectory:
    """One measurement-conditioned trajectory, deterministic in (seed, index)."""
    ctx = _context(config)
    res = _run_batch(ctx, [trajectory_index])
    records = []
    names = [n for n, _, _ in ctx.obs_ops]
    rho_lookup = {}
    if res.rho is not None:
        for j, s in enumerate(res.rho_steps):
            rho_lookup[int(s)] = DensityMatrix(matrix=np.ascontiguousarray(res.rho[j, :, :, 0]))
    for step in range(config.n_steps):
        records.append(StepRecord(
            time=(step + 1) * config.dt,
            outcome=float(res.outcomes[0, step]),
            observables={n: float(res.observables[j, step, 0]) for j, n in enumerate(names)},
            norm_drift=float(res.norm_errors[0]),
            rho=rho_lookup.get(step),
        ))
    return Trajectory(
        config_fingerprint=config.fingerprint(),
        index=trajectory_index,
        dt=config.dt,
        records=records,
    )


def _batch_ranges(n_traj: int, batch_size: int):
    return [range(lo, min(lo + batch_size, n_traj))
            for lo in range(0, n_traj, batch_size)]


_WORKER_CTX: dict = {}


def _worker_init(config: TrajectoryConfig):
    _WORKER_CTX["ctx"] = _SimContext(config)


def _worker_run(args):
    lo, hi = args
    return _run_batch(_WORKER_CTX["ctx"], range(lo, hi))


def run_ensemble(
    config: TrajectoryConfig,
    n_traj: int,
    parallelism: int = 1,
    counting: Optional[CountingSpec] = None,
) -> EnsembleStats:
    """Aggregate n_traj trajectories seeded from (master_seed, index).

    The result is independent of the parallelism degree: batch partitioning
    is fixed by trajectory index and aggregation runs in index order.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    ctx = _context(config)
    ranges = _batch_ranges(n_traj, ctx.batch_size)
    if parallelism > 1 and len(ranges) > 1:
        with ProcessPoolExecutor(
            max_workers=parallelism, initializer=_worker_init, initargs=(config,)
        ) as pool:
            results = pool.map(
                _worker_run, [(r.start, r.stop) for r in ranges], chunksize=1
            )
            return _aggregate(ctx, config, n_traj, results, counting)
    return _aggregate(
        ctx, config, n_traj, (_run_batch(ctx, r) for r in ranges), counting
    )


def _aggregate(ctx, config, n_traj, results, counting) -> EnsembleStats:
    names = tuple(n for n, _, _ in ctx.obs_ops)
    n_obs = len(names)
    n_steps = config.n_steps
    times = config.dt * np.arange(1, n_steps + 1)
    mean = np.zeros((n_obs, n_steps))
    m2 = np.zeros((n_obs, n_steps))
    rho_sum = None
    rho_steps = None
    integrated = [] if counting is not None else None
    if counting is not None:
        in_window = (times > counting.burn_in) & (times <= counting.burn_in + counting.window)
        if counting.burn_in + counting.window > n_steps * config.dt + 1e-12:
            raise ValueError("counting window exceeds the trajectory length")
    count = 0
    for res in results:
        if res.rho is not None:
            if rho_sum is None:
                rho_sum = np.zeros(res.rho.shape[:3], dtype=np.complex128)
                rho_steps = res.rho_steps
            rho_sum += res.rho.sum(axis=3)
        if integrated is not None:
            integrated.append(res.outcomes[:, in_window].sum(axis=1))
        for b in range(res.outcomes.shape[0]):  # Welford, trajectory index order
            count += 1
            x = res.observables[:, :, b]
            delta = x - mean
            mean += delta / count
            m2 += delta * (x - mean)
    if count != n_traj:
        raise EngineError(f"aggregated {count} trajectories, expected {n_traj}")
    variances = m2 / (count - 1) if count > 1 else np.zeros_like(m2)
    stats = EnsembleStats(
        times=times, observable_names=names, means=mean,
        variances=np.maximum(variances, 0.0), n_trajectories=count,
    )
    if rho_sum is not None:
        stats.rho_times = config.dt * (np.asarray(rho_steps) + 1)
        stats.mean_rho = rho_sum / count
    if integrated is not None:
        values = np.concatenate(integrated)
        stats.integrated_values = values
        edges, counts = histogram(values, counting.bin_width, counting.center)
        stats.histogram_edges = edges
        stats.histogram_counts = counts
    return stats


def integrated_record(trajectory: Trajectory, window: float, burn_in: float) -> float:
    """Sum of measurement eigenvalues with time in (burn_in, burn_in + window]."""
    t_end = trajectory.records[-1].time
    if burn_in + window > t_end + 1e-12:
        raise ValueError("window exceeds the trajectory length")
    t = trajectory.times
    mask = (t > burn_in) & (t <= burn_in + window)
    return float(trajectory.outcomes[mask].sum())


def histogram(values, bin_width: float, center: float = 0.0):
    """Uniform histogram; boundary values go to the right bin (half-open bins)."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        edges = np.array([center - bin_width / 2, center + bin_width / 2])
        return edges, np.zeros(1, dtype=np.int64)
    left0 = center - bin_width / 2
    k = np.floor((vals - left0) / bin_width).astype(np.int64)
    kmin, kmax = int(k.min()), int(k.max())
    counts = np.bincount(k - kmin, minlength=kmax - kmin + 1).astype(np.int64)
    edges = left0 + bin_width * np.arange(kmin, kmax + 2)
    return edges, counts
