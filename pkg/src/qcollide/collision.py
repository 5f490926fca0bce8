"""Simulated measurement of the zeroth chain qubit and the truncated shift.

One collision step, after the coherent evolution, measures the zeroth
environment qubit (photodetection) or the joint qubit + local-oscillator
observable Q = C_dag B + B_dag C (homodyne), projects, resets the measured
factor to the vacuum fiducial state, and finally shifts every chain
excitation one site toward the detector:

    (k_{N-1}, ..., k_1, 0)  ->  (0, k_{N-1}, ..., k_1)

implemented as an index permutation, never as a matrix.

Q has eigenvectors |n,+-> = (|0,n> +- |1,n-1>)/sqrt(2) with eigenvalues
+-sqrt(n); its zero eigenspace is spanned by the joint vacuum |0,0> and the
truncation-edge ket |1, d_LO-1>.  The zero outcome is degenerate, so it is
measured with a projective refinement onto those basis kets (each then reset
to vacuum); the refinement only matters at the level of the astronomically
small edge weight.  Chain states whose excitation number already sits at the
cap have no |k_0=1> partner inside the basis; their Q weight splits evenly
between the + and - branches exactly as the uncapped eigenvectors dictate,
and the projected component is recorded under the sampled branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .basis import BasisEnumeration, PureState

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class Photodetection:
    """Detect the excitation number of the zeroth chain qubit."""


@dataclass(frozen=True)
class Homodyne:
    """Mix the zeroth qubit with a local oscillator of amplitude alpha e^{i theta}.

    amplitude has units sqrt(rate); the oscillator is re-prepared each step in
    the coherent state with parameter alpha sqrt(dt) e^{i theta}.
    """

    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


MeasurementScheme = Union[Photodetection, Homodyne]


@dataclass(frozen=True)
class MeasurementOutcome:
    label: int  # click count for photodetection; signed n (or 0) for homodyne
    eigenvalue: float
    probability: float


class MeasurementError(RuntimeError):
    """Outcome probabilities failed a completeness or precondition check."""


# ---------------------------------------------------------------------------
# enumeration-derived index tables

@dataclass(frozen=True)
class EnvTables:
    """Index arrays over the environment block, keyed off bit 0."""

    e1: np.ndarray            # env indices with k_0 = 1
    e0_of_e1: np.ndarray      # same states with k_0 cleared
    e0_all: np.ndarray        # env indices with k_0 = 0
    e0_unpaired: np.ndarray   # k_0 = 0 states at the cap (no k_0 = 1 partner)
    shift_src: np.ndarray     # k_0 = 0 states, pre-shift
    shift_dst: np.ndarray     # their images under the one-site shift


@lru_cache(maxsize=16)
def env_tables(enum: BasisEnumeration) -> EnvTables:
    cap = enum.layout.env_cap
    e1, e0_of_e1, e0_all, e0_unpaired = [], [], [], []
    shift_src, shift_dst = [], []
    for e, sup in enumerate(enum.env_supports):
        if sup and sup[0] == 0:
            e1.append(e)
            e0_of_e1.append(enum.env_rank(sup[1:]))
        else:
            e0_all.append(e)
            if len(sup) == cap:
                e0_unpaired.append(e)
            shift_src.append(e)
            shift_dst.append(enum.env_rank([p - 1 for p in sup]))
    as_idx = lambda xs: np.asarray(xs, dtype=np.int64)
    return EnvTables(
        e1=as_idx(e1), e0_of_e1=as_idx(e0_of_e1), e0_all=as_idx(e0_all),
        e0_unpaired=as_idx(e0_unpaired),
        shift_src=as_idx(shift_src), shift_dst=as_idx(shift_dst),
    )


# ---------------------------------------------------------------------------
# homodyne eigensystem on the qubit (x) LO factor

@dataclass(frozen=True)
class HomodyneEigensystem:
    """Eigensystem of Q = C_dag B + B_dag C on the 2 x d_LO factor.

    vectors holds one eigenvector per column, indexed like q * d_LO + l;
    eigenvalues are +-sqrt(n) for the paired branches and 0 for the joint
    vacuum and the truncation-edge ket.
    """

    lo_dim: int
    labels: np.ndarray       # signed n, 0 for the zero subspace
    eigenvalues: np.ndarray
    vectors: np.ndarray

    @property
    def count(self) -> int:
        return self.labels.size


def homodyne_q_matrix(lo_dim: int) -> np.ndarray:
    """Dense Q = C_dag B + B_dag C on the qubit (x) LO factor."""
    dim = 2 * lo_dim
    q = np.zeros((dim, dim), dtype=np.complex128)
    for n in range(1, lo_dim):
        q[0 * lo_dim + n, 1 * lo_dim + n - 1] = np.sqrt(n)  # C_dag B
        q[1 * lo_dim + n - 1, 0 * lo_dim + n] = np.sqrt(n)  # B_dag C
    return q


def homodyne_eigensystem(lo_dim: int) -> HomodyneEigensystem:
    if lo_dim < 2:
        raise ValueError("homodyne needs lo_dim >= 2")
    dim = 2 * lo_dim
    labels, eigenvalues = [], []
    vectors = np.zeros((dim, dim), dtype=np.complex128)
    col = 0
    for n in range(1, lo_dim):
        for sign in (+1, -1):
            vec = np.zeros(dim, dtype=np.complex128)
            vec[0 * lo_dim + n] = _INV_SQRT2
            vec[1 * lo_dim + n - 1] = sign * _INV_SQRT2
            vectors[:, col] = vec
            labels.append(sign * n)
            eigenvalues.append(sign * np.sqrt(n))
            col += 1
    for idx in (0 * lo_dim + 0, 1 * lo_dim + (lo_dim - 1)):  # vacuum, edge
        vec = np.zeros(dim, dtype=np.complex128)
        vec[idx] = 1.0
        vectors[:, col] = vec
        labels.append(0)
        eigenvalues.append(0.0)
        col += 1
    return HomodyneEigensystem(
        lo_dim=lo_dim,
        labels=np.asarray(labels, dtype=np.int64),
        eigenvalues=np.asarray(eigenvalues, dtype=np.float64),
        vectors=vectors,
    )


# ---------------------------------------------------------------------------
# local-oscillator preparation

def coherent_amplitudes(beta: complex, lo_dim: int, leak_tol: float = 1e-8) -> np.ndarray:
    """Truncated, renormalized coherent-state vector with parameter beta."""
    n = np.arange(lo_dim)
    log_fact = np.concatenate(([0.0], np.cumsum(np.log(np.arange(1, lo_dim)))))
    mag = np.abs(beta)
    with np.errstate(divide="ignore"):
        log_mag = n * np.log(mag) if mag > 0 else np.where(n == 0, 0.0, -np.inf)
    log_w = -mag * mag + 2 * log_mag - log_fact  # |c_n|^2 before renormalization
    weights = np.exp(log_w)
    kept = weights.sum()
    if 1.0 - kept > leak_tol:
        raise ValueError(
            f"coherent truncation discards weight {1.0 - kept:.3e} > {leak_tol:.1e}"
        )
    phase = np.ones(lo_dim, dtype=np.complex128)
    if mag > 0:
        phase = (beta / mag) ** n
    amps = np.sqrt(weights) * phase
    return amps / np.linalg.norm(amps)


def prepare_lo(state: PureState, enum: BasisEnumeration, beta: complex,
               leak_tol: float = 1e-8, fiducial_tol: float = 1e-9) -> PureState:
    """Replace the LO factor (currently vacuum) by the coherent state |beta>."""
    lay = enum.layout
    if lay.lo_dim < 2:
        raise ValueError("layout has no local oscillator")
    grid = state.as_grid()
    off = float(np.abs(grid[:, :, 1:]).max()) if lay.lo_axis > 1 else 0.0
    if off > fiducial_tol:
        raise ValueError(
            f"LO factor is not in the vacuum fiducial state (weight {off:.2e})"
        )
    coh = coherent_amplitudes(beta, lay.lo_dim, leak_tol)
    new = grid[:, :, :1] * coh[None, None, :]
    out = new.reshape(-1)
    return PureState(amplitudes=out / np.linalg.norm(out), enumeration=enum)


# ---------------------------------------------------------------------------
# outcome sampling

def sample_outcome(probabilities, rng: np.random.Generator) -> int:
    """Weighted choice after clamping tiny negatives and renormalizing."""
    p = np.asarray(probabilities, dtype=float)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.min() < -1e-12:
        raise MeasurementError(f"negative probability {p.min():.3e}")
    total = p.sum()
    if abs(total - 1.0) > 1e-8:
        raise MeasurementError(f"probabilities sum to {total!r}, not 1")
    p = np.clip(p, 0.0, None)
    cum = np.cumsum(p / p.sum())
    u = rng.random()
    return int(min(np.searchsorted(cum, u, side="right"), p.size - 1))


# ---------------------------------------------------------------------------
# photodetection

def photo_probabilities(state: PureState, enum: BasisEnumeration):
    """(P(no click), P(click)) for the zeroth chain qubit."""
    tabs = env_tables(enum)
    grid = state.as_grid()
    p1 = float(np.sum(np.abs(grid[:, tabs.e1, :]) ** 2))
    total = float(np.sum(np.abs(grid) ** 2))
    return total - p1, p1


def measure_photo(state: PureState, enum: BasisEnumeration,
                  rng: np.random.Generator):
    """Sample the click/no-click outcome, project, reset qubit 0 to vacuum."""
    p0, p1 = photo_probabilities(state, enum)
    if abs(p0 + p1 - 1.0) > 1e-8:
        raise MeasurementError(f"outcome probabilities sum to {p0 + p1!r}")
    idx = sample_outcome([p0, p1], rng)
    tabs = env_tables(enum)
    grid = state.as_grid()
    new = np.zeros_like(grid)
    if idx == 1:
        new[:, tabs.e0_of_e1, :] = grid[:, tabs.e1, :]
        prob = p1
    else:
        new[:, tabs.e0_all, :] = grid[:, tabs.e0_all, :]
        prob = p0
    flat = new.reshape(-1)
    nrm = np.linalg.norm(flat)
    if nrm == 0.0:
        raise MeasurementError("projection annihilated the state")
    out = PureState(amplitudes=flat / nrm, enumeration=enum)
    return MeasurementOutcome(label=idx, eigenvalue=float(idx), probability=prob), out


# ---------------------------------------------------------------------------
# homodyne measurement

def homodyne_probabilities(state: PureState, enum: BasisEnumeration):
    """Outcome table for Q: (labels, eigenvalues, probabilities).

    Order: (+1, -1, +2, -2, ..., +(d_LO-1), -(d_LO-1), vacuum 0, edge 0).
    """
    lay = enum.layout
    if lay.lo_dim < 2:
        raise ValueError("homodyne needs a local oscillator in the layout")
    tabs = env_tables(enum)
    grid = state.as_grid()
    lo = lay.lo_dim
    a0 = grid[:, tabs.e0_of_e1, 1:]          # <0, n| component, n = 1..lo-1
    a1 = grid[:, tabs.e1, : lo - 1]          # <1, n-1| component
    pp = 0.5 * np.sum(np.abs(a0 + a1) ** 2, axis=(0, 1))
    pm = 0.5 * np.sum(np.abs(a0 - a1) ** 2, axis=(0, 1))
    if tabs.e0_unpaired.size:
        pu = 0.5 * np.sum(np.abs(grid[:, tabs.e0_unpaired, 1:]) ** 2, axis=(0, 1))
        pp = pp + pu
        pm = pm + pu
    p_vac = float(np.sum(np.abs(grid[:, tabs.e0_all, 0]) ** 2))
    p_edge = float(np.sum(np.abs(grid[:, tabs.e1, lo - 1]) ** 2))
    count = 2 * (lo - 1) + 2
    labels = np.zeros(count, dtype=np.int64)
    eigenvalues = np.zeros(count, dtype=np.float64)
    probs = np.zeros(count, dtype=np.float64)
    ns = np.arange(1, lo)
    labels[0:-2:2] = ns
    labels[1:-2:2] = -ns
    eigenvalues[0:-2:2] = np.sqrt(ns)
    eigenvalues[1:-2:2] = -np.sqrt(ns)
    probs[0:-2:2] = pp
    probs[1:-2:2] = pm
    probs[-2] = p_vac
    probs[-1] = p_edge
    return labels, eigenvalues, probs


def _collapse_homodyne(grid, tabs, lo: int, idx: int, labels) -> np.ndarray:
    """Post-measurement (sys, env, lo) grid for outcome index idx, unnormalized."""
    new = np.zeros_like(grid)
    if idx == labels.size - 2:      # joint vacuum
        new[:, tabs.e0_all, 0] = grid[:, tabs.e0_all, 0]
    elif idx == labels.size - 1:    # truncation edge |1, lo-1>
        new[:, tabs.e0_of_e1, 0] = grid[:, tabs.e1, lo - 1]
    else:
        n = int(abs(labels[idx]))
        sign = 1.0 if labels[idx] > 0 else -1.0
        amp = (grid[:, tabs.e0_of_e1, n] + sign * grid[:, tabs.e1, n - 1]) * _INV_SQRT2
        new[:, tabs.e0_of_e1, 0] = amp
        if tabs.e0_unpaired.size:
            new[:, tabs.e0_unpaired, 0] = grid[:, tabs.e0_unpaired, n] * _INV_SQRT2
    return new


def measure_homodyne(state: PureState, enum: BasisEnumeration,
                     eigensystem: HomodyneEigensystem, rng: np.random.Generator):
    """Sample a Q eigenspace, project, reset qubit 0 and the LO to vacuum."""
    lay = enum.layout
    if eigensystem.lo_dim != lay.lo_dim:
        raise ValueError("eigensystem/layout lo_dim mismatch")
    labels, eigenvalues, probs = homodyne_probabilities(state, enum)
    total = probs.sum()
    if abs(total - 1.0) > 1e-8:
        raise MeasurementError(f"outcome probabilities sum to {total!r}")
    idx = sample_outcome(probs, rng)
    tabs = env_tables(enum)
    new = _collapse_homodyne(state.as_grid(), tabs, lay.lo_dim, idx, labels)
    flat = new.reshape(-1)
    nrm = np.linalg.norm(flat)
    if nrm == 0.0:
        raise MeasurementError("projection annihilated the state")
    outcome = MeasurementOutcome(
        label=int(labels[idx]),
        eigenvalue=float(eigenvalues[idx]),
        probability=float(probs[idx]),
    )
    return outcome, PureState(amplitudes=flat / nrm, enumeration=enum)


# ---------------------------------------------------------------------------
# truncated shift

def apply_shift(state: PureState, enum: BasisEnumeration,
                fiducial_tol: float = 1e-10) -> PureState:
    """Shift chain excitations one site down; qubit 0 must hold vacuum."""
    tabs = env_tables(enum)
    grid = state.as_grid()
    if tabs.e1.size:
        stray = float(np.abs(grid[:, tabs.e1, :]).max())
        if stray > fiducial_tol:
            raise MeasurementError(
                f"shift precondition violated: k_0 = 1 amplitude {stray:.2e}"
            )
    new = np.zeros_like(grid)
    new[:, tabs.shift_dst, :] = grid[:, tabs.shift_src, :]
    return PureState(amplitudes=new.reshape(-1), enumeration=enum)


# ---------------------------------------------------------------------------
# batched kernels (engine hot path); trajectories live on the last axis

def batch_photo_probabilities(grid: np.ndarray, tabs: EnvTables):
    p1 = np.sum(np.abs(grid[:, tabs.e1, :, :]) ** 2, axis=(0, 1, 2))
    total = np.sum(np.abs(grid) ** 2, axis=(0, 1, 2))
    return total - p1, p1


def batch_measure_photo(grid: np.ndarray, tabs: EnvTables, u: np.ndarray):
    """Vectorized click sampling; returns (eigenvalues, |sum-1| error, new grid)."""
    p0, p1 = batch_photo_probabilities(grid, tabs)
    total = p0 + p1
    err = np.abs(total - 1.0)
    click = u >= (p0 / total)
    # no-click columns keep their k_0 = 0 slices; click columns are rebuilt
    # from the k_0 = 1 slices moved onto their reset partners
    new = grid * (~click)[None, None, None, :]
    new[:, tabs.e1, :, :] = 0.0
    cols_c = np.nonzero(click)[0]
    if cols_c.size:
        new[:, tabs.e0_of_e1[:, None], :, cols_c[None, :]] = \
            grid[:, tabs.e1[:, None], :, cols_c[None, :]]
    _renormalize_columns(new)
    return click.astype(np.float64), err, new


def batch_measure_homodyne(grid: np.ndarray, tabs: EnvTables, lo: int,
                           u: np.ndarray):
    """Vectorized Q sampling; returns (eigenvalues, |sum-1| error, new grid)."""
    a0 = grid[:, tabs.e0_of_e1, 1:, :]
    a1 = grid[:, tabs.e1, : lo - 1, :]
    pp = 0.5 * np.sum(np.abs(a0 + a1) ** 2, axis=(0, 1))
    pm = 0.5 * np.sum(np.abs(a0 - a1) ** 2, axis=(0, 1))
    if tabs.e0_unpaired.size:
        pu = 0.5 * np.sum(np.abs(grid[:, tabs.e0_unpaired, 1:, :]) ** 2, axis=(0, 1))
        pp = pp + pu
        pm = pm + pu
    p_vac = np.sum(np.abs(grid[:, tabs.e0_all, 0, :]) ** 2, axis=(0, 1))
    p_edge = np.sum(np.abs(grid[:, tabs.e1, lo - 1, :]) ** 2, axis=(0, 1))
    n_branch = 2 * (lo - 1)
    table = np.empty((n_branch + 2, grid.shape[3]), dtype=np.float64)
    table[0:n_branch:2] = pp
    table[1:n_branch:2] = pm
    table[-2] = p_vac
    table[-1] = p_edge
    total = table.sum(axis=0)
    err = np.abs(total - 1.0)
    cum = np.cumsum(table / total[None, :], axis=0)
    idx = np.minimum(np.sum(cum <= u[None, :], axis=0), table.shape[0] - 1)

    is_vac = idx == n_branch
    is_edge = idx == n_branch + 1
    is_branch = ~(is_vac | is_edge)
    n_of = idx // 2 + 1
    sign_of = np.where(idx % 2 == 0, 1.0, -1.0)
    eig = np.where(is_branch, sign_of * np.sqrt(n_of.astype(np.float64)), 0.0)

    new = np.zeros_like(grid)
    cols = np.nonzero(is_branch)[0]
    if cols.size:
        n_r = n_of[cols]
        s_r = sign_of[cols]
        sel0 = grid[:, tabs.e0_of_e1[:, None], n_r[None, :], cols[None, :]]
        sel1 = grid[:, tabs.e1[:, None], (n_r - 1)[None, :], cols[None, :]]
        new[:, tabs.e0_of_e1[:, None], 0, cols[None, :]] = \
            (sel0 + s_r[None, None, :] * sel1) * _INV_SQRT2
        if tabs.e0_unpaired.size:
            selu = grid[:, tabs.e0_unpaired[:, None], n_r[None, :], cols[None, :]]
            new[:, tabs.e0_unpaired[:, None], 0, cols[None, :]] = selu * _INV_SQRT2
    cols = np.nonzero(is_vac)[0]
    if cols.size:
        new[:, tabs.e0_all[:, None], 0, cols[None, :]] = \
            grid[:, tabs.e0_all[:, None], 0, cols[None, :]]
    cols = np.nonzero(is_edge)[0]
    if cols.size:
        new[:, tabs.e0_of_e1[:, None], 0, cols[None, :]] = \
            grid[:, tabs.e1[:, None], lo - 1, cols[None, :]]
    _renormalize_columns(new)
    return eig, err, new


def batch_apply_shift(grid: np.ndarray, tabs: EnvTables,
                      fiducial_tol: float = 1e-10) -> np.ndarray:
    if tabs.e1.size:
        stray = float(np.abs(grid[:, tabs.e1, :, :]).max())
        if stray > fiducial_tol:
            raise MeasurementError(
                f"shift precondition violated: k_0 = 1 amplitude {stray:.2e}"
            )
    new = np.zeros_like(grid)
    new[:, tabs.shift_dst, :, :] = grid[:, tabs.shift_src, :, :]
    return new


def batch_prepare_lo(grid: np.ndarray, coherent: np.ndarray) -> np.ndarray:
    """LO factor (currently vacuum) -> coherent state, all trajectories."""
    return grid[:, :, :1, :] * coherent[None, None, :, None]


def _renormalize_columns(grid: np.ndarray) -> None:
    nrm = np.sqrt(np.sum(np.abs(grid) ** 2, axis=(0, 1, 2)))
    if np.any(nrm == 0.0):
        raise MeasurementError("projection annihilated a trajectory state")
    grid /= nrm[None, None, None, :]
