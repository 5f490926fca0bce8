"""Coherent evolution of the combined state over one collision interval.

Computes e^{-i H dt} |psi> for a sparse Hermitian H.  Public entry point is
`evolve`, with two user-selectable methods: an adaptive Runge-Kutta
integration of the Schrodinger equation (norm renormalization deliberately
disabled -- norm drift is a health metric) and a Lanczos/Krylov exponential.

The trajectory engine additionally uses two exact fast paths for its fixed
per-step Hamiltonian, exposed here as step applicators that act on a whole
(dim, columns) block at once: a cached spectral propagator (one
eigendecomposition, then dense products) and a truncated-Taylor expansion
with scaling for large sparse Hamiltonians.  All paths satisfy the same
contract and are cross-checked against dense matrix exponentials in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import eigh_tridiagonal

from .basis import PureState, SparseOperator


class PropagatorError(RuntimeError):
    """Non-convergence, NaN contamination, or norm-drift violation."""


@dataclass(frozen=True)
class PropagatorConfig:
    method: str = "auto"  # auto | rk | krylov | taylor | spectral
    rtol: float = 1e-10
    max_substeps: int = 1024
    spectral_max_dim: int = 512

    def __post_init__(self):
        if not 0 < self.rtol <= 1e-4:
            raise ValueError("rtol must lie in (0, 1e-4]")
        if self.method not in ("auto", "rk", "krylov", "taylor", "spectral"):
            raise ValueError(f"unknown propagator method {self.method!r}")


def _check_finite(arr):
    if not np.all(np.isfinite(arr.view(np.float64))):
        raise PropagatorError("non-finite amplitudes produced during evolution")


def _one_norm(h: sp.csr_matrix) -> float:
    if h.nnz == 0:
        return 0.0
    return float(np.abs(h).sum(axis=0).max())


class SpectralStepApplicator:
    """Exact e^{-iH dt} via one Hermitian eigendecomposition, applied densely."""

    def __init__(self, h: sp.csr_matrix, dt: float):
        lam, v = np.linalg.eigh(h.toarray())
        self.unitary = np.ascontiguousarray((v * np.exp(-1j * lam * dt)) @ v.conj().T)

    def apply(self, block: np.ndarray) -> np.ndarray:
        return self.unitary @ block


class TaylorStepApplicator:
    """Truncated Taylor expansion of e^{-iH dt} with scaling substeps.

    Valid for any Hermitian H.  The substep count keeps the scaled 1-norm
    below theta, and the term count is fixed in advance from the rigorous
    remainder bound sum_{k>K} h^k/k! <= h^{K+1}/(K+1)! / (1 - h/(K+2)).
    """

    def __init__(self, h: sp.csr_matrix, dt: float, tol: float = 1e-13,
                 theta: float = 0.9, max_substeps: int = 1024):
        norm = _one_norm(h) * abs(dt)
        self.substeps = max(1, int(np.ceil(norm / theta)))
        if self.substeps > max_substeps:
            raise PropagatorError(
                f"needs {self.substeps} substeps, exceeding the cap {max_substeps}"
            )
        self.scaled = (h * (-1j * dt / self.substeps)).tocsr()
        hsub = norm / self.substeps
        bound = 1.0
        k = 0
        while True:
            k += 1
            bound *= hsub / k
            if bound / max(1.0 - hsub / (k + 1), 0.1) <= tol or k >= 64:
                break
        self.n_terms = k

    def apply(self, block: np.ndarray) -> np.ndarray:
        out = block
        for _ in range(self.substeps):
            acc = out.copy()
            term = out
            for k in range(1, self.n_terms + 1):
                term = self.scaled @ term
                if k > 1:
                    term *= 1.0 / k
                acc += term
            out = acc
        _check_finite(out)
        return out


class RKStepApplicator:
    """Adaptive RK (DOP853) on the Schrodinger equation, no renormalization."""

    def __init__(self, h: sp.csr_matrix, dt: float, rtol: float = 1e-10):
        self.h = h
        self.dt = dt
        self.rtol = rtol

    def apply(self, block: np.ndarray) -> np.ndarray:
        shape = block.shape
        hmat = self.h

        def rhs(_t, y):
            return (-1j * (hmat @ y.reshape(shape))).ravel()

        sol = solve_ivp(
            rhs, (0.0, self.dt), block.ravel(), method="DOP853",
            rtol=self.rtol, atol=self.rtol * 1e-2, t_eval=[self.dt],
        )
        if not sol.success:
            raise PropagatorError(f"RK integration failed: {sol.message}")
        out = sol.y[:, -1].reshape(shape)
        _check_finite(out)
        return out


def _lanczos_expm(h: sp.csr_matrix, psi: np.ndarray, dt: float, tol: float,
                  m_max: int = 60) -> np.ndarray:
    norm0 = np.linalg.norm(psi)
    if norm0 == 0:
        return psi.copy()
    dim = psi.size
    m_max = min(m_max, dim)
    v = [psi / norm0]
    alphas: list = []
    betas: list = []
    approx = None
    for j in range(m_max):
        w = h @ v[j]
        alpha = float(np.vdot(v[j], w).real)
        alphas.append(alpha)
        w = w - alpha * v[j]
        if j > 0:
            w = w - betas[-1] * v[j - 1]
        for u in v:  # full reorthogonalization
            w = w - np.vdot(u, w) * u
        beta = float(np.linalg.norm(w))
        lam, s = eigh_tridiagonal(np.asarray(alphas), np.asarray(betas))
        coeff = s @ (np.exp(-1j * lam * dt) * s[0, :].conj())
        approx = norm0 * (np.column_stack(v) @ coeff)
        if beta <= 1e-14 * max(abs(alpha), 1.0):
            return approx  # invariant subspace
        err = norm0 * beta * abs(dt) * abs(coeff[-1])
        if err <= tol * norm0:
            return approx
        betas.append(beta)
        v.append(w / beta)
    raise PropagatorError("Lanczos failed to reach tolerance within m_max")


def krylov_expm_apply(h: sp.csr_matrix, psi: np.ndarray, dt: float,
                      rtol: float = 1e-10, max_substeps: int = 1024) -> np.ndarray:
    """e^{-iH dt} psi via Lanczos, splitting dt when the norm is large."""
    norm = _one_norm(h) * abs(dt)
    pieces = max(1, int(np.ceil(norm / 8.0)))
    if pieces > max_substeps:
        raise PropagatorError(f"needs {pieces} substeps, cap is {max_substeps}")
    out = psi
    for _ in range(pieces):
        out = _lanczos_expm(h, out, dt / pieces, tol=rtol * 1e-2)
    _check_finite(out)
    return out


def make_step_applicator(h: sp.csr_matrix, dt: float, cfg: PropagatorConfig):
    """Pick the block applicator the engine iterates with."""
    dim = h.shape[0]
    method = cfg.method
    if method == "auto":
        method = "spectral" if dim <= cfg.spectral_max_dim else "taylor"
    if method == "spectral":
        return SpectralStepApplicator(h, dt)
    if method == "taylor":
        return TaylorStepApplicator(h, dt, tol=min(1e-13, cfg.rtol),
                                    max_substeps=cfg.max_substeps)
    if method == "rk":
        return RKStepApplicator(h, dt, rtol=cfg.rtol)
    if method == "krylov":
        class _KrylovBlock:
            def __init__(self, hmat, step, rtol, cap):
                self.args = (hmat, step, rtol, cap)

            def apply(self, block):
                hmat, step, rtol, cap = self.args
                if block.ndim == 1:
                    return krylov_expm_apply(hmat, block, step, rtol, cap)
                cols = [krylov_expm_apply(hmat, block[:, j], step, rtol, cap)
                        for j in range(block.shape[1])]
                return np.column_stack(cols)

        return _KrylovBlock(h, dt, cfg.rtol, cfg.max_substeps)
    raise ValueError(f"unknown method {method!r}")


def evolve(state: PureState, h: SparseOperator, dt: float,
           cfg: PropagatorConfig = PropagatorConfig()) -> PureState:
    """Return e^{-iH dt}|psi> within the configured tolerance.

    Norm drift per step beyond 10x the relative tolerance raises
    PropagatorError, as does NaN contamination or non-convergence.
    """
    if h.dim != state.enumeration.total_dim:
        raise ValueError("Hamiltonian/state dimension mismatch")
    if h.dim <= 2048:
        scale = max(_one_norm(h.matrix), 1.0)
        if h.hermiticity_defect() > 1e-10 * scale:
            raise ValueError("Hamiltonian is not Hermitian within tolerance")
    psi = state.amplitudes
    method = cfg.method
    if method == "auto":
        method = "krylov"
    if method == "krylov":
        out = krylov_expm_apply(h.matrix, psi, dt, cfg.rtol, cfg.max_substeps)
    elif method == "rk":
        out = RKStepApplicator(h.matrix, dt, cfg.rtol).apply(psi)
    elif method == "taylor":
        out = TaylorStepApplicator(h.matrix, dt, tol=min(1e-13, cfg.rtol),
                                   max_substeps=cfg.max_substeps).apply(psi)
    else:  # spectral
        out = SpectralStepApplicator(h.matrix, dt).apply(psi)
    _check_finite(out)
    n_in = np.linalg.norm(psi)
    n_out = np.linalg.norm(out)
    if n_in > 0 and abs(n_out - n_in) > 10 * cfg.rtol * n_in:
        raise PropagatorError(
            f"norm drift {abs(n_out - n_in) / n_in:.3e} exceeds 10x rtol"
        )
    return PureState(amplitudes=out, enumeration=state.enumeration)
