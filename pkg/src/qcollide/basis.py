"""Truncated number-state basis for a system coupled to a qubit chain.

The combined Hilbert space is

    system (dim d_S)  x  environment chain (N qubits, total excitations <= K_max)
                      x  optional local oscillator (dim d_LO)

with a deterministic dense-index bijection.  The ordering convention is:
system index slowest, environment bit-vectors ordered by (weight, then
numeric value of the bit-string), local oscillator fastest.  Environment
bit-vectors are ranked inside each weight class with the combinatorial
number system, so index computations are O(weight) with no hash tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

DEFAULT_MAX_AMPLITUDES = 5_000_000


class CapacityError(ValueError):
    """Total basis size exceeds the configured amplitude ceiling."""


@dataclass(frozen=True)
class ModeLayout:
    """Dimensions of the combined system.

    system_dim : local dimension of the system mode (2 for a qubit).
    env_count  : number of environment chain qubits N.
    env_cap    : cap K_max on the total excitation number in the chain.
    lo_dim     : local-oscillator dimension; 0 means no local oscillator.
    """

    system_dim: int
    env_count: int
    env_cap: int
    lo_dim: int = 0

    def __post_init__(self):
        if self.system_dim < 1:
            raise ValueError(f"system_dim must be >= 1, got {self.system_dim}")
        if self.env_count < 1:
            raise ValueError(f"env_count must be >= 1, got {self.env_count}")
        if not 0 <= self.env_cap <= self.env_count:
            raise ValueError(
                f"env_cap must satisfy 0 <= env_cap <= env_count, got {self.env_cap}"
            )
        if self.lo_dim < 0:
            raise ValueError(f"lo_dim must be >= 0, got {self.lo_dim}")

    @property
    def env_block_size(self) -> int:
        return sum(comb(self.env_count, j) for j in range(self.env_cap + 1))

    @property
    def lo_axis(self) -> int:
        """Size of the local-oscillator axis in the dense layout (1 if absent)."""
        return max(self.lo_dim, 1)

    @property
    def total_dim(self) -> int:
        return self.system_dim * self.env_block_size * self.lo_axis


@dataclass(frozen=True)
class OccupationState:
    """One basis ket: system occupancy, chain bit-vector, LO occupancy."""

    system_n: int
    env_bits: tuple
    lo_n: int = 0


def _colex_rank(support: Sequence[int]) -> int:
    # support ascending; ranks weight-w subsets by the numeric value of the
    # bit-string sum_n k_n 2^n
    return sum(comb(p, i + 1) for i, p in enumerate(support))


@dataclass(eq=False)
class BasisEnumeration:
    """Bijection between OccupationState and dense indices in [0, D)."""

    layout: ModeLayout
    env_supports: list = field(repr=False)
    _weight_offsets: tuple = field(repr=False)

    @property
    def total_dim(self) -> int:
        return self.layout.total_dim

    @property
    def env_size(self) -> int:
        return self.layout.env_block_size

    def env_rank(self, support: Sequence[int]) -> int:
        """Index of an environment bit-vector given its excited-site list."""
        w = len(support)
        if w > self.layout.env_cap:
            raise ValueError(
                f"environment weight {w} exceeds cap {self.layout.env_cap}"
            )
        return self._weight_offsets[w] + _colex_rank(sorted(support))

    def index_of(self, occ: OccupationState) -> int:
        lay = self.layout
        if not 0 <= occ.system_n < lay.system_dim:
            raise ValueError(f"system occupancy {occ.system_n} out of range")
        if len(occ.env_bits) != lay.env_count:
            raise ValueError(
                f"env_bits has length {len(occ.env_bits)}, expected {lay.env_count}"
            )
        if any(b not in (0, 1) for b in occ.env_bits):
            raise ValueError("environment occupancies are capped at 1 per mode")
        if not 0 <= occ.lo_n < lay.lo_axis:
            raise ValueError(f"local-oscillator occupancy {occ.lo_n} out of range")
        support = [n for n, b in enumerate(occ.env_bits) if b]
        e = self.env_rank(support)
        return (occ.system_n * self.env_size + e) * lay.lo_axis + occ.lo_n

    def occupation_of(self, index: int) -> OccupationState:
        lay = self.layout
        if not 0 <= index < self.total_dim:
            raise ValueError(f"index {index} out of range [0, {self.total_dim})")
        index, lo_n = divmod(index, lay.lo_axis)
        s, e = divmod(index, self.env_size)
        bits = [0] * lay.env_count
        for p in self.env_supports[e]:
            bits[p] = 1
        return OccupationState(system_n=s, env_bits=tuple(bits), lo_n=lo_n)

    def env_weights(self) -> np.ndarray:
        """Excitation number of every environment basis state."""
        return np.fromiter(
            (len(s) for s in self.env_supports), dtype=np.int64, count=self.env_size
        )


def enumerate_basis(
    layout: ModeLayout, max_amplitudes: int = DEFAULT_MAX_AMPLITUDES
) -> BasisEnumeration:
    """Enumerate the capped basis; index 0 is the global vacuum."""
    if layout.total_dim > max_amplitudes:
        raise CapacityError(
            f"basis size {layout.total_dim} exceeds ceiling {max_amplitudes}"
        )
    offsets = []
    total = 0
    for w in range(layout.env_cap + 1):
        offsets.append(total)
        total += comb(layout.env_count, w)
    supports: list = [None] * total
    for w in range(layout.env_cap + 1):
        base = offsets[w]
        for sup in combinations(range(layout.env_count), w):
            supports[base + _colex_rank(sup)] = sup
    return BasisEnumeration(
        layout=layout, env_supports=supports, _weight_offsets=tuple(offsets)
    )


@dataclass(frozen=True)
class SparseOperator:
    """Sparse complex operator on the enumerated basis (CSR, duplicates merged)."""

    dim: int
    matrix: sp.csr_matrix

    @classmethod
    def from_coo(cls, dim, rows, cols, vals) -> "SparseOperator":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= dim):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= dim):
            raise ValueError("column index out of range")
        m = sp.coo_matrix(
            (np.asarray(vals, dtype=np.complex128), (rows, cols)), shape=(dim, dim)
        ).tocsr()
        m.sum_duplicates()
        return cls(dim=dim, matrix=m)

    @classmethod
    def zero(cls, dim: int) -> "SparseOperator":
        return cls(dim=dim, matrix=sp.csr_matrix((dim, dim), dtype=np.complex128))

    def dagger(self) -> "SparseOperator":
        return SparseOperator(dim=self.dim, matrix=self.matrix.conj().T.tocsr())

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        return SparseOperator(dim=self.dim, matrix=(self.matrix + other.matrix).tocsr())

    def scaled(self, c: complex) -> "SparseOperator":
        return SparseOperator(dim=self.dim, matrix=(self.matrix * c).tocsr())

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def hermiticity_defect(self) -> float:
        d = self.matrix - self.matrix.conj().T
        return 0.0 if d.nnz == 0 else float(np.abs(d.data).max())


@dataclass
class PureState:
    """Complex amplitude vector over an enumerated basis."""

    amplitudes: np.ndarray
    enumeration: BasisEnumeration

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (self.enumeration.total_dim,):
            raise ValueError(
                f"amplitude vector has shape {self.amplitudes.shape}, "
                f"expected ({self.enumeration.total_dim},)"
            )

    @classmethod
    def from_occupation(cls, enum: BasisEnumeration, occ: OccupationState) -> "PureState":
        amps = np.zeros(enum.total_dim, dtype=np.complex128)
        amps[enum.index_of(occ)] = 1.0
        return cls(amplitudes=amps, enumeration=enum)

    @classmethod
    def product_state(cls, enum: BasisEnumeration, system_amplitudes) -> "PureState":
        """System in the given superposition, chain and LO in vacuum."""
        lay = enum.layout
        sys_amps = np.asarray(system_amplitudes, dtype=np.complex128)
        if sys_amps.shape != (lay.system_dim,):
            raise ValueError("system amplitude vector has wrong length")
        amps = np.zeros(enum.total_dim, dtype=np.complex128)
        stride = enum.env_size * lay.lo_axis
        amps[::stride][: lay.system_dim] = sys_amps
        return cls(amplitudes=amps, enumeration=enum)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def check_normalized(self, tol: float = 1e-9) -> None:
        n2 = float(np.vdot(self.amplitudes, self.amplitudes).real)
        if abs(n2 - 1.0) > tol:
            raise ValueError(f"state is not normalized: |psi|^2 = {n2!r}")

    def copy(self) -> "PureState":
        return PureState(self.amplitudes.copy(), self.enumeration)

    def as_grid(self) -> np.ndarray:
        """View shaped (system, env, lo)."""
        lay = self.enumeration.layout
        return self.amplitudes.reshape(
            lay.system_dim, self.enumeration.env_size, lay.lo_axis
        )


@dataclass(frozen=True)
class DensityMatrix:
    """Reduced density matrix of the system mode."""

    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def validate(self, herm_tol=1e-10, trace_tol=1e-9, psd_tol=1e-10) -> None:
        m = self.matrix
        if np.abs(m - m.conj().T).max() > herm_tol:
            raise ValueError("density matrix is not Hermitian within tolerance")
        if abs(np.trace(m).real - 1.0) > trace_tol or abs(np.trace(m).imag) > trace_tol:
            raise ValueError("density matrix trace deviates from 1")
        if np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min() < -psd_tol:
            raise ValueError("density matrix has a negative eigenvalue")

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)


ModeSpec = Union[str, tuple]


def _grid_indices(enum: BasisEnumeration):
    lay = enum.layout
    s = np.arange(lay.system_dim, dtype=np.int64)
    e = np.arange(enum.env_size, dtype=np.int64)
    l = np.arange(lay.lo_axis, dtype=np.int64)
    return s, e, l, lay.lo_axis


def _embed(enum, s_rows, s_cols, e_rows, e_cols, l_rows, l_cols, vals):
    """Combine per-factor index arrays into global COO triples (outer product)."""
    E, L = enum.env_size, enum.layout.lo_axis
    rows = ((s_rows[:, None, None] * E + e_rows[None, :, None]) * L + l_rows[None, None, :]).ravel()
    cols = ((s_cols[:, None, None] * E + e_cols[None, :, None]) * L + l_cols[None, None, :]).ravel()
    v = np.broadcast_to(
        vals, (s_rows.size, e_rows.size, l_rows.size)
    ).ravel()
    return rows, cols, v


def mode_lowering(enum: BasisEnumeration, mode: ModeSpec) -> SparseOperator:
    """Lowering (annihilation) operator for one mode in the capped basis.

    mode is "system", "lo", or ("env", n).  Occupancy m maps to sqrt(m)(m-1);
    matrix elements leaving the capped basis are dropped.
    """
    lay = enum.layout
    s_all, e_all, l_all, L = _grid_indices(enum)
    D = enum.total_dim
    if mode == "system":
        if lay.system_dim < 2:
            return SparseOperator.zero(D)
        s_cols = np.arange(1, lay.system_dim, dtype=np.int64)
        vals = np.sqrt(s_cols.astype(float))[:, None, None]
        rows, cols, v = _embed(enum, s_cols - 1, s_cols, e_all, e_all, l_all, l_all, vals)
        return SparseOperator.from_coo(D, rows, cols, v)
    if mode == "lo":
        if lay.lo_dim == 0:
            raise ValueError("layout has no local oscillator")
        l_cols = np.arange(1, lay.lo_dim, dtype=np.int64)
        vals = np.sqrt(l_cols.astype(float))[None, None, :]
        rows, cols, v = _embed(enum, s_all, s_all, e_all, e_all, l_cols - 1, l_cols, vals)
        return SparseOperator.from_coo(D, rows, cols, v)
    if isinstance(mode, tuple) and len(mode) == 2 and mode[0] == "env":
        n = mode[1]
        if not 0 <= n < lay.env_count:
            raise ValueError(f"environment site {n} out of range")
        e_cols_list, e_rows_list = [], []
        for e, sup in enumerate(enum.env_supports):
            if n in sup:
                e_cols_list.append(e)
                e_rows_list.append(enum.env_rank([p for p in sup if p != n]))
        e_cols = np.asarray(e_cols_list, dtype=np.int64)
        e_rows = np.asarray(e_rows_list, dtype=np.int64)
        if e_cols.size == 0:
            return SparseOperator.zero(D)
        vals = np.ones((1, e_cols.size, 1))
        rows, cols, v = _embed(enum, s_all, s_all, e_rows, e_cols, l_all, l_all, vals)
        return SparseOperator.from_coo(D, rows, cols, v)
    raise ValueError(f"unknown mode {mode!r}")


def expectation(state: PureState, op: SparseOperator) -> complex:
    """<psi|op|psi> / <psi|psi>."""
    if op.dim != state.enumeration.total_dim:
        raise ValueError("operator/state dimension mismatch")
    psi = state.amplitudes
    n2 = float(np.vdot(psi, psi).real)
    if n2 == 0.0:
        raise ValueError("zero state")
    return complex(np.vdot(psi, op.matrix @ psi) / n2)


def partial_trace_system(state: PureState, norm_tol: float = 1e-6) -> DensityMatrix:
    """Reduced density matrix of the system: trace over chain and LO."""
    n2 = float(np.vdot(state.amplitudes, state.amplitudes).real)
    if abs(n2 - 1.0) > norm_tol:
        raise ValueError(f"state not normalized within {norm_tol}: |psi|^2 = {n2!r}")
    lay = state.enumeration.layout
    m = state.amplitudes.reshape(lay.system_dim, -1)
    rho = (m @ m.conj().T) / n2
    return DensityMatrix(matrix=rho)
