"""Coupling profiles and Hamiltonians for the collision model.

A coupling profile is the array gamma_n of per-site coupling amplitudes
(units sqrt(rate), so |gamma_n|^2 is a rate).  Three named shapes are
supported -- single-point (Markovian), two-point feedback with a phase,
and an exponentially decaying memory -- plus a raw-array escape hatch.

The system-chain interaction is

    H_I = (1/sqrt(dt)) * sum_n ( gamma_n a_dag B_n + conj(gamma_n) B_n_dag a )

and the diagnostic mode-space coupling is kappa_k = L^{-1/2} sum_n gamma_n
exp(i w_k n dt) with w_k = 2 pi k / L, L = N dt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .basis import BasisEnumeration, SparseOperator, mode_lowering


@dataclass(frozen=True)
class PointCoupling:
    """Coupling at site 0 only; gamma_0 = sqrt(rate)."""

    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


@dataclass(frozen=True)
class TwoPointFeedback:
    """Coupling at sites 0 and M: gamma_0 = sqrt(rate) e^{i phase}, gamma_M = sqrt(rate).

    The loop delay is tau = delay_steps * dt.
    """

    rate: float
    phase: float
    delay_steps: int

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if self.delay_steps < 1:
            raise ValueError("delay_steps must be >= 1")


@dataclass(frozen=True)
class ExponentialCoupling:
    """Continuous memory: gamma_n = sqrt(rate) * memory_rate * dt * e^{-memory_rate n dt}."""

    rate: float
    memory_rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if self.memory_rate <= 0:
            raise ValueError("memory_rate must be > 0")


@dataclass(frozen=True)
class RawCoupling:
    """Escape hatch: user-supplied gamma_n array."""

    gammas: tuple


CouplingVariant = Union[PointCoupling, TwoPointFeedback, ExponentialCoupling, RawCoupling]


@dataclass(frozen=True)
class CouplingProfile:
    """Per-site coupling amplitudes gamma_n driving the interaction Hamiltonian."""

    gammas: np.ndarray
    variant: CouplingVariant
    dt: float

    def __post_init__(self):
        object.__setattr__(
            self, "gammas", np.asarray(self.gammas, dtype=np.complex128)
        )

    @property
    def site_count(self) -> int:
        return self.gammas.size


def build_coupling(variant: CouplingVariant, env_count: int, dt: float) -> CouplingProfile:
    """Materialize gamma_n for one of the named variants."""
    if env_count < 1:
        raise ValueError("env_count must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    g = np.zeros(env_count, dtype=np.complex128)
    if isinstance(variant, PointCoupling):
        g[0] = np.sqrt(variant.rate)
    elif isinstance(variant, TwoPointFeedback):
        if variant.delay_steps >= env_count:
            raise ValueError(
                f"delay_steps {variant.delay_steps} must be < env_count {env_count}"
            )
        amp = np.sqrt(variant.rate)
        g[0] = amp * np.exp(1j * variant.phase)
        g[variant.delay_steps] = amp
    elif isinstance(variant, ExponentialCoupling):
        n = np.arange(env_count)
        g[:] = (
            np.sqrt(variant.rate)
            * variant.memory_rate
            * dt
            * np.exp(-variant.memory_rate * n * dt)
        )
    elif isinstance(variant, RawCoupling):
        arr = np.asarray(variant.gammas, dtype=np.complex128)
        if arr.shape != (env_count,):
            raise ValueError("raw gamma array length must equal env_count")
        g[:] = arr
    else:
        raise TypeError(f"unknown coupling variant {variant!r}")
    return CouplingProfile(gammas=g, variant=variant, dt=dt)


def build_interaction(
    enum: BasisEnumeration, profile: CouplingProfile, dt: float
) -> SparseOperator:
    """Sparse Hermitian H_I on the full enumerated space."""
    if profile.site_count != enum.layout.env_count:
        raise ValueError(
            f"profile length {profile.site_count} != env_count {enum.layout.env_count}"
        )
    D = enum.total_dim
    a = mode_lowering(enum, "system").matrix
    a_dag = a.conj().T
    h = None
    scale = 1.0 / np.sqrt(dt)
    for n, g in enumerate(profile.gammas):
        if g == 0:
            continue
        b_n = mode_lowering(enum, ("env", n)).matrix
        term = (scale * g) * (a_dag @ b_n)
        term = term + term.conj().T
        h = term if h is None else h + term
    if h is None:
        return SparseOperator.zero(D)
    h = h.tocsr()
    h.sum_duplicates()
    return SparseOperator(dim=D, matrix=h)


@dataclass(frozen=True)
class DrivenQubit:
    """Resonant drive Omega*(a_dag + a) in the rotating frame."""

    rabi: float


@dataclass(frozen=True)
class Squeezer:
    """Degenerate parametric drive i*zeta*(a_dag^2 - a^2)."""

    strength: float


SystemHamiltonianSpec = Union[None, DrivenQubit, Squeezer]


def build_system_h(enum: BasisEnumeration, spec: SystemHamiltonianSpec) -> SparseOperator:
    """System Hamiltonian embedded on the system factor (identity elsewhere)."""
    D = enum.total_dim
    if spec is None:
        return SparseOperator.zero(D)
    a = mode_lowering(enum, "system").matrix
    a_dag = a.conj().T
    if isinstance(spec, DrivenQubit):
        h = spec.rabi * (a_dag + a)
    elif isinstance(spec, Squeezer):
        if enum.layout.system_dim < 3:
            raise ValueError("squeezer needs system_dim >= 3")
        h = 1j * spec.strength * (a_dag @ a_dag - a @ a)
    else:
        raise TypeError(f"unknown system Hamiltonian spec {spec!r}")
    h = h.tocsr()
    h.sum_duplicates()
    return SparseOperator(dim=D, matrix=h)


@dataclass(frozen=True)
class SpectralProfile:
    """Diagnostic mode-space couplings kappa_k at frequencies w_k = 2 pi k / L."""

    omegas: np.ndarray
    kappas: np.ndarray
    total_length: float

    def wrapped_omegas(self) -> np.ndarray:
        """Map k > N/2 to negative frequencies w_k - 2 pi / dt."""
        n = self.omegas.size
        dt = self.total_length / n
        k = np.arange(n)
        return np.where(k > n // 2, self.omegas - 2 * np.pi / dt, self.omegas)


def coupling_spectrum(profile: CouplingProfile, dt: float) -> SpectralProfile:
    """kappa_k = L^{-1/2} sum_n gamma_n e^{i w_k n dt}, L = N dt."""
    n = profile.site_count
    length = n * dt
    # ifft carries e^{+2 pi i k n / N} = e^{+i w_k n dt}
    kappas = (n / np.sqrt(length)) * np.fft.ifft(profile.gammas)
    omegas = 2 * np.pi * np.arange(n) / length
    return SpectralProfile(omegas=omegas, kappas=kappas, total_length=length)


def lorentzian_density(rate: float, memory_rate: float, omega) -> np.ndarray:
    """Continuum-limit spectral density of the exponential profile:
    J(w) = rate * memory_rate^2 / (2 pi (memory_rate^2 + w^2))."""
    if memory_rate <= 0:
        raise ValueError("memory_rate must be > 0")
    w = np.asarray(omega, dtype=float)
    return rate * memory_rate**2 / (2 * np.pi * (memory_rate**2 + w**2))
