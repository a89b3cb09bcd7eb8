"""Measured quantities: energies, ground-manifold fidelity, excitation
energy, dissipated energy and entanglement negativity.

Functions accept either a state vector (1-D) or a density matrix (2-D).
The ``*_batch`` factories build column-wise evaluators for the trajectory
engine, where states arrive as a ``(dim, n_traj)`` array.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .operators import bath_up_projector, dense
from .spectrum import SpectrumInfo

# --- scalar measurements ------------------------------------------------------


def _is_density(x: np.ndarray) -> bool:
    return x.ndim == 2 and x.shape[0] == x.shape[1]


def expectation(state, op) -> float:
    """Real expectation value ``<psi|A|psi>`` or ``tr(rho A)``."""
    x = np.asarray(state)
    dim = op.shape[0]
    if x.shape[0] != dim:
        raise ValidationError(f"state dimension {x.shape[0]} does not match operator dimension {dim}")
    if _is_density(x):
        value = (op @ x).trace() if sp.issparse(op) else np.einsum("ij,ji->", dense(op), x)
    else:
        value = np.vdot(x, op @ x)
    scale = max(1.0, abs(value.real))
    if abs(value.imag) > 1e-10 * scale:
        raise ValidationError(f"expectation has imaginary part {value.imag:.3g}; operator not Hermitian?")
    return float(value.real)


def fidelity(state, projector) -> float:
    """``tr(rho P)`` with ``P`` the ground-manifold projector, clipped to [0, 1]."""
    return float(min(1.0, max(0.0, expectation(state, projector))))


def epsilon(energy, spec: SpectrumInfo):
    """Dimensionless excitation energy ``(E - E_0) / gap``."""
    if not spec.gap > 0:
        raise ValidationError("gap must be positive")
    return (np.asarray(energy) - spec.e0) / spec.gap if np.ndim(energy) else (energy - spec.e0) / spec.gap


# --- batched evaluators for the engine ----------------------------------------


def expectation_batch(op):
    """Column-wise ``<psi|A|psi>`` for normalised columns."""
    op = op.tocsr() if sp.issparse(op) else np.asarray(op)

    def evaluate(psi: np.ndarray) -> np.ndarray:
        return np.real(np.einsum("ij,ij->j", psi.conj(), op @ psi))

    return evaluate


def manifold_fidelity_batch(vectors: np.ndarray, n_bath: int = 1):
    """Column-wise weight of the system ground manifold (bath traced over)."""
    v = np.asarray(vectors)
    sys_dim = v.shape[0]
    bath_dim = 2**n_bath
    vh = v.conj().T

    def evaluate(psi: np.ndarray) -> np.ndarray:
        n = psi.shape[1]
        # psi[(sys, bath), traj] -> overlaps[(manifold), (bath, traj)]
        amps = vh @ psi.reshape(sys_dim, bath_dim * n)
        return (np.abs(amps) ** 2).reshape(v.shape[1], bath_dim, n).sum(axis=(0, 1))

    return evaluate


def bath_up_batch(n_spins: int):
    return expectation_batch(bath_up_projector(n_spins))


# --- dissipated energy ---------------------------------------------------------


class DissipationMethod(str, enum.Enum):
    DIRECT_COUNT = "direct_count"
    UP_POPULATION_INTEGRAL = "up_population_integral"


@dataclass(frozen=True)
class DissipationEstimate:
    n_jump_count: float
    n_jump_count_sem: float
    n_jump_integral: float
    n_jump_integral_sem: float
    delta: float
    method: DissipationMethod = DissipationMethod.DIRECT_COUNT

    @property
    def e_dis(self) -> float:
        n = self.n_jump_count if self.method is DissipationMethod.DIRECT_COUNT else self.n_jump_integral
        return n * self.delta

    @property
    def e_dis_count(self) -> float:
        return self.n_jump_count * self.delta

    @property
    def e_dis_integral(self) -> float:
        return self.n_jump_integral * self.delta

    @property
    def combined_sem(self) -> float:
        return math.hypot(self.n_jump_count_sem, self.n_jump_integral_sem)

    def consistent(self, n_sigma: float = 4.0) -> bool:
        return abs(self.n_jump_count - self.n_jump_integral) <= n_sigma * self.combined_sem


def dissipated_energy(ensemble, delta: float, gamma: float, channel: int = 0,
                      method: DissipationMethod = DissipationMethod.DIRECT_COUNT) -> DissipationEstimate:
    """Jump-count and up-population estimators of ``N_jump`` and ``E_dis = N_jump delta``.

    The integral estimator is ``gamma * int <sigma_+ sigma_-> dt`` by the
    trapezoid rule on the output grid.
    """
    if "bath_up" not in ensemble.mean:
        raise ValidationError("ensemble lacks the 'bath_up' series needed for the integral estimator")
    counts = np.asarray(ensemble.jump_counts)[:, channel].astype(float)
    n = len(counts)
    count_mean = float(counts.mean())
    count_sem = float(counts.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    if "integral_bath_up" in ensemble.scalars:
        per_traj = gamma * ensemble.scalars["integral_bath_up"]
        integral = float(per_traj.mean())
        integral_sem = float(per_traj.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    else:
        from scipy.integrate import trapezoid

        integral = float(gamma * trapezoid(ensemble.mean["bath_up"], ensemble.times))
        integral_sem = float(gamma * trapezoid(ensemble.sem["bath_up"], ensemble.times))
    return DissipationEstimate(count_mean, count_sem, integral, integral_sem, float(delta), DissipationMethod(method))


# --- entanglement ------------------------------------------------------------------


@dataclass(frozen=True)
class BipartitionSpec:
    """Sites traced out first, and block A of the remaining sites.

    ``None`` means the defaults: trace the last site (the bath) and take
    the first ``floor(n/2)`` remaining sites as block A.
    """

    traced_sites: tuple[int, ...] | None = None
    block_a: tuple[int, ...] | None = None

    def resolve(self, n_spins: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        traced = tuple(sorted(set(self.traced_sites))) if self.traced_sites is not None else (n_spins - 1,)
        if any(not 0 <= s < n_spins for s in traced):
            raise ValidationError("traced site out of range")
        remaining = tuple(s for s in range(n_spins) if s not in traced)
        block = tuple(sorted(set(self.block_a))) if self.block_a is not None else remaining[: len(remaining) // 2]
        if not block or not set(block) < set(remaining):
            raise ValidationError("block A must be a proper nonempty subset of the remaining sites")
        return traced, remaining, block


def _n_spins(dim: int) -> int:
    n = int(round(math.log2(dim)))
    if 2**n != dim:
        raise ValidationError(f"dimension {dim} is not a power of two")
    return n


def partial_trace(rho: np.ndarray, keep: tuple[int, ...], n_spins: int) -> np.ndarray:
    """Reduced density matrix on the sites ``keep`` (order preserved)."""
    t = np.asarray(rho).reshape((2,) * (2 * n_spins))
    traced = [s for s in range(n_spins) if s not in keep]
    # contract each traced ket index with its bra partner, highest first
    for s in sorted(traced, reverse=True):
        m = t.ndim // 2
        t = np.trace(t, axis1=s, axis2=s + m)
    k = 2 ** len(keep)
    return t.reshape(k, k)


def partial_transpose(rho: np.ndarray, sites: tuple[int, ...], n_spins: int) -> np.ndarray:
    t = np.asarray(rho).reshape((2,) * (2 * n_spins))
    axes = list(range(2 * n_spins))
    for s in sites:
        axes[s], axes[s + n_spins] = axes[s + n_spins], axes[s]
    d = 2**n_spins
    return t.transpose(axes).reshape(d, d)


def negativity(rho, split: BipartitionSpec | None = None) -> float:
    """``(||rho^{T_A}||_1 - 1) / 2`` after tracing out ``split.traced_sites``."""
    rho = np.asarray(dense(rho))
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    n = _n_spins(rho.shape[0])
    split = split or BipartitionSpec()
    traced, remaining, block = split.resolve(n)
    if np.max(np.abs(rho - rho.conj().T)) > 1e-8:
        raise ValidationError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > 1e-8:
        raise ValidationError("density matrix does not have unit trace")
    reduced = partial_trace(rho, remaining, n) if traced else rho
    local = tuple(remaining.index(s) for s in block)
    pt = partial_transpose(reduced, local, len(remaining))
    evals = np.linalg.eigvalsh(0.5 * (pt + pt.conj().T))
    return float(max(0.0, (np.sum(np.abs(evals)) - 1.0) / 2.0))


def clip_density(rho: np.ndarray) -> tuple[np.ndarray, float]:
    """Project onto the PSD cone; returns the matrix and the clipped mass."""
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    clipped = float(-w[w < 0].sum())
    w = np.clip(w, 0.0, None)
    out = (v * w) @ v.conj().T
    return out / np.trace(out).real, clipped


@dataclass(frozen=True)
class NegativitySeries:
    times: np.ndarray
    normalized_times: np.ndarray | None  # times / t_p when a preparation time is given
    values: np.ndarray

    def rows(self):
        scaled = self.normalized_times if self.normalized_times is not None else np.full_like(self.times, np.nan)
        return list(zip(self.times.tolist(), scaled.tolist(), self.values.tolist()))


def negativity_series(ensemble, split: BipartitionSpec | None = None, t_p: float | None = None) -> NegativitySeries:
    """Negativity of the ensemble density matrices kept at ``ensemble.rho_times``."""
    if ensemble.rho is None:
        raise ValidationError("ensemble has no density-matrix samples; set rho_samples on the run")
    times = np.asarray(ensemble.rho_times, dtype=float)
    values = np.array([negativity(rho, split) for rho in ensemble.rho])
    if t_p is not None and not t_p > 0:
        raise ValidationError("t_p must be positive")
    return NegativitySeries(times, times / t_p if t_p else None, values)
