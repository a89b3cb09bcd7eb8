"""Exact diagonalisation of the system Hamiltonian.

Provides the ground manifold and many-body gap used to tune the bath,
the finite-size susceptibility scan that locates the Ising critical
point, and the energy-window transition graph between eigenstates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .operators import ModelKind, ModelSpec, build_system_hamiltonian, dense

DEFAULT_THETA = 0.1


@dataclass(frozen=True)
class SpectrumInfo:
    energies: np.ndarray
    ground_manifold: np.ndarray  # columns are orthonormal ground states
    e0: float
    gap: float
    manifold_dim: int
    norm: float = field(default=1.0)

    @property
    def first_excited(self) -> float:
        return self.e0 + self.gap


def ground_manifold_size(energies: np.ndarray, theta: float = DEFAULT_THETA) -> int:
    """Gap-ratio clustering of the lowest levels.

    Level k joins the manifold iff ``E_k - E_0 < theta (E_{k+1} - E_0)``,
    tested for k = 1, 2, ... until the first failure.
    """
    e = np.asarray(energies)
    m = 1
    for k in range(1, len(e) - 1):
        if e[k] - e[0] < theta * (e[k + 1] - e[0]):
            m = k + 1
        else:
            break
    return m


def exact_spectrum(h_sys, cluster_theta: float = DEFAULT_THETA) -> SpectrumInfo:
    """Full dense diagonalisation with ground-manifold clustering."""
    h = dense(h_sys)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValidationError("Hamiltonian must be a square matrix")
    if h.shape[0] > 2**14:
        raise ValidationError("dimension above 2^14 is not supported by the dense solver")
    scale = np.max(np.abs(h)) if h.size else 0.0
    if scale > 0 and np.max(np.abs(h - h.conj().T)) >= 1e-12 * scale:
        raise ValidationError("Hamiltonian is not Hermitian")
    energies, vectors = np.linalg.eigh(h)
    m = ground_manifold_size(energies, cluster_theta)
    if m >= len(energies):
        raise ValidationError("spectrum has no level outside the ground manifold; gap undefined")
    gap = float(energies[m] - energies[0])
    if not gap > 0:
        raise ValidationError("non-positive many-body gap")
    return SpectrumInfo(
        energies=energies,
        ground_manifold=vectors[:, :m].copy(),
        e0=float(energies[0]),
        gap=gap,
        manifold_dim=m,
        norm=float(np.max(np.abs(energies))),
    )


def model_spectrum(model: ModelSpec, cluster_theta: float = DEFAULT_THETA) -> SpectrumInfo:
    return exact_spectrum(build_system_hamiltonian(model), cluster_theta)


def ground_projector(spec: SpectrumInfo, with_bath: bool = False) -> np.ndarray:
    """Projector onto the ground manifold, optionally extended by the bath identity."""
    v = spec.ground_manifold
    proj = v @ v.conj().T
    if with_bath:
        proj = np.kron(proj, np.eye(2))
    return proj


# --- critical point -------------------------------------------------------


@dataclass(frozen=True)
class SusceptibilityScan:
    g: np.ndarray
    chi: np.ndarray
    chi_reduced: np.ndarray
    j: float

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.chi_reduced))

    @property
    def g_peak(self) -> float:
        return float(self.g[self.peak_index])

    @property
    def j_over_g_peak(self) -> float:
        return self.j / self.g_peak

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.g.tolist(), self.chi.tolist()))


def _ground_energy(model: ModelSpec) -> float:
    h = build_system_hamiltonian(model).toarray()
    return float(np.linalg.eigvalsh(h)[0])


def susceptibility_scan(base: ModelSpec, g_grid) -> SusceptibilityScan:
    """Transverse susceptibility ``chi(g) = -d^2 E_0 / dg^2`` over a field grid.

    Central differences with step ``1e-3 g``. The peak is located on
    ``g * chi``, the susceptibility expressed in units of the field (the
    energy unit of the Ising runs), which is what makes the finite-size
    peak a function of ``J/g`` alone.
    """
    if base.kind is not ModelKind.TRANSVERSE_ISING:
        raise ValidationError("susceptibility scan needs a transverse Ising model")
    grid = np.asarray(g_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 3:
        raise ValidationError("g grid needs at least 3 points")
    if np.any(grid <= 0):
        raise ValidationError("g grid must be positive")
    chi = np.empty_like(grid)
    for k, g in enumerate(grid):
        h = 1e-3 * g
        e_minus, e_mid, e_plus = (_ground_energy(replace(base, g=x)) for x in (g - h, g, g + h))
        chi[k] = -(e_plus - 2.0 * e_mid + e_minus) / h**2
    return SusceptibilityScan(g=grid, chi=chi, chi_reduced=grid * chi, j=base.j)


# --- transition graph -----------------------------------------------------


@dataclass
class TransitionGraph:
    energies: np.ndarray
    edges: list[tuple[int, int]]
    delta: float
    gamma: float
    manifold_dim: int

    def successors(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in range(len(self.energies))}
        for i, j in self.edges:
            out[i].append(j)
        return out

    def reachable(self) -> np.ndarray:
        """For each eigenstate, whether a directed path reaches the ground manifold."""
        preds: dict[int, list[int]] = {i: [] for i in range(len(self.energies))}
        for i, j in self.edges:
            preds[j].append(i)
        seen = np.zeros(len(self.energies), dtype=bool)
        queue = deque(range(self.manifold_dim))
        seen[: self.manifold_dim] = True
        while queue:
            node = queue.popleft()
            for p in preds[node]:
                if not seen[p]:
                    seen[p] = True
                    queue.append(p)
        return seen

    def has_cycle(self) -> bool:
        succ = self.successors()
        state = np.zeros(len(self.energies), dtype=np.int8)  # 0 new, 1 open, 2 done
        for start in range(len(self.energies)):
            if state[start]:
                continue
            stack = [(start, iter(succ[start]))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state[nxt] == 1:
                    return True
                elif state[nxt] == 0:
                    state[nxt] = 1
                    stack.append((nxt, iter(succ[nxt])))
        return False

    def to_edge_list(self) -> str:
        lines = [f"# delta = {self.delta!r} gamma = {self.gamma!r}"]
        for i, j in self.edges:
            lines.append(f"{i} {j} {float(self.energies[i])!r} {float(self.energies[j])!r}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_edge_list(), encoding="utf-8")


def cooling_transition_graph(spec: SpectrumInfo, delta: float, gamma: float) -> TransitionGraph:
    """All ordered pairs with ``delta - gamma <= E_i - E_j <= delta + gamma``."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    e = np.asarray(spec.energies)
    diff = e[:, None] - e[None, :]
    mask = (diff >= delta - gamma) & (diff <= delta + gamma)
    np.fill_diagonal(mask, False)
    i, j = np.nonzero(mask)
    return TransitionGraph(e, list(zip(i.tolist(), j.tolist())), float(delta), float(gamma), spec.manifold_dim)


def spectrum_of(op) -> np.ndarray:
    """Sorted eigenvalues of a Hermitian operator (sparse or dense)."""
    a = op.toarray() if sp.issparse(op) else np.asarray(op)
    return np.linalg.eigvalsh(a)
