"""Many-spin operators for a spin chain plus one bath spin.

Basis convention (used by every module):

* ``|up>`` is the sigma_z = +1 eigenstate and has local index 0,
  ``|down>`` has local index 1.
* Sites are big-endian: site 0 is the most significant bit of a basis
  index. The system spins occupy sites ``0 .. N-1`` and the bath spin,
  when present, is site ``N`` (the least significant bit).

Operators are returned as ``scipy.sparse.csr_matrix``; call ``.toarray()``
for a dense copy. Units have hbar = 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, ValidationError

#: Largest number of spins (system + bath) any builder will accept.
MAX_SPINS = 14

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# sigma_minus |up> = |down>
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.T.copy()
PAULI = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}

ISING_F = (1.0, 1.1, 0.9)
HEISENBERG_F = (0.4, 2.3, 0.3)


class ModelKind(str, enum.Enum):
    TRANSVERSE_ISING = "ising"
    POWER_LAW_ISING = "power_law_ising"
    HEISENBERG = "heisenberg"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "transverseising": "ising",
            "transverse_ising": "ising",
            "tfim": "ising",
            "powerlawising": "power_law_ising",
            "powerlaw": "power_law_ising",
            "power_law": "power_law_ising",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown model kind {value!r}", key="model.kind") from None


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the system Hamiltonian."""

    kind: ModelKind
    n_sites: int
    j: float = 1.0
    g: float = 0.0
    alpha_lr: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        if int(self.n_sites) != self.n_sites or self.n_sites < 1:
            raise ValidationError(f"n_sites must be a positive integer, got {self.n_sites}", key="model.n")
        object.__setattr__(self, "n_sites", int(self.n_sites))
        # j = 0 (free spins) is allowed for the Ising kinds only
        if not (self.j > 0 or (self.j == 0 and self.kind is not ModelKind.HEISENBERG)):
            raise ValidationError(f"coupling j must be > 0, got {self.j}", key="model.j")
        if self.kind is not ModelKind.HEISENBERG and not self.g > 0:
            raise ValidationError(f"transverse field g must be > 0, got {self.g}", key="model.g")
        if self.kind is ModelKind.POWER_LAW_ISING and not self.alpha_lr >= 0:
            raise ValidationError("alpha_lr must be >= 0", key="model.alpha_lr")

    @property
    def energy_scale(self) -> float:
        """Unit in which rates and times are quoted (g for Ising, J for Heisenberg)."""
        return self.j if self.kind is ModelKind.HEISENBERG else self.g

    def couplings(self) -> list[tuple[int, int, float]]:
        """Pairwise couplings ``(i, j, J_ij)`` with ``i < j``."""
        n = self.n_sites
        if self.kind is ModelKind.POWER_LAW_ISING:
            return [(a, b, self.j / (b - a) ** self.alpha_lr) for a in range(n) for b in range(a + 1, n)]
        return [(a, a + 1, self.j) for a in range(n - 1)]


@dataclass(frozen=True)
class BathSpec:
    """Bath spin splitting, decay rate and system-bath coupling.

    ``delta`` may be the string ``"auto"``, meaning the many-body gap of the
    system Hamiltonian. ``f`` and ``site_weights`` default to the Ising
    choice; use :meth:`for_model` to get the model-specific defaults.
    """

    delta: float | str = "auto"
    gamma: float = 1.0
    g_sb: float = 1.0
    f: tuple[float, float, float] = ISING_F
    site_weights: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        if isinstance(self.delta, str):
            if self.delta.strip().lower() != "auto":
                raise ValidationError(f"bath.delta must be a number or 'auto', got {self.delta!r}", key="bath.delta")
            object.__setattr__(self, "delta", "auto")
        elif not math.isfinite(self.delta):
            raise ValidationError("bath.delta must be finite", key="bath.delta")
        if not self.gamma >= 0:
            raise ValidationError(f"bath.gamma must be >= 0, got {self.gamma}", key="bath.gamma")
        if not self.g_sb >= 0:
            raise ValidationError(f"bath.g_sb must be >= 0, got {self.g_sb}", key="bath.g_sb")
        if len(self.f) != 3:
            raise ValidationError("bath.f needs three components", key="bath.f")
        object.__setattr__(self, "f", tuple(float(x) for x in self.f))
        if self.site_weights is not None:
            weights = tuple((int(s), float(w)) for s, w in self.site_weights)
            if not weights:
                raise ValidationError("bath.sites must not be empty", key="bath.sites")
            for s, w in weights:
                if s < 0:
                    raise ValidationError(f"bath site {s} out of range", key="bath.sites")
                if not w > 0:
                    raise ValidationError(f"bath site weight must be > 0, got {w}", key="bath.sites")
            object.__setattr__(self, "site_weights", weights)

    @classmethod
    def for_model(cls, model: ModelSpec, **kwargs) -> "BathSpec":
        """Bath with the model-specific defaults for ``f`` and ``site_weights``."""
        n = model.n_sites
        if model.kind is ModelKind.HEISENBERG:
            kwargs.setdefault("f", HEISENBERG_F)
            kwargs.setdefault("site_weights", ((n - 1, 1.0), (n - 2, 0.5)) if n >= 2 else ((0, 1.0),))
        else:
            kwargs.setdefault("f", ISING_F)
        return cls(**kwargs)

    def weights_for(self, n_sites: int) -> tuple[tuple[int, float], ...]:
        weights = self.site_weights if self.site_weights is not None else ((n_sites - 1, 1.0),)
        for s, _ in weights:
            if not 0 <= s < n_sites:
                raise ValidationError(f"bath site {s} outside [0, {n_sites - 1}]", key="bath.sites")
        return weights


@dataclass(frozen=True)
class DecoherenceSpec:
    """Unwanted noise in the simulator: per-site and collective sigma_z rates."""

    kappa: float = 0.0
    kappa_c: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValidationError(f"noise.kappa must be >= 0, got {self.kappa}", key="noise.kappa")
        if not self.kappa_c >= 0:
            raise ValidationError(f"noise.kappa_c must be >= 0, got {self.kappa_c}", key="noise.kappa_c")


@dataclass(frozen=True)
class JumpOperator:
    op: sp.csr_matrix
    rate: float
    label: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "op", sp.csr_matrix(self.op, dtype=complex))
        if not self.rate >= 0:
            raise ValidationError(f"jump rate must be >= 0, got {self.rate}")

    @property
    def scaled(self) -> sp.csr_matrix:
        """``sqrt(rate) * op``, the form used by the trajectory engine."""
        return (math.sqrt(self.rate) * self.op).tocsr()


def check_capacity(n_spins: int, cap: int | None = None) -> None:
    cap = MAX_SPINS if cap is None else cap
    if n_spins > cap:
        raise CapacityError(f"{n_spins} spins exceed the capacity cap of {cap} (dimension 2^{n_spins})")


def site_operator(local: np.ndarray, site: int, n_spins: int) -> sp.csr_matrix:
    """Embed a 2x2 operator at ``site`` with identities elsewhere."""
    if not 0 <= site < n_spins:
        raise ValidationError(f"site {site} outside [0, {n_spins - 1}]")
    left = sp.identity(2**site, dtype=complex, format="csr")
    right = sp.identity(2 ** (n_spins - site - 1), dtype=complex, format="csr")
    return sp.kron(sp.kron(left, sp.csr_matrix(local)), right, format="csr")


def two_site_operator(a: np.ndarray, i: int, b: np.ndarray, j: int, n_spins: int) -> sp.csr_matrix:
    return (site_operator(a, i, n_spins) @ site_operator(b, j, n_spins)).tocsr()


def _zero(n_spins: int) -> sp.csr_matrix:
    return sp.csr_matrix((2**n_spins, 2**n_spins), dtype=complex)


def build_system_hamiltonian(spec: ModelSpec, n_spins: int | None = None, cap: int | None = None) -> sp.csr_matrix:
    """System Hamiltonian on ``n_spins`` spins (default: just the chain).

    Passing ``n_spins = N + 1`` embeds it in the joint space with the bath.
    """
    n = spec.n_sites
    total = n if n_spins is None else n_spins
    if total < n:
        raise ValidationError("n_spins smaller than the chain length")
    check_capacity(total, cap)
    h = _zero(total)
    if spec.kind is ModelKind.HEISENBERG:
        for i, k, jij in spec.couplings():
            for p in PAULI.values():
                h = h + jij * two_site_operator(p, i, p, k, total)
    else:
        for i in range(n):
            h = h + spec.g * site_operator(SIGMA_Z, i, total)
        for i, k, jij in spec.couplings():
            h = h - jij * two_site_operator(SIGMA_X, i, SIGMA_X, k, total)
    h = h.tocsr()
    h.eliminate_zeros()
    return h


def build_bath_hamiltonian(bath: BathSpec, n_spins: int, delta: float | None = None) -> sp.csr_matrix:
    """``(delta/2) sigma_z`` on the bath site (index ``n_spins - 1``)."""
    check_capacity(n_spins)
    d = bath.delta if delta is None else delta
    if d == "auto":
        raise ValidationError("bath.delta is 'auto'; resolve it before building the bath Hamiltonian", key="bath.delta")
    return (0.5 * float(d) * site_operator(SIGMA_Z, n_spins - 1, n_spins)).tocsr()


def build_interaction_hamiltonian(bath: BathSpec, n_sites: int) -> sp.csr_matrix:
    """Sum over coupled sites s of ``w_s g_sb sum_i f_i sigma_i^(s) sigma_i^(b)``."""
    total = n_sites + 1
    check_capacity(total)
    h = _zero(total)
    for site, weight in bath.weights_for(n_sites):
        for fi, p in zip(bath.f, PAULI.values()):
            if fi != 0.0:
                h = h + weight * bath.g_sb * fi * two_site_operator(p, site, p, n_sites, total)
    h = h.tocsr()
    h.eliminate_zeros()
    return h


def build_jump_operators(
    bath: BathSpec, decoherence: DecoherenceSpec | None, n_sites: int
) -> list[JumpOperator]:
    """Bath decay first, then per-site dephasing, then collective dephasing."""
    decoherence = decoherence or DecoherenceSpec()
    total = n_sites + 1
    check_capacity(total)
    jumps = [JumpOperator(site_operator(SIGMA_MINUS, n_sites, total), float(bath.gamma), "bath")]
    if decoherence.kappa > 0:
        for i in range(n_sites):
            jumps.append(JumpOperator(site_operator(SIGMA_Z, i, total), float(decoherence.kappa), f"dephase{i}"))
    if decoherence.kappa_c > 0:
        collective = sum(site_operator(SIGMA_Z, i, total) for i in range(n_sites)).tocsr()
        jumps.append(JumpOperator(collective, float(decoherence.kappa_c), "collective"))
    return jumps


def total_sz(n_sites: int, n_spins: int | None = None) -> sp.csr_matrix:
    n_spins = n_sites if n_spins is None else n_spins
    return sum(site_operator(SIGMA_Z, i, n_spins) for i in range(n_sites)).tocsr()


def bath_up_projector(n_spins: int) -> sp.csr_matrix:
    """``sigma_+ sigma_-`` on the bath site."""
    return site_operator(SIGMA_PLUS @ SIGMA_MINUS, n_spins - 1, n_spins)


def is_hermitian(op, rtol: float = 1e-12) -> bool:
    a = op.toarray() if sp.issparse(op) else np.asarray(op)
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        return True
    return bool(np.max(np.abs(a - a.conj().T)) < rtol * scale)


def dense(op) -> np.ndarray:
    return op.toarray() if sp.issparse(op) else np.asarray(op)


def product_state(spins: Sequence[int | str]) -> np.ndarray:
    """Product state from a spin list; ``0``/``'u'`` is up, ``1``/``'d'`` is down."""
    index = 0
    for s in spins:
        bit = {"u": 0, "d": 1, "0": 0, "1": 1}.get(s, s) if isinstance(s, str) else int(s)
        if bit not in (0, 1):
            raise ValidationError(f"spin value {s!r} is not up/down")
        index = 2 * index + bit
    psi = np.zeros(2 ** len(spins), dtype=complex)
    psi[index] = 1.0
    return psi


def kron_states(*states: np.ndarray) -> np.ndarray:
    out = np.ones(1, dtype=complex)
    for s in states:
        out = np.kron(out, s)
    return out
