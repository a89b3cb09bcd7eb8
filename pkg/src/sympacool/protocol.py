"""Complete cooling experiments.

A :class:`RunSpec` bundles the model, the bath, unwanted noise, the initial
state and the run length. :func:`run_cooling` turns it into an ensemble of
trajectories; sweeps over the bath splitting, preparation times and the
decoherence study are built on top of it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .dynamics import EnsembleResult, Propagator, TrajectoryProblem, run_ensemble, uniform_grid
from .errors import NotConvergedError, ValidationError
from .observables import (
    bath_up_batch,
    dissipated_energy,
    expectation_batch,
    manifold_fidelity_batch,
)
from .operators import (
    BathSpec,
    DecoherenceSpec,
    ModelKind,
    ModelSpec,
    build_bath_hamiltonian,
    build_interaction_hamiltonian,
    build_jump_operators,
    build_system_hamiltonian,
    kron_states,
    product_state,
)
from .spectrum import DEFAULT_THETA, SpectrumInfo, model_spectrum

DEFAULT_T_MAX = 100.0

__all__ = [
    "DecoherenceSpec",
    "InitialState",
    "RunSpec",
    "SweepResult",
    "DecoherencePoint",
    "resolve_delta",
    "run_cooling",
    "sweep_delta",
    "preparation_time",
    "decoherence_study",
    "load_config",
    "runspec_from_config",
    "runspec_to_config",
]


class InitialKind(str, enum.Enum):
    ALL_UP = "all_up"
    NEEL = "neel"
    RANDOM_PRODUCT = "random"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class InitialState:
    """Initial system state; the bath spin is added separately."""

    kind: InitialKind = InitialKind.ALL_UP
    seed: int | None = None
    vector: tuple | None = None

    @classmethod
    def all_up(cls) -> "InitialState":
        return cls(InitialKind.ALL_UP)

    @classmethod
    def neel(cls) -> "InitialState":
        return cls(InitialKind.NEEL)

    @classmethod
    def random_product(cls, seed: int) -> "InitialState":
        return cls(InitialKind.RANDOM_PRODUCT, seed=int(seed))

    @classmethod
    def explicit(cls, psi) -> "InitialState":
        return cls(InitialKind.EXPLICIT, vector=tuple(np.asarray(psi, dtype=complex).tolist()))

    @classmethod
    def parse(cls, text: str) -> "InitialState":
        """``all_up``, ``neel``, ``random:<seed>`` or ``spins:<u/d string>``."""
        text = text.strip().lower()
        if text in ("all_up", "allup", "up"):
            return cls.all_up()
        if text == "neel":
            return cls.neel()
        if text.startswith("random:"):
            try:
                return cls.random_product(int(text.split(":", 1)[1]))
            except ValueError:
                raise ValidationError(f"bad random seed in init = {text!r}", key="init") from None
        if text.startswith("spins:"):
            spins = text.split(":", 1)[1].strip()
            if not spins or set(spins) - {"u", "d"}:
                raise ValidationError(f"init spins must be a u/d string, got {spins!r}", key="init")
            return cls.explicit(product_state(list(spins)))
        raise ValidationError(f"unknown init {text!r}", key="init")

    def spins(self, n_sites: int) -> list[int] | None:
        if self.kind is InitialKind.ALL_UP:
            return [0] * n_sites
        if self.kind is InitialKind.NEEL:
            # site 0 up
            return [i % 2 for i in range(n_sites)]
        if self.kind is InitialKind.RANDOM_PRODUCT:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))
            return rng.integers(0, 2, size=n_sites).tolist()
        return None

    def materialize(self, n_sites: int) -> np.ndarray:
        spins = self.spins(n_sites)
        if spins is not None:
            return product_state(spins)
        psi = np.asarray(self.vector, dtype=complex)
        if psi.shape != (2**n_sites,):
            raise ValidationError(f"explicit initial state must have length {2**n_sites}", key="init")
        if abs(np.vdot(psi, psi).real - 1.0) > 1e-8:
            raise ValidationError("explicit initial state is not normalised", key="init")
        return psi

    def describe(self) -> str:
        if self.kind is InitialKind.RANDOM_PRODUCT:
            return f"random:{self.seed}"
        if self.kind is InitialKind.EXPLICIT:
            psi = np.asarray(self.vector, dtype=complex)
            nz = np.flatnonzero(np.abs(psi) > 0)
            if len(nz) == 1 and abs(abs(psi[nz[0]]) - 1) < 1e-12:
                n = int(round(math.log2(len(psi))))
                return "spins:" + format(int(nz[0]), f"0{n}b").replace("0", "u").replace("1", "d")
            return "explicit"
        return self.kind.value


@dataclass(frozen=True)
class RunSpec:
    model: ModelSpec
    bath: BathSpec
    decoherence: DecoherenceSpec = field(default_factory=DecoherenceSpec)
    initial_state: InitialState = field(default_factory=InitialState)
    t_max: float = DEFAULT_T_MAX
    n_grid: int = 400
    track: frozenset = frozenset({"energy", "fidelity", "bath_up"})
    bath_init: str = "down"
    rho_samples: int = 0  # number of uniform times at which the ensemble rho is kept
    cluster_theta: float = DEFAULT_THETA

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValidationError(f"t_max must be > 0, got {self.t_max}", key="t_max")
        if int(self.n_grid) != self.n_grid or self.n_grid < 2:
            raise ValidationError(f"n_grid must be an integer >= 2, got {self.n_grid}", key="n_grid")
        if self.bath_init not in ("down", "up"):
            raise ValidationError("bath_init must be 'down' or 'up'")
        self.bath.weights_for(self.model.n_sites)

    @property
    def n_spins(self) -> int:
        return self.model.n_sites + 1

    def with_params(self, **bath_changes) -> "RunSpec":
        return replace(self, bath=replace(self.bath, **bath_changes))


def spectrum_for(run: RunSpec) -> SpectrumInfo:
    return model_spectrum(run.model, run.cluster_theta)


def resolve_delta(run: RunSpec, spectrum: SpectrumInfo | None = None) -> float:
    """The bath splitting; ``"auto"`` means the many-body gap."""
    if run.bath.delta == "auto":
        return (spectrum or spectrum_for(run)).gap
    return float(run.bath.delta)


def initial_joint_state(run: RunSpec) -> np.ndarray:
    bath = product_state([0 if run.bath_init == "up" else 1])
    return kron_states(run.initial_state.materialize(run.model.n_sites), bath)


def build_problem(run: RunSpec, spectrum: SpectrumInfo | None = None, delta: float | None = None,
                  grid: np.ndarray | None = None) -> TrajectoryProblem:
    spectrum = spectrum or spectrum_for(run)
    delta = resolve_delta(run, spectrum) if delta is None else delta
    n, total = run.model.n_sites, run.n_spins
    h_sys = build_system_hamiltonian(run.model, total)
    h_total = h_sys + build_bath_hamiltonian(run.bath, total, delta) + build_interaction_hamiltonian(run.bath, n)
    jumps = build_jump_operators(run.bath, run.decoherence, n)
    grid = uniform_grid(run.t_max, run.n_grid) if grid is None else grid
    available = {
        "energy": lambda: expectation_batch(h_sys),
        "fidelity": lambda: manifold_fidelity_batch(spectrum.ground_manifold),
        "bath_up": lambda: bath_up_batch(total),
    }
    unknown = set(run.track) - set(available)
    if unknown:
        raise ValidationError(f"unknown tracked observables {sorted(unknown)}")
    names = sorted(set(run.track) | {"energy", "bath_up"})
    observables = {name: available[name]() for name in names}
    rho_index: tuple[int, ...] = ()
    if run.rho_samples:
        rho_index = tuple(sorted(set(np.linspace(0, len(grid) - 1, run.rho_samples).round().astype(int).tolist())))
    return TrajectoryProblem(
        h_total=h_total,
        jumps=jumps,
        psi0=initial_joint_state(run),
        grid=grid,
        observables=observables,
        rho_index=rho_index,
        cumulative_channel=0,
        integrate={"bath_up": 1.0},
    )


def run_cooling(run: RunSpec, n_traj: int, master_seed: int, threads: int | None = 1,
                stream: Iterable[int] = (), keep_events: bool = False) -> EnsembleResult:
    """Ensemble of cooling trajectories with fidelity and epsilon attached.

    The returned result carries ``spectrum`` and ``delta`` in ``extras``.
    """
    spectrum = spectrum_for(run)
    delta = resolve_delta(run, spectrum)
    problem = build_problem(run, spectrum, delta)
    result = run_ensemble(problem, n_traj, master_seed, threads=threads, stream=tuple(stream),
                          keep_events=keep_events, propagator=Propagator(problem.h_total, problem.jumps))
    result.mean["epsilon"] = (result.mean["energy"] - spectrum.e0) / spectrum.gap
    result.sem["epsilon"] = result.sem["energy"] / spectrum.gap
    result.extras.update(spectrum=spectrum, delta=delta, run=run)
    return result


# --- sweeps -------------------------------------------------------------------


@dataclass
class SweepResult:
    """Per-point series of a bath-splitting sweep.

    ``e_dis`` is the dissipated energy ``N_jump * delta`` accumulated up to the
    preparation window: the time at which the lowest-energy point first reaches
    ``eps_target`` (``t_max`` if it never does), or ``window`` when given.
    ``e_dis_full`` counts every jump up to ``t_max``.
    """

    delta_grid: np.ndarray
    times: np.ndarray
    energy: np.ndarray  # (points, times)
    energy_sem: np.ndarray
    epsilon: np.ndarray
    fidelity: np.ndarray
    cumulative_jumps: np.ndarray
    bath_up: np.ndarray
    gamma: float
    gap_reference: float
    eps_target: float = 0.2
    window: float | None = None
    argmin_energy: float = field(init=False)
    argmin_edis: float = field(init=False)

    def __post_init__(self):
        best = int(np.argmin(self.final_energy))
        self.argmin_energy = float(self.delta_grid[best])
        if self.window is None:
            try:
                self.window = first_crossing(self.times, self.epsilon[best], self.eps_target)
            except NotConvergedError:
                self.window = float(self.times[-1])
        # energy leaves the system, so the energy balance -E_dis has its minimum
        # where the most energy was carried away
        self.argmin_edis = float(self.delta_grid[int(np.argmin(-self.e_dis))])

    def _at_window(self, series: np.ndarray) -> np.ndarray:
        return np.array([np.interp(self.window, self.times, row) for row in series])

    @property
    def final_energy(self) -> np.ndarray:
        return self.energy[:, -1]

    @property
    def final_energy_sem(self) -> np.ndarray:
        return self.energy_sem[:, -1]

    @property
    def final_fidelity(self) -> np.ndarray:
        return self.fidelity[:, -1]

    @property
    def e_dis(self) -> np.ndarray:
        return self._at_window(self.cumulative_jumps) * self.delta_grid

    @property
    def e_dis_integral(self) -> np.ndarray:
        n_jump = self.gamma * cumulative_trapezoid(self.bath_up, self.times, axis=1, initial=0.0)
        return self._at_window(n_jump) * self.delta_grid

    @property
    def e_dis_full(self) -> np.ndarray:
        return self.cumulative_jumps[:, -1] * self.delta_grid

    @property
    def grid_step(self) -> float:
        return float(np.max(np.diff(self.delta_grid)))

    def fidelity_at_optimum(self) -> float:
        return float(self.final_fidelity[int(np.argmin(self.final_energy))])


def sweep_delta(run: RunSpec, delta_grid, n_traj: int, master_seed: int, threads: int | None = 1,
                eps_target: float = 0.2, window: float | None = None) -> SweepResult:
    """One cooling run per bath splitting; grid point k uses random stream ``(k,)``."""
    grid = np.asarray(delta_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 3:
        raise ValidationError("delta grid needs at least 3 points", key="sweep")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("delta grid must be strictly increasing", key="sweep")
    if window is not None and not 0 < window <= run.t_max:
        raise ValidationError("window must lie in (0, t_max]", key="sweep")
    spectrum = spectrum_for(run)
    names = ("energy", "epsilon", "fidelity", "cumulative_jumps", "bath_up")
    rows: dict[str, list] = {k: [] for k in (*names, "energy_sem")}
    times = None
    for k, delta in enumerate(grid):
        res = run_cooling(run.with_params(delta=float(delta)), n_traj, master_seed, threads=threads, stream=(k,))
        times = res.times
        for name in names:
            rows[name].append(res.mean[name])
        rows["energy_sem"].append(res.sem["energy"])
    arr = {k: np.array(v) for k, v in rows.items()}
    return SweepResult(grid, np.asarray(times), arr["energy"], arr["energy_sem"], arr["epsilon"], arr["fidelity"],
                       arr["cumulative_jumps"], arr["bath_up"], run.bath.gamma, spectrum.gap,
                       eps_target=eps_target, window=window)


def first_crossing(times, series, target: float, below: bool = True) -> float:
    """First time ``series`` crosses ``target``, linearly interpolated."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    if not below:
        y, target = -y, -target
    if y[0] < target:
        return 0.0
    hit = np.flatnonzero(y < target)
    if hit.size == 0:
        raise NotConvergedError(f"series never crosses {target:g} within t <= {t[-1]:g}")
    k = int(hit[0])
    t0, t1, y0, y1 = t[k - 1], t[k], y[k - 1], y[k]
    return float(t0 + (y0 - target) * (t1 - t0) / (y0 - y1))


def preparation_time(ensemble: EnsembleResult, spec: SpectrumInfo | None = None, eps_target: float = 0.2) -> float:
    """First time the mean excitation energy falls below ``eps_target``."""
    if "epsilon" in ensemble.mean:
        eps = ensemble.mean["epsilon"]
    elif spec is not None and "energy" in ensemble.mean:
        eps = (ensemble.mean["energy"] - spec.e0) / spec.gap
    else:
        raise ValidationError("ensemble has no epsilon series")
    return first_crossing(ensemble.times, eps, eps_target)


# --- decoherence --------------------------------------------------------------


@dataclass(frozen=True)
class DecoherencePoint:
    kappa: float
    kappa_tp: float
    epsilon: float
    epsilon_sem: float


@dataclass
class DecoherenceStudy:
    t_p: float
    reference_fidelity: float
    points: list[DecoherencePoint]

    def pairs(self) -> list[tuple[float, float]]:
        return [(p.kappa_tp, p.epsilon) for p in self.points]


def decoherence_study(run: RunSpec, kappa_grid, n_traj: int, master_seed: int, threads: int | None = 1,
                      fidelity_target: float = 0.9, relative: bool = False) -> DecoherenceStudy:
    """Excitation energy at a fixed reference time for each per-site dephasing rate.

    The reference time is when the noise-free run first reaches
    ``fidelity_target``; every noisy run is then stopped at that time.
    With ``relative=True`` the grid holds ``kappa * t_p`` values instead
    of rates.
    """
    clean = replace(run, decoherence=DecoherenceSpec())
    ref = run_cooling(clean, n_traj, master_seed, threads=threads)
    t_p = first_crossing(ref.times, ref.mean["fidelity"], fidelity_target, below=False)
    if t_p <= 0:
        raise NotConvergedError("initial state already above the fidelity target")
    points = []
    grid = np.asarray(kappa_grid, dtype=float)
    if np.any(grid < 0):
        raise ValidationError("dephasing rates must be >= 0", key="noise.kappa")
    for kappa in grid / t_p if relative else grid:
        noisy = replace(run, t_max=t_p, decoherence=replace(run.decoherence, kappa=float(kappa)))
        res = run_cooling(noisy, n_traj, master_seed, threads=threads)
        points.append(DecoherencePoint(float(kappa), float(kappa * t_p), float(res.mean["epsilon"][-1]),
                                       float(res.sem["epsilon"][-1])))
    return DecoherenceStudy(float(t_p), fidelity_target, points)


# --- config files ---------------------------------------------------------------

RUN_KEYS = {
    "model.kind", "model.n", "model.j", "model.g", "model.alpha_lr",
    "bath.delta", "bath.gamma", "bath.g_sb", "bath.fx", "bath.fy", "bath.fz", "bath.sites",
    "noise.kappa", "noise.kappa_c", "init", "t_max", "n_grid", "n_traj", "seed",
}


@dataclass
class ConfigEntry:
    value: str
    line: int


class ConfigError(ValidationError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}", key=key)
        self.line = line


def parse_config_text(text: str, extra_keys: Iterable[str] = (), prefixes: Iterable[str] = ()) -> dict[str, ConfigEntry]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    allowed = RUN_KEYS | set(extra_keys)
    prefixes = tuple(prefixes)
    out: dict[str, ConfigEntry] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed and not key.startswith(prefixes):
            raise ConfigError(f"unknown key {key!r}", key=key, line=lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", key=key, line=lineno)
        out[key] = ConfigEntry(value, lineno)
    return out


def load_config(path: str | Path, **kwargs) -> dict[str, ConfigEntry]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), **kwargs)


def _as_entries(config: Mapping) -> dict[str, ConfigEntry]:
    return {k: v if isinstance(v, ConfigEntry) else ConfigEntry(str(v), None) for k, v in config.items()}


def config_float(cfg: Mapping[str, ConfigEntry], key: str, default=None):
    entry = cfg.get(key)
    if entry is None:
        return default
    try:
        value = float(entry.value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {entry.value!r}", key=key, line=entry.line) from None
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite", key=key, line=entry.line)
    return value


def config_int(cfg: Mapping[str, ConfigEntry], key: str, default=None):
    entry = cfg.get(key)
    if entry is None:
        return default
    try:
        return int(entry.value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {entry.value!r}", key=key, line=entry.line) from None


def _parse_sites(entry: ConfigEntry) -> tuple[tuple[int, float], ...]:
    pairs = []
    for item in entry.value.split(","):
        item = item.strip()
        if not item:
            continue
        site, _, weight = item.partition(":")
        try:
            pairs.append((int(site), float(weight) if weight else 1.0))
        except ValueError:
            raise ConfigError(f"bath.sites entries must be site[:weight], got {item!r}", key="bath.sites",
                              line=entry.line) from None
    return tuple(pairs)


def runspec_from_config(config: Mapping) -> tuple[RunSpec, dict]:
    """Build a RunSpec from parsed config; returns it with ``{"n_traj", "seed"}``."""
    cfg = _as_entries(config)

    def checked(key, build):
        try:
            return build()
        except ConfigError:
            raise
        except ValidationError as exc:
            entry = cfg.get(exc.key or key)
            raise ConfigError(str(exc), key=exc.key or key, line=entry.line if entry else None) from None

    kind_entry = cfg.get("model.kind", ConfigEntry("ising", None))
    kind = checked("model.kind", lambda: ModelKind.parse(kind_entry.value))
    n_entry = cfg.get("model.n")
    if n_entry is None:
        raise ConfigError("missing required key model.n", key="model.n")
    model = checked("model", lambda: ModelSpec(
        kind=kind,
        n_sites=config_int(cfg, "model.n"),
        j=config_float(cfg, "model.j", 1.0),
        g=config_float(cfg, "model.g", 1.0 if kind is not ModelKind.HEISENBERG else 0.0),
        alpha_lr=config_float(cfg, "model.alpha_lr", 3.0),
    ))
    bath_kwargs: dict = {}
    delta_entry = cfg.get("bath.delta")
    if delta_entry is not None:
        bath_kwargs["delta"] = "auto" if delta_entry.value.strip().lower() == "auto" else config_float(cfg, "bath.delta")
    for key, name in (("bath.gamma", "gamma"), ("bath.g_sb", "g_sb")):
        value = config_float(cfg, key)
        if value is not None:
            bath_kwargs[name] = value
    if any(k in cfg for k in ("bath.fx", "bath.fy", "bath.fz")):
        base = BathSpec.for_model(model).f
        bath_kwargs["f"] = tuple(config_float(cfg, f"bath.f{c}", base[i]) for i, c in enumerate("xyz"))
    if "bath.sites" in cfg:
        bath_kwargs["site_weights"] = _parse_sites(cfg["bath.sites"])
    bath = checked("bath", lambda: BathSpec.for_model(model, **bath_kwargs))
    noise = checked("noise", lambda: DecoherenceSpec(
        kappa=config_float(cfg, "noise.kappa", 0.0), kappa_c=config_float(cfg, "noise.kappa_c", 0.0)))
    init_entry = cfg.get("init")
    if init_entry is not None:
        init = checked("init", lambda: InitialState.parse(init_entry.value))
        checked("init", lambda: init.materialize(model.n_sites))
    else:
        init = InitialState.neel() if model.kind is ModelKind.HEISENBERG else InitialState.all_up()
    run = checked("run", lambda: RunSpec(
        model=model, bath=bath, decoherence=noise, initial_state=init,
        t_max=config_float(cfg, "t_max", DEFAULT_T_MAX), n_grid=config_int(cfg, "n_grid", 400)))
    options = {"n_traj": config_int(cfg, "n_traj", 1000), "seed": config_int(cfg, "seed", 0)}
    if options["n_traj"] < 1:
        raise ConfigError("n_traj must be >= 1", key="n_traj", line=cfg["n_traj"].line)
    return run, options


def runspec_to_config(run: RunSpec, n_traj: int | None = None, seed: int | None = None) -> str:
    """Serialise to the ``key = value`` format read by :func:`runspec_from_config`."""
    m, b = run.model, run.bath
    lines = [
        f"model.kind = {m.kind.value}",
        f"model.n = {m.n_sites}",
        f"model.j = {m.j!r}",
        f"model.g = {m.g!r}",
        f"model.alpha_lr = {m.alpha_lr!r}",
        f"bath.delta = {b.delta if b.delta == 'auto' else repr(float(b.delta))}",
        f"bath.gamma = {b.gamma!r}",
        f"bath.g_sb = {b.g_sb!r}",
        f"bath.fx = {b.f[0]!r}",
        f"bath.fy = {b.f[1]!r}",
        f"bath.fz = {b.f[2]!r}",
        f"noise.kappa = {run.decoherence.kappa!r}",
        f"noise.kappa_c = {run.decoherence.kappa_c!r}",
        f"init = {run.initial_state.describe()}",
        f"t_max = {run.t_max!r}",
        f"n_grid = {run.n_grid}",
    ]
    if b.site_weights is not None:
        lines.append("bath.sites = " + ", ".join(f"{s}:{w!r}" for s, w in b.weights_for(m.n_sites)))
    if n_traj is not None:
        lines.append(f"n_traj = {n_traj}")
    if seed is not None:
        lines.append(f"seed = {seed}")
    return "\n".join(lines) + "\n"
