"""Parameter optimisation and the preparation-time scaling study."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EvaluationError, NotConvergedError, PartialResultError, ValidationError
from .operators import BathSpec, ModelKind, ModelSpec
from .protocol import InitialState, RunSpec, preparation_time, run_cooling

log = logging.getLogger(__name__)

REFERENCE_START = {ModelKind.TRANSVERSE_ISING: (1.15, 1.9), ModelKind.POWER_LAW_ISING: (1.15, 1.9),
               ModelKind.HEISENBERG: (0.2, 0.6)}


# --- Nelder-Mead ------------------------------------------------------------------


@dataclass(frozen=True)
class NelderMeadOptions:
    max_evals: int = 150
    tol_f: float = 1e-10  # absolute spread of objective values over the simplex
    rtol_f: float = 0.0  # relative to |best objective|
    tol_x: float = 1e-7  # simplex diameter in log-parameter space
    initial_step: float = 0.2  # relative perturbation of each vertex
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5


@dataclass
class OptimizationResult:
    best_params: dict[str, float]
    best_objective: float
    n_evaluations: int
    trace: list[tuple[dict[str, float], float]]
    converged: bool = False

    def to_csv(self) -> str:
        names = list(self.best_params)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["eval_index", *names, "objective"])
        for i, (params, value) in enumerate(self.trace):
            writer.writerow([i, *(repr(float(params[n])) for n in names), repr(float(value))])
        return buf.getvalue()


def nelder_mead(objective: Callable[[dict[str, float]], float], initial: Mapping[str, float],
                options: NelderMeadOptions | None = None) -> OptimizationResult:
    """Downhill simplex over strictly positive parameters, searched in log space.

    Stops when the spread of objective values over the simplex drops below
    ``tol_f + rtol_f * |f_best|``, when the simplex diameter drops below
    ``tol_x``, or when ``max_evals`` evaluations have been spent.
    """
    opts = options or NelderMeadOptions()
    names = list(initial)
    x0 = np.array([float(initial[n]) for n in names])
    if not names:
        raise ValidationError("no parameters to optimise")
    if np.any(~np.isfinite(x0)) or np.any(x0 <= 0):
        raise ValidationError(f"initial parameters must be strictly positive, got {dict(initial)}")
    trace: list[tuple[dict[str, float], float]] = []

    def evaluate(y: np.ndarray, exact: np.ndarray | None = None) -> float:
        params = dict(zip(names, (np.exp(y) if exact is None else exact).tolist()))
        value = float(objective(dict(params)))
        if not math.isfinite(value):
            raise EvaluationError(f"objective returned {value} at {params}", params=params)
        trace.append((params, value))
        return value

    dim = len(names)
    y0 = np.log(x0)
    simplex = [y0]
    for i in range(dim):
        y = y0.copy()
        y[i] += math.log1p(opts.initial_step)
        simplex.append(y)
    simplex = np.array(simplex)
    # the starting point is evaluated at exactly the values supplied
    values = np.array([evaluate(simplex[0], x0)] + [evaluate(y) for y in simplex[1:]])
    converged = False

    while len(trace) < opts.max_evals:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        spread = values[-1] - values[0]
        diameter = max(np.max(np.abs(y - simplex[0])) for y in simplex[1:])
        if spread <= opts.tol_f + opts.rtol_f * abs(values[0]) or diameter <= opts.tol_x:
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        yr = centroid + opts.reflection * (centroid - worst)
        fr = evaluate(yr)
        if fr < values[0]:
            if len(trace) >= opts.max_evals:
                simplex[-1], values[-1] = yr, fr
                break
            ye = centroid + opts.expansion * (yr - centroid)
            fe = evaluate(ye)
            simplex[-1], values[-1] = (ye, fe) if fe < fr else (yr, fr)
        elif fr < values[-2]:
            simplex[-1], values[-1] = yr, fr
        else:
            if len(trace) >= opts.max_evals:
                break
            if fr < values[-1]:
                yc = centroid + opts.contraction * (yr - centroid)
                fc = evaluate(yc)
                accept = fc <= fr
            else:
                yc = centroid + opts.contraction * (worst - centroid)
                fc = evaluate(yc)
                accept = fc < values[-1]
            if accept:
                simplex[-1], values[-1] = yc, fc
            else:
                for i in range(1, dim + 1):
                    if len(trace) >= opts.max_evals:
                        break
                    simplex[i] = simplex[0] + opts.shrink * (simplex[i] - simplex[0])
                    values[i] = evaluate(simplex[i])

    best = min(range(len(trace)), key=lambda i: trace[i][1])
    return OptimizationResult(dict(trace[best][0]), trace[best][1], len(trace), trace, converged)


# --- cooling objectives -------------------------------------------------------------


class ObjectiveKind(str, enum.Enum):
    FINAL_EPSILON = "final_epsilon"
    PREP_TIME = "prep_time"


COOLING_OPTIONS = NelderMeadOptions(rtol_f=0.01, tol_f=1e-6, tol_x=0.02)


def default_start(run: RunSpec) -> dict[str, float]:
    """Starting point ``(g_sb, gamma) = (0.2, 0.5)`` in units of the model's energy scale."""
    e = run.model.energy_scale
    return {"g_sb": 0.2 * e, "gamma": 0.5 * e}


def cooling_objective(run: RunSpec, kind: ObjectiveKind, n_traj: int, master_seed: int,
                      eps_target: float = 0.2, threads: int | None = 1) -> Callable[[dict[str, float]], float]:
    """Objective over ``g_sb``, ``gamma`` (and optionally ``delta``) with common random numbers."""
    kind = ObjectiveKind(kind)

    def objective(params: dict[str, float]) -> float:
        point = run.with_params(**params)
        res = run_cooling(point, n_traj, master_seed, threads=threads)
        if kind is ObjectiveKind.FINAL_EPSILON:
            return float(res.mean["epsilon"][-1])
        try:
            return preparation_time(res, eps_target=eps_target)
        except NotConvergedError:
            # graded so the simplex still sees which way is better
            return 10.0 * run.t_max + run.t_max * float(res.mean["epsilon"][-1])

    return objective


def optimize_cooling(run: RunSpec, objective_kind: ObjectiveKind | str, n_traj: int, master_seed: int,
                     eps_target: float = 0.2, initial: Mapping[str, float] | None = None,
                     options: NelderMeadOptions | None = None, threads: int | None = 1,
                     optimize_delta: bool = False) -> OptimizationResult:
    """Nelder-Mead over the bath coupling and decay rate (and optionally delta)."""
    start = dict(initial) if initial is not None else default_start(run)
    if optimize_delta and "delta" not in start:
        if run.bath.delta == "auto":
            from .protocol import resolve_delta

            start["delta"] = resolve_delta(run)
        else:
            start["delta"] = float(run.bath.delta)
    for name, value in start.items():
        if not value > 0:
            raise ValidationError(f"initial {name} must be strictly positive, got {value}")
    objective = cooling_objective(run, ObjectiveKind(objective_kind), n_traj, master_seed, eps_target, threads)
    return nelder_mead(objective, start, options or COOLING_OPTIONS)


# --- scaling --------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    alpha_stderr: float
    intercept: float
    residuals: np.ndarray
    intercepts: dict[str, float] = field(default_factory=dict)

    def predict(self, n, parity: str | None = None) -> np.ndarray:
        c = self.intercepts[parity] if parity else self.intercept
        return np.exp(c) * np.asarray(n, dtype=float) ** self.alpha


def fit_power_law(sizes, times) -> PowerLawFit:
    """Ordinary least squares of ``ln t = alpha ln N + c``."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if len(x) < 2:
        raise ValidationError("need at least two points to fit")
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = len(x) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    sxx = float(((x - x.mean()) ** 2).sum())
    return PowerLawFit(float(coef[0]), math.sqrt(s2 / sxx), float(coef[1]), resid)


def fit_power_law_parity(sizes, times) -> PowerLawFit:
    """Shared exponent with separate intercepts for even and odd ``N``."""
    n = np.asarray(sizes, dtype=int)
    x = np.log(n.astype(float))
    y = np.log(np.asarray(times, dtype=float))
    even = (n % 2 == 0).astype(float)
    odd = 1.0 - even
    if even.sum() < 1 or odd.sum() < 1 or len(n) < 3:
        raise ValidationError("parity fit needs both even and odd sizes and at least three points")
    design = np.column_stack([x, even, odd])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = len(x) - 3
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(design.T @ design)
    return PowerLawFit(float(coef[0]), math.sqrt(cov[0, 0]), float(coef[1]), resid,
                       intercepts={"even": float(coef[1]), "odd": float(coef[2])})


@dataclass
class ScalingResult:
    points: list[tuple[int, float]]
    alpha: float
    alpha_stderr: float
    intercept: float
    residuals: np.ndarray
    parity_split: PowerLawFit | None = None
    optimizations: dict[int, OptimizationResult] = field(default_factory=dict)
    t_max: dict[int, float] = field(default_factory=dict)

    def odd_below_even_line(self) -> bool:
        fit = self.parity_split
        if fit is None:
            raise ValidationError("no parity fit")
        even_line = {n: float(fit.predict(n, "even")) for n, _ in self.points}
        return all(t < even_line[n] for n, t in self.points if n % 2)


def _scaling_run(template: ModelSpec, n: int, t_max: float, n_grid: int, start: tuple[float, float]) -> RunSpec:
    model = replace(template, n_sites=n)
    bath = BathSpec.for_model(model, delta="auto", g_sb=start[0], gamma=start[1])
    init = InitialState.neel() if model.kind is ModelKind.HEISENBERG else InitialState.all_up()
    return RunSpec(model=model, bath=bath, initial_state=init, t_max=t_max, n_grid=n_grid)


def _fastest(run: RunSpec, trial: Sequence[tuple[float, float]], n_traj: int, master_seed: int,
             eps_target: float, threads) -> tuple[tuple[float, float], float] | None:
    best = None
    for g_sb, gamma in trial:
        res = run_cooling(run.with_params(g_sb=g_sb, gamma=gamma), n_traj, master_seed, threads=threads)
        try:
            t_p = preparation_time(res, eps_target=eps_target)
        except NotConvergedError:
            continue
        if best is None or t_p < best[1]:
            best = ((g_sb, gamma), t_p)
    return best


def _bracket_start(run: RunSpec, candidates: Sequence[tuple[float, float]], n_traj: int, master_seed: int,
                   eps_target: float, threads, max_rounds: int = 8,
                   shrink: float = 0.8) -> tuple[RunSpec, tuple[float, float], float]:
    """Find a starting ``(g_sb, gamma)`` that reaches the target.

    Round k tries the candidates at the current t_max; only if none gets
    there are they retried with both rates scaled by ``shrink**(k+1)``
    (weaker coupling lowers a plateau that waiting cannot cure). Then
    t_max doubles. Returns the run, the fastest candidate and its t_p.
    """
    for k in range(max_rounds):
        best = _fastest(run, candidates, n_traj, master_seed, eps_target, threads)
        if best is None:
            weaker = [(g * shrink ** (k + 1), y * shrink ** (k + 1)) for g, y in candidates]
            best = _fastest(run, weaker, n_traj, master_seed, eps_target, threads)
        if best is not None:
            return run, best[0], best[1]
        run = replace(run, t_max=2.0 * run.t_max)
    raise NotConvergedError(f"N={run.model.n_sites}: target not reached up to t_max={run.t_max / 2:g}")


def scaling_study(model_family: ModelSpec, n_range: Sequence[int], eps_target: float, n_traj: int,
                  master_seed: int, threads: int | None = 1, start: tuple[float, float] | None = None,
                  t_max0: float | None = None, n_grid: int = 400, horizon: float = 2.0,
                  options: NelderMeadOptions | None = None, start_grid: Sequence[float] = (0.8, 1.0, 1.25),
                  progress: Callable[[str], None] | None = None) -> ScalingResult:
    """Optimal preparation time versus chain length, with a power-law fit.

    For each size the bath splitting is the gap and ``(g_sb, gamma)`` are
    optimised for the preparation time. The simplex starts from the best
    of a few candidates: a small multiplicative grid (``start_grid`` in
    both parameters) around the previous size's optimum, the optimum two
    sizes back (same parity) and the family start. ``t_max`` is set to
    ``horizon`` times the preparation time at that point. Heisenberg
    chains additionally get a shared-exponent fit with separate even/odd
    intercepts.
    """
    sizes = sorted(int(n) for n in n_range)
    if len(sizes) < 3:
        raise ValidationError("scaling study needs at least three sizes")
    e = model_family.energy_scale
    origin = start or tuple(v * e for v in REFERENCE_START[model_family.kind])
    current = origin
    optima: dict[int, tuple[float, float]] = {}
    t_max = t_max0 or 100.0 / e
    points, opts, t_maxes, failures = [], {}, {}, {}
    for n in sizes:
        try:
            run = _scaling_run(model_family, n, t_max, n_grid, current)
            candidates = [(current[0] * a, current[1] * b) for a in start_grid for b in start_grid]
            for extra in (optima.get(n - 2), origin):
                if extra is not None and extra not in candidates:
                    candidates.append(extra)
            run, current, t_start = _bracket_start(run, candidates, n_traj, master_seed, eps_target, threads)
            run = replace(run.with_params(g_sb=current[0], gamma=current[1]), t_max=max(horizon * t_start, 1e-9))
            res = optimize_cooling(run, ObjectiveKind.PREP_TIME, n_traj, master_seed, eps_target,
                                   initial={"g_sb": current[0], "gamma": current[1]}, options=options,
                                   threads=threads)
        except (NotConvergedError, EvaluationError) as exc:
            failures[n] = str(exc)
            continue
        if res.best_objective >= 10.0 * run.t_max:
            failures[n] = "optimum never reached the target"
            continue
        points.append((n, res.best_objective))
        opts[n] = res
        t_maxes[n] = run.t_max
        current = (res.best_params["g_sb"], res.best_params["gamma"])
        optima[n] = current
        # the next size is slower; start its bracket from this optimum
        t_max = res.best_objective * 2.0
        if progress:
            progress(f"N={n}: t_p={res.best_objective:.4g} g_sb={current[0]:.4g} gamma={current[1]:.4g} "
                     f"({res.n_evaluations} evaluations)")
    if failures:
        raise PartialResultError(f"scaling study failed for N in {sorted(failures)}", failures,
                                 partial=points)
    fit = fit_power_law([p[0] for p in points], [p[1] for p in points])
    parity = None
    if model_family.kind is ModelKind.HEISENBERG:
        parity = fit_power_law_parity([p[0] for p in points], [p[1] for p in points])
    alpha, stderr = (parity.alpha, parity.alpha_stderr) if parity else (fit.alpha, fit.alpha_stderr)
    return ScalingResult(points, alpha, stderr, fit.intercept, fit.residuals, parity, opts, t_maxes)
