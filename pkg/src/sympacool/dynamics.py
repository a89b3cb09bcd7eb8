"""Quantum-trajectory (Monte Carlo wave function) dynamics and an exact
density-matrix integrator used as its oracle.

Trajectories follow the norm-threshold unravelling: a uniform threshold
``r`` is drawn, the unnormalised state evolves under
``H_eff = H - (i/2) sum_k L_k^dag L_k`` until ``||psi||^2 = r``, and a jump
channel is then picked with probability proportional to ``||L_k psi||^2``.

``H_eff`` is time independent, so it is diagonalised once and every
trajectory is advanced exactly in its eigenbasis. Because ``||psi||^2``
never increases, checking it at the output samples is enough to detect
every threshold crossing; crossings are then located by a bracketed
Newton iteration using ``d||psi||^2/dt = -<psi|Gamma|psi>`` with
``Gamma = sum_k L_k^dag L_k``.

Trajectories run in fixed-size blocks so results do not depend on how
blocks are scheduled over worker processes.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.integrate import solve_ivp, trapezoid
from threadpoolctl import threadpool_limits

from .errors import CapacityError, IntegrationError, ValidationError
from .operators import JumpOperator, dense

log = logging.getLogger(__name__)

#: Trajectories advanced together; fixed so results never depend on scheduling.
BLOCK_SIZE = 100
JUMP_TOL = 1e-10
DEFAULT_N_GRID = 400
ORACLE_MAX_DIM = 2**8
_COND_LIMIT = 1e8

Observable = Callable[[np.ndarray], np.ndarray]


# --- random streams ---------------------------------------------------------


def child_seed(master_seed: int, index: int, stream: Sequence[int] = ()) -> np.random.SeedSequence:
    """Seed of trajectory ``index`` under ``master_seed`` (and an optional sub-stream)."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(*map(int, stream), int(index)))


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from an int, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def uniform_grid(t_max: float, n_grid: int = DEFAULT_N_GRID) -> np.ndarray:
    if not t_max > 0:
        raise ValidationError("t_max must be > 0", key="t_max")
    if n_grid < 2:
        raise ValidationError("n_grid must be >= 2", key="n_grid")
    return np.linspace(0.0, float(t_max), int(n_grid))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 1 or grid[0] != 0.0:
        raise ValidationError("time grid must be one-dimensional and start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("time grid must be strictly increasing")
    return grid


def _norm2(psi: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", psi.real, psi.real) + np.einsum("ij,ij->j", psi.imag, psi.imag)


# --- propagator ---------------------------------------------------------------


class Propagator:
    """Exact evolution under the non-Hermitian effective Hamiltonian.

    States are held as coordinates ``x`` with ``psi = V x`` where ``V``
    diagonalises ``H_eff``. Should ``V`` be too ill-conditioned the
    propagator falls back to dense matrix exponentials (slow but exact).
    """

    def __init__(self, h_total, jumps: Sequence[JumpOperator]):
        h = dense(h_total).astype(complex)
        d = h.shape[0]
        if h.shape != (d, d):
            raise ValidationError("Hamiltonian must be square")
        self.dim = d
        self.jumps = [j.scaled for j in jumps]
        self.rates = [float(j.rate) for j in jumps]
        for j in jumps:
            if j.rate < 0:
                raise ValidationError("jump rates must be >= 0")
            if j.op.shape != (d, d):
                raise ValidationError("jump operator dimension mismatch")
        gamma = sp.csr_matrix((d, d), dtype=complex)
        for op in self.jumps:
            gamma = gamma + (op.conj().T @ op)
        self.decay = gamma.tocsr()
        self.heff = h - 0.5j * self.decay.toarray()
        self.fallback = False
        if self.decay.nnz == 0 or not np.any(self.decay.data):
            lam, v = np.linalg.eigh(h)
            self.lam = lam.astype(complex)
            self.v = v
            self.vinv = v.conj().T
        else:
            lam, v = np.linalg.eig(self.heff)
            cond = np.linalg.cond(v)
            if not np.isfinite(cond) or cond > _COND_LIMIT:
                log.warning("H_eff eigenbasis ill-conditioned (cond=%.3g); using dense exponentials", cond)
                self.fallback = True
                self.lam = None
                self.v = None
                self.vinv = None
            else:
                self.lam = lam
                self.v = v
                self.vinv = np.linalg.inv(v)

    def coords(self, psi: np.ndarray) -> np.ndarray:
        return psi.copy() if self.fallback else self.vinv @ psi

    def states(self, x: np.ndarray) -> np.ndarray:
        return x if self.fallback else self.v @ x

    def evolve(self, x: np.ndarray, dt: np.ndarray) -> np.ndarray:
        """Advance each column of ``x`` by its own time step ``dt[col]``."""
        dt = np.broadcast_to(np.asarray(dt, dtype=float), (x.shape[1],))
        if not self.fallback:
            return x * np.exp(-1j * np.multiply.outer(self.lam, dt))
        out = np.empty_like(x)
        cache: dict[float, np.ndarray] = {}
        for col, step in enumerate(dt):
            u = cache.get(float(step))
            if u is None:
                u = cache[float(step)] = scipy.linalg.expm(-1j * step * self.heff)
            out[:, col] = u @ x[:, col]
        return out

    def decay_rate(self, psi: np.ndarray) -> np.ndarray:
        """``<psi|Gamma|psi>`` per column, i.e. ``-d||psi||^2/dt``."""
        return np.real(np.einsum("ij,ij->j", psi.conj(), self.decay @ psi))


# --- results ------------------------------------------------------------------


@dataclass
class TrajectoryResult:
    times: np.ndarray
    observable_series: dict[str, np.ndarray]
    jump_events: list[tuple[float, int]]
    final_state: np.ndarray

    def jump_count(self, channel: int | None = None) -> int:
        return sum(1 for _, k in self.jump_events if channel is None or k == channel)


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: dict[str, np.ndarray]
    sem: dict[str, np.ndarray]
    n_traj: int
    master_seed: int
    jump_counts: np.ndarray  # (n_traj, n_channels) total jumps per trajectory and channel
    channel_labels: list[str] = field(default_factory=list)
    rho_times: np.ndarray | None = None
    rho: np.ndarray | None = None  # (len(rho_times), d, d) ensemble density matrices
    scalars: dict[str, np.ndarray] = field(default_factory=dict)  # per-trajectory scalars
    extras: dict = field(default_factory=dict)

    def scalar_mean(self, name: str) -> tuple[float, float]:
        x = self.scalars[name]
        sem = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(np.mean(x)), sem


@dataclass
class TrajectoryProblem:
    """Everything a trajectory needs; shared read-only across workers."""

    h_total: object
    jumps: list[JumpOperator]
    psi0: np.ndarray
    grid: np.ndarray
    observables: Mapping[str, Observable] = field(default_factory=dict)
    rho_index: Sequence[int] = ()
    cumulative_channel: int | None = 0
    integrate: Mapping[str, float] = field(default_factory=dict)  # observable -> prefactor for a per-trajectory trapezoid integral

    def __post_init__(self):
        self.grid = _check_grid(self.grid)
        psi0 = np.asarray(self.psi0, dtype=complex)
        if abs(np.vdot(psi0, psi0).real - 1.0) > 1e-8:
            raise ValidationError("initial state is not normalised")
        self.psi0 = psi0
        if not self.jumps:
            self.cumulative_channel = None
        elif self.cumulative_channel is not None and not 0 <= self.cumulative_channel < len(self.jumps):
            raise ValidationError(f"cumulative_channel {self.cumulative_channel} out of range")


# --- block engine ---------------------------------------------------------------


@dataclass
class _Block:
    series: dict[str, np.ndarray]  # name -> (n, K)
    counts: np.ndarray  # (n, channels)
    events: list[list[tuple[float, int]]]
    rho: np.ndarray | None
    final: np.ndarray  # (d, n)


def _locate_jumps(prop: Propagator, x: np.ndarray, s: np.ndarray, t_end: float, r: np.ndarray,
                  m_end: np.ndarray, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Times in ``(s, t_end]`` at which ``||psi||^2 = r`` and the states there."""
    n = x.shape[1]
    lo = s.copy()
    hi = np.full(n, t_end)
    # exponential interpolation as the starting guess
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.log(r) / np.log(m_end)
    frac = np.where(np.isfinite(frac) & (frac > 0) & (frac < 1), frac, 0.5)
    tau = lo + frac * (hi - lo)
    tau_out = np.empty(n)
    psi_out = np.empty((prop.dim, n), dtype=complex)
    active = np.arange(n)
    for _ in range(200):
        psi = prop.states(prop.evolve(x[:, active], tau[active] - s[active]))
        f = _norm2(psi) - r[active]
        conv = np.abs(f) < JUMP_TOL
        if np.any(conv):
            tau_out[active[conv]] = tau[active[conv]]
            psi_out[:, active[conv]] = psi[:, conv]
        keep = ~conv
        active, f, psi = active[keep], f[keep], psi[:, keep]
        if active.size == 0:
            return tau_out, psi_out
        above = f > 0
        lo[active] = np.where(above, tau[active], lo[active])
        hi[active] = np.where(above, hi[active], tau[active])
        width = hi[active] - lo[active]
        if np.any(width <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi[active]))):
            bad = int(index[active[np.argmin(width)]])
            raise IntegrationError("step-size underflow while locating a jump", trajectory=bad)
        rate = prop.decay_rate(psi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = tau[active] + f / rate
        mid = 0.5 * (lo[active] + hi[active])
        ok = np.isfinite(newton) & (newton > lo[active]) & (newton < hi[active])
        tau[active] = np.where(ok, newton, mid)
    raise IntegrationError("jump localisation did not converge", trajectory=int(index[active[0]]))


def _simulate_block(prop: Propagator, problem: TrajectoryProblem, seeds: Sequence, first_index: int,
                    keep_events: bool) -> _Block:
    grid = problem.grid
    n = len(seeds)
    n_grid = len(grid)
    n_ch = len(prop.jumps)
    rngs = [make_rng(s) for s in seeds]
    index = np.arange(first_index, first_index + n)
    names = list(problem.observables)
    series = {name: np.empty((n, n_grid)) for name in names}
    cumulative = np.zeros((n, n_grid)) if problem.cumulative_channel is not None else None
    rho_pos = {int(k): p for p, k in enumerate(problem.rho_index)}
    rho = np.zeros((len(rho_pos), prop.dim, prop.dim), dtype=complex) if rho_pos else None

    counts = np.zeros((n, n_ch), dtype=np.int64)
    events: list[list[tuple[float, int]]] = [[] for _ in range(n)]
    x = np.repeat(prop.coords(problem.psi0)[:, None], n, axis=1)
    s = np.zeros(n)
    r = np.array([g.random() for g in rngs])

    def record(k: int, psi: np.ndarray) -> None:
        for name in names:
            series[name][:, k] = problem.observables[name](psi)
        if cumulative is not None:
            cumulative[:, k] = counts[:, problem.cumulative_channel]
        if k in rho_pos:
            rho[rho_pos[k]] += psi @ psi.conj().T

    psi_now = np.repeat(problem.psi0[:, None], n, axis=1)
    record(0, psi_now)
    for k in range(1, n_grid):
        t_end = grid[k]
        pending = np.arange(n)
        out = np.empty((prop.dim, n), dtype=complex)
        while pending.size:
            xp = prop.evolve(x[:, pending], t_end - s[pending])
            psi = prop.states(xp)
            m = _norm2(psi)
            done = m > r[pending]
            if np.any(done):
                idx = pending[done]
                scale = 1.0 / np.sqrt(m[done])
                x[:, idx] = xp[:, done] * scale
                out[:, idx] = psi[:, done] * scale
                r[idx] = r[idx] / m[done]
                s[idx] = t_end
            cross = pending[~done]
            if cross.size == 0:
                break
            tau, psi_tau = _locate_jumps(prop, x[:, cross], s[cross], t_end, r[cross], m[~done], index[cross])
            weights = np.stack([_norm2(op @ psi_tau) for op in prop.jumps])  # (channels, len(cross))
            new = np.empty_like(psi_tau)
            for col, traj in enumerate(cross):
                w = weights[:, col]
                total = float(w.sum())
                if not total > 0:
                    raise IntegrationError("all jump channels have zero weight", trajectory=int(index[traj]))
                u = rngs[traj].random() * total
                ch = min(int(np.searchsorted(np.cumsum(w), u, side="right")), n_ch - 1)
                jumped = prop.jumps[ch] @ psi_tau[:, col]
                new[:, col] = jumped / math.sqrt(w[ch])
                counts[traj, ch] += 1
                if keep_events:
                    events[traj].append((float(tau[col]), ch))
                r[traj] = rngs[traj].random()
            x[:, cross] = prop.coords(new)
            s[cross] = tau
            pending = cross
        record(k, out)
        psi_now = out
    if cumulative is not None:
        series["cumulative_jumps"] = cumulative
    return _Block(series, counts, events, rho, psi_now)


# --- public API -------------------------------------------------------------------


def mcwf_evolve(h_total, jumps: Sequence[JumpOperator], psi0, grid, seed,
                observables: Mapping[str, Observable] | None = None) -> TrajectoryResult:
    """Evolve one quantum trajectory and record observables on ``grid``."""
    problem = TrajectoryProblem(h_total, list(jumps), psi0, grid, dict(observables or {}))
    prop = Propagator(problem.h_total, problem.jumps)
    with threadpool_limits(1):
        block = _simulate_block(prop, problem, [seed], 0, keep_events=True)
    return TrajectoryResult(
        times=problem.grid,
        observable_series={k: v[0] for k, v in block.series.items()},
        jump_events=block.events[0],
        final_state=block.final[:, 0].copy(),
    )


def _merge(acc, mean_b, m2_b, n_b):
    """Chan/Welford combination of (n, mean, M2) summaries."""
    if acc is None:
        return n_b, mean_b, m2_b
    n_a, mean_a, m2_a = acc
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2


def _summarise(block: _Block, problem: TrajectoryProblem) -> dict[str, np.ndarray]:
    per_traj = dict(block.series)
    for name, pref in problem.integrate.items():
        per_traj[f"integral_{name}"] = pref * trapezoid(block.series[name], problem.grid, axis=1)[:, None]
    return per_traj


_WORKER: dict = {}


def _worker_run(args):
    start, seeds, keep_events = args
    prop, problem = _WORKER["prop"], _WORKER["problem"]
    with threadpool_limits(1):
        return _simulate_block(prop, problem, seeds, start, keep_events)


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("SYMPACOOL_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def run_ensemble(problem: TrajectoryProblem, n_traj: int, master_seed: int, threads: int | None = 1,
                 stream: Sequence[int] = (), keep_events: bool = False,
                 propagator: Propagator | None = None) -> EnsembleResult:
    """Average ``n_traj`` trajectories; trajectory i is seeded by ``(master_seed, stream, i)``.

    Blocks are merged in index order, so the result is bit-identical for any
    ``threads`` value.
    """
    if n_traj < 1:
        raise ValidationError("n_traj must be >= 1", key="n_traj")
    prop = propagator or Propagator(problem.h_total, problem.jumps)
    starts = list(range(0, n_traj, BLOCK_SIZE))
    tasks = [(a, [child_seed(master_seed, i, stream) for i in range(a, min(a + BLOCK_SIZE, n_traj))], keep_events)
             for a in starts]
    threads = min(resolve_threads(threads), len(tasks))
    if threads > 1:
        _WORKER.update(prop=prop, problem=problem)
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(threads, mp_context=ctx) as pool:
            blocks = list(pool.map(_worker_run, tasks))
        _WORKER.clear()
    else:
        with threadpool_limits(1):
            blocks = [_simulate_block(prop, problem, seeds, a, keep_events) for a, seeds, keep_events in tasks]

    acc: dict[str, tuple] = {}
    for block in blocks:
        for name, values in _summarise(block, problem).items():
            mean_b = values.mean(axis=0)
            m2_b = ((values - mean_b) ** 2).sum(axis=0)
            acc[name] = _merge(acc.get(name), mean_b, m2_b, values.shape[0])
    mean, sem, scalars = {}, {}, {}
    for name, (n, mu, m2) in acc.items():
        err = np.sqrt(m2 / (n - 1) / n) if n > 1 else np.zeros_like(mu)
        if name.startswith("integral_"):
            mean[name], sem[name] = mu[0], err[0]
        else:
            mean[name], sem[name] = mu, err
    for name in problem.integrate:
        scalars[f"integral_{name}"] = np.concatenate([_summarise(b, problem)[f"integral_{name}"][:, 0] for b in blocks])
    counts = np.concatenate([b.counts for b in blocks])
    rho = None
    if problem.rho_index:
        rho = sum(b.rho for b in blocks) / n_traj
    result = EnsembleResult(
        times=problem.grid,
        mean=mean,
        sem=sem,
        n_traj=n_traj,
        master_seed=int(master_seed),
        jump_counts=counts,
        channel_labels=[j.label for j in problem.jumps],
        rho_times=problem.grid[list(problem.rho_index)] if problem.rho_index else None,
        rho=rho,
        scalars=scalars,
    )
    if keep_events:
        result.extras["events"] = [ev for b in blocks for ev in b.events]
    result.extras["final_states"] = np.concatenate([b.final for b in blocks], axis=1) if n_traj <= 4096 else None
    return result


# --- exact oracle -------------------------------------------------------------------


@dataclass
class LindbladResult:
    times: np.ndarray
    states: np.ndarray  # (K, d, d)

    def expect(self, op) -> np.ndarray:
        a = dense(op)
        return np.real(np.einsum("kij,ji->k", self.states, a))


def lindblad_exact_evolve(h_total, jumps: Sequence[JumpOperator], rho0, grid,
                          rtol: float = 1e-10, atol: float = 1e-12) -> LindbladResult:
    """Integrate ``drho/dt = -i[H, rho] + sum_k (L rho L^dag - {L^dag L, rho}/2)``.

    Adaptive DOP853 on the dense density matrix; intended for small systems.
    """
    h = dense(h_total).astype(complex)
    d = h.shape[0]
    if d > ORACLE_MAX_DIM:
        raise CapacityError(f"oracle dimension {d} exceeds {ORACLE_MAX_DIM}")
    grid = _check_grid(grid)
    rho0 = np.asarray(dense(rho0), dtype=complex)
    if rho0.shape != (d, d):
        raise ValidationError("rho0 dimension mismatch")
    if np.max(np.abs(rho0 - rho0.conj().T)) > 1e-10:
        raise ValidationError("rho0 is not Hermitian")
    if abs(np.trace(rho0).real - 1.0) > 1e-10:
        raise ValidationError("rho0 does not have unit trace")
    if np.linalg.eigvalsh(rho0)[0] < -1e-10:
        raise ValidationError("rho0 is not positive semidefinite")
    ls = [j.scaled.toarray() for j in jumps]
    heff = h - 0.5j * sum((l.conj().T @ l for l in ls), np.zeros((d, d), dtype=complex))
    heff_dag = heff.conj().T

    def rhs(_t, y):
        rho = y.reshape(d, d)
        out = -1j * (heff @ rho) + 1j * (rho @ heff_dag)
        for l in ls:
            out += l @ rho @ l.conj().T
        return out.ravel()

    if len(grid) == 1:
        return LindbladResult(grid, rho0[None].copy())
    sol = solve_ivp(rhs, (grid[0], grid[-1]), rho0.ravel(), method="DOP853", t_eval=grid, rtol=rtol, atol=atol)
    if not sol.success:
        raise IntegrationError(f"Lindblad integration failed: {sol.message}")
    states = sol.y.T.reshape(len(grid), d, d)
    return LindbladResult(grid, states)
