"""Command-line front end.

Every subcommand reads a ``key = value`` config, writes its CSV, a
``summary.json`` and a ``manifest.json`` into ``--out``, and prints the
paths it wrote on stdout. Progress goes to stderr. Precedence for
settings is flags > config > defaults.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import NelderMeadOptions, ObjectiveKind, REFERENCE_START, optimize_cooling, scaling_study
from .errors import (
    CapacityError,
    EvaluationError,
    IntegrationError,
    NotConvergedError,
    PartialResultError,
    ValidationError,
)
from .observables import dissipated_energy
from .protocol import (
    ConfigEntry,
    ConfigError,
    config_float,
    config_int,
    load_config,
    preparation_time,
    resolve_delta,
    run_cooling,
    runspec_from_config,
    spectrum_for,
    sweep_delta,
)
from .spectrum import cooling_transition_graph

log = logging.getLogger("sympacool")

COMMAND_PREFIXES = ("sweep.", "optimize.", "scale.", "transitions.")
TIMESERIES_COLUMNS = [
    "time", "energy_mean", "energy_sem", "fidelity_mean", "fidelity_sem",
    "epsilon_mean", "bath_up_population", "cumulative_jumps_mean",
]


def fmt(x) -> str:
    """Round-trip decimal formatting used for every numeric CSV field."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Session:
    """Resolved settings and bookkeeping for one CLI invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.start = time.time()
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        cfg = load_config(args.config, prefixes=COMMAND_PREFIXES)
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            cfg[key.strip()] = ConfigEntry(value.strip(), None)
        for flag, key in (("n_traj", "n_traj"), ("seed", "seed"), ("t_max", "t_max"), ("n_grid", "n_grid")):
            value = getattr(args, flag, None)
            if value is not None:
                cfg[key] = ConfigEntry(str(value), None)
        self.cfg = cfg
        self.run, options = runspec_from_config(cfg)
        self.n_traj = options["n_traj"]
        self.seed = options["seed"]
        self.threads = args.threads

    def add(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self, command: str) -> None:
        manifest = {
            "command": command,
            "config": {k: v.value for k, v in sorted(self.cfg.items())},
            "code_version": __version__,
            "master_seed": self.seed,
            "threads": self.threads,
            "wall_time": time.time() - self.start,
            "outputs": [p.name for p in self.outputs] + ["manifest.json"],
        }
        self.add(write_json(self.out / "manifest.json", manifest))
        for p in self.outputs:
            print(p)


def _plot(session: Session, kind: str, *payload) -> None:
    if not session.args.plot:
        return
    from . import plotting

    path = session.out / f"{kind}.png"
    getattr(plotting, f"plot_{kind}")(*payload, path=path)
    session.add(path)


# --- subcommands ------------------------------------------------------------------


def cmd_cool(session: Session) -> None:
    run = session.run
    res = run_cooling(run, session.n_traj, session.seed, threads=session.threads)
    spectrum, delta = res.extras["spectrum"], res.extras["delta"]
    est = dissipated_energy(res, delta, run.bath.gamma)
    m, s = res.mean, res.sem
    rows = zip(res.times, m["energy"], s["energy"], m["fidelity"], s["fidelity"], m["epsilon"],
               m["bath_up"], m["cumulative_jumps"])
    session.add(write_csv(session.out / "timeseries.csv", TIMESERIES_COLUMNS, rows))
    summary = {
        "delta": delta,
        "e0": spectrum.e0,
        "gap": spectrum.gap,
        "manifold_dim": spectrum.manifold_dim,
        "final_energy": m["energy"][-1],
        "final_fidelity": m["fidelity"][-1],
        "final_fidelity_sem": s["fidelity"][-1],
        "final_epsilon": m["epsilon"][-1],
        "n_jump_count": est.n_jump_count,
        "n_jump_integral": est.n_jump_integral,
        "e_dis_count": est.e_dis_count,
        "e_dis_integral": est.e_dis_integral,
        "n_traj": session.n_traj,
    }
    if session.args.eps_target is not None:
        try:
            summary["t_p"] = preparation_time(res, eps_target=session.args.eps_target)
        except NotConvergedError:
            summary["t_p"] = None
    session.add(write_json(session.out / "summary.json", summary))
    _plot(session, "cooling", res)


def cmd_sweep_delta(session: Session) -> None:
    cfg, run = session.cfg, session.run
    lo = config_float(cfg, "sweep.from", 0.5)
    hi = config_float(cfg, "sweep.to", 1.5)
    points = config_int(cfg, "sweep.points", 11)
    relative = cfg.get("sweep.relative", ConfigEntry("true", None)).value.strip().lower() in ("1", "true", "yes")
    if points is None or points < 3:
        raise ConfigError("sweep.points must be >= 3", key="sweep.points")
    grid = np.linspace(lo, hi, points)
    if relative:
        grid = grid * spectrum_for(run).gap
    res = sweep_delta(run, grid, session.n_traj, session.seed, threads=session.threads,
                      eps_target=config_float(cfg, "sweep.eps_target", 0.2),
                      window=config_float(cfg, "sweep.window", None))
    session.add(write_csv(session.out / "sweep.csv", ["delta", "final_energy", "e_dis", "e_dis_full"],
                          zip(res.delta_grid, res.final_energy, res.e_dis, res.e_dis_full)))
    session.add(write_json(session.out / "summary.json", {
        "gap": res.gap_reference,
        "argmin_delta": res.argmin_energy,
        "argmin_edis": res.argmin_edis,
        "grid_step": res.grid_step,
        "edis_window": res.window,
        "fidelity_at_optimum": res.fidelity_at_optimum(),
        "final_energy_sem": res.final_energy_sem,
        "e_dis_integral": res.e_dis_integral,
    }))
    _plot(session, "sweep", res)


def cmd_optimize(session: Session) -> None:
    cfg, run = session.cfg, session.run
    kind = ObjectiveKind(cfg.get("optimize.objective", ConfigEntry("final_epsilon", None)).value.strip())
    eps_target = config_float(cfg, "optimize.eps_target", 0.2)
    e = run.model.energy_scale
    start = {"g_sb": config_float(cfg, "optimize.g_sb0", 0.2 * e), "gamma": config_float(cfg, "optimize.gamma0", 0.5 * e)}
    options = NelderMeadOptions(max_evals=config_int(cfg, "optimize.max_evals", 150), rtol_f=0.01, tol_f=1e-6,
                                tol_x=0.02)
    with_delta = cfg.get("optimize.delta", ConfigEntry("false", None)).value.strip().lower() in ("1", "true", "yes")
    res = optimize_cooling(run, kind, session.n_traj, session.seed, eps_target=eps_target, initial=start,
                           options=options, threads=session.threads, optimize_delta=with_delta)
    path = session.out / "trace.csv"
    path.write_text(res.to_csv(), encoding="utf-8")
    session.add(path)
    session.add(write_json(session.out / "summary.json", {
        "objective": kind.value,
        "best_params": res.best_params,
        "best_objective": res.best_objective,
        "n_evaluations": res.n_evaluations,
        "converged": res.converged,
    }))
    _plot(session, "optimization", res)


def cmd_scale(session: Session) -> None:
    cfg, run = session.cfg, session.run
    sizes_entry = cfg.get("scale.n")
    if sizes_entry is not None:
        try:
            sizes = [int(x) for x in sizes_entry.value.split(",") if x.strip()]
        except ValueError:
            raise ConfigError("scale.n must be a comma-separated list of integers", key="scale.n",
                              line=sizes_entry.line) from None
    else:
        sizes = list(range(config_int(cfg, "scale.n_min", 4), config_int(cfg, "scale.n_max", 8) + 1))
    eps_target = config_float(cfg, "scale.eps_target", 0.2)
    e = run.model.energy_scale
    start = (config_float(cfg, "scale.g_sb0", REFERENCE_START[run.model.kind][0] * e),
             config_float(cfg, "scale.gamma0", REFERENCE_START[run.model.kind][1] * e))
    res = scaling_study(run.model, sizes, eps_target, session.n_traj, session.seed, threads=session.threads,
                        start=start, t_max0=run.t_max, n_grid=run.n_grid,
                        horizon=config_float(cfg, "scale.horizon", 2.0),
                        options=NelderMeadOptions(max_evals=config_int(cfg, "scale.max_evals", 150), rtol_f=0.01,
                                                  tol_f=1e-6, tol_x=0.02),
                        progress=lambda msg: log.info(msg))
    session.add(write_csv(session.out / "scaling.csv", ["N", "t_p", "g_sb", "gamma"],
                          [(n, t, res.optimizations[n].best_params["g_sb"], res.optimizations[n].best_params["gamma"])
                           for n, t in res.points]))
    fit = {"alpha": res.alpha, "alpha_stderr": res.alpha_stderr, "intercept": res.intercept,
           "residuals": res.residuals}
    if res.parity_split is not None:
        fit["intercept_even"] = res.parity_split.intercepts["even"]
        fit["intercept_odd"] = res.parity_split.intercepts["odd"]
        fit["odd_below_even_line"] = res.odd_below_even_line()
    session.add(write_json(session.out / "summary.json", {"points": res.points, "fit": fit, "t_max": res.t_max,
                                                          "eps_target": eps_target}))
    _plot(session, "scaling", res)


def cmd_transitions(session: Session) -> None:
    run = session.run
    spectrum = spectrum_for(run)
    delta = resolve_delta(run, spectrum)
    graph = cooling_transition_graph(spectrum, delta, run.bath.gamma)
    path = session.out / "transitions.txt"
    graph.write(path)
    session.add(path)
    reach = graph.reachable()
    session.add(write_json(session.out / "summary.json", {
        "delta": delta, "gamma": run.bath.gamma, "n_edges": len(graph.edges),
        "manifold_dim": spectrum.manifold_dim, "all_reachable": bool(reach.all()),
        "unreachable": np.flatnonzero(~reach).tolist(),
    }))
    _plot(session, "transitions", graph)


def cmd_spectrum(session: Session) -> None:
    spectrum = spectrum_for(session.run)
    session.add(write_csv(session.out / "spectrum.csv", ["index", "energy"], enumerate(spectrum.energies)))
    session.add(write_json(session.out / "summary.json", {
        "e0": spectrum.e0, "gap": spectrum.gap, "manifold_dim": spectrum.manifold_dim,
        "first_excited": spectrum.first_excited,
    }))
    _plot(session, "spectrum", spectrum)


COMMANDS = {
    "cool": cmd_cool,
    "sweep-delta": cmd_sweep_delta,
    "optimize": cmd_optimize,
    "scale": cmd_scale,
    "transitions": cmd_transitions,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sympacool", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="key = value configuration file")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--n-traj", type=int, dest="n_traj")
        p.add_argument("--seed", type=int)
        p.add_argument("--t-max", type=float, dest="t_max")
        p.add_argument("--n-grid", type=int, dest="n_grid")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: $SYMPACOOL_THREADS or all cores)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--plot", action="store_true", help="also render a PNG figure")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "cool":
            p.add_argument("--eps-target", type=float, dest="eps_target",
                           help="also report the preparation time to this epsilon")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "scale" else logging.WARNING,
                        stream=sys.stderr, format="%(message)s")
    try:
        session = Session(args)
        COMMANDS[args.command](session)
        session.finish(args.command)
    except (ValidationError, CapacityError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, NotConvergedError, EvaluationError, PartialResultError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
