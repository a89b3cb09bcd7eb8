"""Matplotlib figures written next to the CLI's delimited output.

Imported lazily by the CLI so the library itself never needs a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_cooling(result, path: Path) -> Path:
    t = result.times
    fig, (ax_e, ax_f) = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
    ax_e.fill_between(t, result.mean["epsilon"] - result.sem["epsilon"],
                      result.mean["epsilon"] + result.sem["epsilon"], alpha=0.3)
    ax_e.plot(t, result.mean["epsilon"])
    ax_e.set_ylabel(r"$\epsilon$")
    ax_f.plot(t, result.mean["fidelity"], color="C1")
    ax_f.set_ylim(0, 1.02)
    ax_f.set_ylabel("fidelity")
    ax_f.set_xlabel("time")
    return _save(fig, path)


def plot_sweep(result, path: Path) -> Path:
    x = result.delta_grid / result.gap_reference
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(x, result.final_energy, yerr=result.final_energy_sem, marker="o", label="final energy")
    ax.plot(x, -result.e_dis, marker="s", label=r"$-E_{dis}$")
    ax.axvline(1.0, color="grey", ls=":")
    ax.set_xlabel(r"$\Delta / \Delta E$")
    ax.legend()
    return _save(fig, path)


def plot_optimization(result, path: Path) -> Path:
    values = np.array([v for _, v in result.trace])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(values) + 1), values, ".", alpha=0.6)
    ax.plot(np.arange(1, len(values) + 1), np.minimum.accumulate(values), color="C3")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("objective")
    return _save(fig, path)


def plot_scaling(result, path: Path) -> Path:
    n = np.array([p[0] for p in result.points], dtype=float)
    t = np.array([p[1] for p in result.points])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(n, t, "o")
    grid = np.linspace(n.min(), n.max(), 50)
    ax.loglog(grid, np.exp(result.intercept) * grid**result.alpha, "--",
              label=rf"$\alpha = {result.alpha:.2f} \pm {result.alpha_stderr:.2f}$")
    ax.set_xlabel("N")
    ax.set_ylabel(r"$t_p$")
    ax.legend()
    return _save(fig, path)


def plot_spectrum(spectrum, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(3, 5))
    for k, e in enumerate(spectrum.energies):
        ax.hlines(e, 0, 1, color="C3" if k < spectrum.manifold_dim else "C0", lw=1)
    ax.set_xticks([])
    ax.set_ylabel("energy")
    return _save(fig, path)


def plot_transitions(graph, path: Path) -> Path:
    e = graph.energies
    fig, ax = plt.subplots(figsize=(4, 6))
    ax.hlines(e, 0, 1, color="k", lw=0.8)
    for i, j in graph.edges:
        x = 0.1 + 0.8 * (i + 0.5) / len(e)
        ax.annotate("", xy=(x, e[j]), xytext=(x, e[i]), arrowprops={"arrowstyle": "->", "alpha": 0.4})
    ax.set_xticks([])
    ax.set_ylabel("energy")
    return _save(fig, path)
