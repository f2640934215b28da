"""Static figures written next to the CSV output (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "plot_potential_profile",
    "plot_gsc_profile",
    "plot_gsc_history",
    "plot_pde_energy",
    "plot_field_profile",
    "plot_conservation",
]

_STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_potential_profile(path, s, values, fixed_points=(), title=None):
    """V along a 1-D slice, fixed points marked by stability."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(s, values, color="C0", lw=1.5)
        ax.axhline(0.0, color="0.5", lw=0.8)
        for p in fixed_points:
            stable = p.stability.value == "stable"
            ax.plot(p.u[0], p.value, "o" if stable else "x", color="C3" if stable else "C2", ms=6)
        ax.set_xlabel("u")
        ax.set_ylabel("V(u)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_gsc_profile(path, profiles, labels=None):
    """Performance along each axis through the lattice centre."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for i, prof in enumerate(profiles):
            label = labels[i] if labels else f"axis {i}"
            ax.plot(prof.x, prof.perf, marker=".", ms=3, lw=1, label=label)
        ax.set_xlabel("l / L")
        ax.set_ylabel("perf")
        if len(profiles) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_gsc_history(path, history):
    it = np.array([h.iteration for h in history])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(it, np.maximum([h.linf_change for h in history], 1e-300), label="sup change")
        ax.semilogy(it, np.maximum([h.max_perf for h in history], 1e-300), label="max perf")
        ax.set_xlabel("iteration")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_pde_energy(path, rows):
    steps = np.array([r[0] for r in rows])
    h = np.array([r[1] for r in rows])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, h, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("H")
        return _save(fig, path)


def plot_field_profile(path, x, values, ylabel):
    """Profile along one axis; one line per state component."""
    values = np.asarray(values)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for a in range(values.shape[-1]):
            ax.plot(x, values[:, a], lw=1.2, label=f"component {a}")
        ax.set_xlabel("x")
        ax.set_ylabel(ylabel)
        if values.shape[-1] > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_conservation(path, x, energy):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, energy - energy[0], color="C1")
        ax.set_xlabel("x")
        ax.set_ylabel("E(x) - E(-1)")
        return _save(fig, path)
