"""Figure rendering for the report pipeline.

All figures are written to files (Agg backend, no display); the same data
goes out as CSV next to them, so the plots are a convenience view, not the
primary artifact.
"""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import expr, model
from .model import GeometryReport, ModelSpec
from .stats import Marginal1D
from .ulam import DensityGrid, Grid


def density_figure(h: DensityGrid, grid: Grid, path) -> Optional[str]:
    """Heatmap (k=2) or line plot (k=1) of a grid density."""
    if grid.k == 1:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.step(grid.axis_centers(0), h.values, where="mid", lw=1.0)
        ax.set_xlabel("u1")
        ax.set_ylabel("density")
    elif grid.k == 2:
        fig, ax = plt.subplots(figsize=(6, 4.2))
        img = h.values.reshape(grid.counts).T
        hw = grid.half_widths
        im = ax.imshow(img, origin="lower", aspect="auto",
                       extent=[-hw[0], hw[0], -hw[1], hw[1]], cmap="viridis")
        fig.colorbar(im, ax=ax, label="density")
        ax.set_xlabel("u1")
        ax.set_ylabel("u2")
    else:
        return None
    ax.set_title("stationary density")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def marginals_figure(marginals: Sequence[Marginal1D], path,
                     empirical: Optional[tuple[np.ndarray, np.ndarray]] = None
                     ) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for m in marginals:
        ax.step(m.t, m.values, where="mid", lw=1.0, label=f"axis {m.axis}")
    if empirical is not None:
        t, vals = empirical
        ax.step(t, vals, where="mid", lw=0.8, ls="--", color="k",
                label="empirical")
    ax.set_xlabel("X")
    ax.set_ylabel("density")
    ax.set_title("scalar-state marginals")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def decay_figure(fits: Sequence[tuple[str, np.ndarray, Optional[float]]],
                 lam2: float, path) -> str:
    """Semilog covariance decay with the subdominant modulus for reference."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    n_max = 0
    for label, covs, lam in fits:
        ns = np.arange(covs.size)
        n_max = max(n_max, covs.size - 1)
        tag = f"{label} (fit {lam:.3g})" if lam is not None else f"{label} (no fit)"
        ax.semilogy(ns, np.maximum(np.abs(covs), 1e-18), marker="o", ms=3,
                    lw=0.8, label=tag)
    if n_max and lam2 > 0:
        ns = np.arange(n_max + 1)
        ax.semilogy(ns, lam2 ** ns, color="gray", ls=":",
                    label=f"|lam2|^n = {lam2:.3g}^n")
    ax.set_xlabel("lag n")
    ax.set_ylabel("|cov|")
    ax.set_title("correlation decay")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def boundaries_figure(spec: ModelSpec, geom: GeometryReport, theta: float,
                      path, max_sheets: int = 12, sampling: int = 129
                      ) -> Optional[str]:
    """Traces of the slanted partition boundaries in the state box (k=2)."""
    if spec.k != 2:
        return None
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    window = model.branch_window(geom, spec.L, theta)
    targets = np.array([(2 * j - 1) * spec.L - theta for j in window])
    trans = np.linspace(-geom.omega[1], geom.omega[1], sampling)[:, None]
    clouds = model._trace_boundary(spec, geom, phi_batch, targets, trans)
    nonempty = [(j, c) for j, c in zip(window, clouds) if c.shape[0] > 0]
    center = len(nonempty) // 2
    lo = max(0, center - max_sheets // 2)
    shown = nonempty[lo:lo + max_sheets]
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    for j, cloud in shown:
        order = np.argsort(cloud[:, 1])
        ax.plot(cloud[order, 0], cloud[order, 1], lw=0.9)
    ax.set_xlabel("u1")
    ax.set_ylabel("u2")
    ax.set_title(f"partition boundaries near the center (theta={theta:g}, "
                 f"{len(nonempty)} sheets total)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)
