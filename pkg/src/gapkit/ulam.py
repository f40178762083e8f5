"""Ulam discretization of the averaged operator.

The box grid matches Omega's anisotropic axes, so resolution is comparable
in dynamical units per axis.  Transition weights are forward probabilities
estimated with a deterministic tensor midpoint rule per source box and
quadrature over the noise; densities (piecewise constant, one value per
box) update by left multiplication with the row-stochastic matrix.  With
equal box volumes this is exactly the discretized operator acting on
densities, and it is the single orientation convention used everywhere.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sparse

from . import expr
from .model import GeometryReport, ModelSpec, apply_T, in_omega
from .transfer import theta_quadrature


class UlamError(RuntimeError):
    """Grid or assembly failure."""


DEFAULT_MAX_BOXES = 1 << 24


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Half-open box partition of Omega (top faces excluded)."""

    counts: tuple
    half_widths: np.ndarray

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return 2.0 * self.half_widths / np.asarray(self.counts)

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.counts[axis]
        w = self.widths[axis]
        return -self.half_widths[axis] + (np.arange(n) + 0.5) * w

    def centers(self, ids: Optional[np.ndarray] = None) -> np.ndarray:
        """Box centers, shape (len(ids), k); all boxes when ids is None."""
        if ids is None:
            ids = np.arange(self.size)
        multi = np.stack(np.unravel_index(ids, self.counts), axis=-1)
        return -self.half_widths + (multi + 0.5) * self.widths

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Box ids for points (N, k); -1 outside Omega.

        Points within rounding slack of the top faces are clamped into the
        edge boxes so that images on closed faces are not dropped.
        """
        pts = np.asarray(points, dtype=float)
        tol = 1e-12 * (1.0 + self.half_widths)
        outside = (np.abs(pts) > self.half_widths + tol).any(axis=-1)
        idx = np.floor((pts + self.half_widths) / self.widths).astype(np.int64)
        np.clip(idx, 0, np.asarray(self.counts) - 1, out=idx)
        flat = np.ravel_multi_index(tuple(idx[..., i] for i in range(self.k)),
                                    self.counts)
        return np.where(outside, -1, flat)

    def subsample_points(self, ids: np.ndarray, s: int) -> np.ndarray:
        """Tensor midpoint subsamples, shape (len(ids) * s^k, k)."""
        corners = -self.half_widths + np.stack(
            np.unravel_index(ids, self.counts), axis=-1) * self.widths
        offs = [(np.arange(s) + 0.5) / s * self.widths[i] for i in range(self.k)]
        mesh = np.meshgrid(*offs, indexing="ij")
        offsets = np.stack([m.ravel() for m in mesh], axis=-1)
        pts = corners[:, None, :] + offsets[None, :, :]
        return pts.reshape(-1, self.k)


def build_grid(geom: GeometryReport, per_axis: Sequence[int],
               max_boxes: int = DEFAULT_MAX_BOXES) -> Grid:
    """Box grid over Omega with the given per-axis counts."""
    counts = tuple(int(n) for n in per_axis)
    if len(counts) != geom.omega.shape[0]:
        raise UlamError("per-axis counts must match the state dimension")
    if any(n < 2 for n in counts):
        raise UlamError("need at least 2 boxes per axis")
    total = 1
    for n in counts:
        total *= n
    if total > max_boxes:
        raise UlamError(f"grid of {total} boxes exceeds the maximum {max_boxes}")
    return Grid(counts=counts, half_widths=geom.omega.copy())


# ---------------------------------------------------------------------------
# densities


@dataclass
class DensityGrid:
    """Piecewise-constant density w.r.t. Lebesgue measure on Omega."""

    values: np.ndarray
    grid: Grid

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.box_volume)

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.grid.box_volume)

    def normalized(self) -> "DensityGrid":
        total = self.integral()
        if total <= 0:
            raise UlamError("cannot normalize a density with nonpositive mass")
        return DensityGrid(self.values / total, self.grid)

    def l1_distance(self, other: "DensityGrid") -> float:
        return float(np.abs(self.values - other.values).sum() * self.grid.box_volume)

    def as_function(self) -> Callable[[np.ndarray], np.ndarray]:
        values, grid = self.values, self.grid

        def fn(points: np.ndarray) -> np.ndarray:
            ids = grid.locate(points)
            out = np.where(ids >= 0, values[np.clip(ids, 0, None)], 0.0)
            return out

        return fn


def uniform_density(grid: Grid) -> DensityGrid:
    vol = grid.box_volume * grid.size
    return DensityGrid(np.full(grid.size, 1.0 / vol), grid)


def density_from_function(fn, grid: Grid, chunk: int = 1 << 18) -> DensityGrid:
    """Sample a callable at box centers into a grid density."""
    vals = np.empty(grid.size)
    for start in range(0, grid.size, chunk):
        ids = np.arange(start, min(start + chunk, grid.size))
        vals[ids] = fn(grid.centers(ids))
    return DensityGrid(vals, grid)


# ---------------------------------------------------------------------------
# matrix assembly


@dataclass
class StochasticMatrix:
    """Sparse row-stochastic forward-transition matrix on the box grid."""

    matrix: sparse.csr_matrix
    pre_normalization_drift: float
    _transpose: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def propagate(self, density: np.ndarray) -> np.ndarray:
        """Density update ``v @ M`` (left action on row vectors)."""
        if self._transpose is None:
            self._transpose = self.matrix.transpose().tocsr()
        return self._transpose @ density

    def export_triplets(self, path) -> None:
        coo = self.matrix.tocoo()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# row col value\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v!r}\n")


def _chunk_entries(spec: ModelSpec, geom: GeometryReport, grid: Grid,
                   ids: np.ndarray, nodes: np.ndarray, weights: np.ndarray,
                   s: int, phi_batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw transition entries for one chunk of source boxes."""
    pts = grid.subsample_points(ids, s)
    per_box = s ** grid.k
    src_local = np.repeat(np.arange(ids.size), per_box)
    n_cells = ids.size * grid.size
    w_point = 1.0 / per_box
    all_keys, all_weights = [], []
    for theta, wt in zip(nodes, weights):
        images = apply_T(pts, float(theta), spec, geom, phi_batch=phi_batch)
        target = grid.locate(images)
        if (target < 0).any():
            raise UlamError("image left Omega during assembly")
        all_keys.append(src_local * grid.size + target)
        all_weights.append(np.full(target.size, wt * w_point))
    acc = np.bincount(np.concatenate(all_keys),
                      weights=np.concatenate(all_weights), minlength=n_cells)
    dense = acc.reshape(ids.size, grid.size)
    rows_l, cols = np.nonzero(dense)
    return ids[rows_l], cols, dense[rows_l, cols]


def assemble_ulam(spec: ModelSpec, geom: GeometryReport, grid: Grid,
                  theta_quad: int = 8, subsamples: int = 4,
                  chunk_boxes: int = 256, threads: int = 1) -> StochasticMatrix:
    """Assemble the forward-transition matrix of the averaged operator.

    Entry (i, j) estimates the probability that a point uniform in box i
    lands in box j after one noisy step, via ``subsamples^k`` midpoint
    subsamples and the noise quadrature.  Deterministic for fixed inputs
    and for any thread count (per-chunk results are combined in order).
    """
    if subsamples < 2:
        raise UlamError("need at least 2 subsamples per axis")
    nodes, weights = theta_quadrature(spec.perturbation, theta_quad)
    quad_mass = float(weights.sum())
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    chunks = [np.arange(start, min(start + chunk_boxes, grid.size))
              for start in range(0, grid.size, chunk_boxes)]

    def work(ids: np.ndarray):
        return _chunk_entries(spec, geom, grid, ids, nodes, weights, subsamples,
                              phi_batch)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(ids) for ids in chunks]

    rows = np.concatenate([r for r, _, _ in results])
    cols = np.concatenate([c for _, c, _ in results])
    data = np.concatenate([d for _, _, d in results])
    raw = sparse.coo_matrix((data, (rows, cols)),
                            shape=(grid.size, grid.size)).tocsr()
    row_sums = np.asarray(raw.sum(axis=1)).ravel()
    if (row_sums <= 0).any():
        raise UlamError("empty row during assembly")
    drift = float(np.abs(row_sums / quad_mass - 1.0).max())
    inv = sparse.diags(1.0 / row_sums)
    return StochasticMatrix(matrix=(inv @ raw).tocsr(),
                            pre_normalization_drift=drift)


# ---------------------------------------------------------------------------
# stationary density and subdominant modulus


def stationary_density(matrix: StochasticMatrix, grid: Grid, tol: float = 1e-10,
                       max_iter: int = 100_000, cesaro_tol: float = 5e-7,
                       max_cesaro_terms: int = 30_000
                       ) -> tuple[DensityGrid, float, dict]:
    """Power iteration from the uniform density, cross-checked by Cesaro.

    Returns the (renormalized) fixed density, the final one-step L1
    residual, and diagnostics.  The Cesaro average of the iterates (also
    from the uniform start) converges only like 1/n, so it is extended
    until it is within ``cesaro_tol`` of the power fixed point or the term
    cap is hit; a persistent discrepancy flags a peripheral eigenvalue
    besides 1.  A stagnating power residual is reported through
    ``info["converged"] = False`` rather than an exception; it signals a
    subdominant modulus at or near 1.
    """
    vol = grid.box_volume
    v = uniform_density(grid).values
    residual = math.inf
    iterations = 0
    while iterations < max_iter:
        w = matrix.propagate(v)
        residual = float(np.abs(w - v).sum() * vol)
        v = w
        iterations += 1
        if residual <= tol:
            break
    converged = residual <= tol
    h = DensityGrid(v, grid).normalized()

    cesaro = np.zeros_like(v)
    u = uniform_density(grid).values
    terms = 0
    discrepancy = math.inf
    while terms < max_cesaro_terms:
        u = matrix.propagate(u)
        cesaro += u
        terms += 1
        if terms % 64 == 0 or terms == max_cesaro_terms:
            cesaro_h = DensityGrid(cesaro / terms, grid).normalized()
            discrepancy = h.l1_distance(cesaro_h)
            if discrepancy <= cesaro_tol:
                break

    info = {
        "iterations": iterations,
        "converged": converged,
        "cesaro_terms": terms,
        "cesaro_discrepancy": discrepancy,
    }
    return h, residual, info


def subdominant_modulus(matrix: StochasticMatrix, h_star: DensityGrid,
                        iterations: int = 400, tail: int = 20,
                        restarts: int = 5, seed: int = 0) -> tuple[float, dict]:
    """Estimate the second-largest eigenvalue modulus of the box matrix.

    Power iteration on the complement of the fixed direction: the conserved
    total mass (the constant right-fixed vector of a stochastic matrix)
    identifies the component along ``h_star``, which is projected out after
    every step.  The growth is read as a geometric mean over the last
    ``tail`` steps; several seeded restarts guard against unlucky starts.
    """
    vol = h_star.grid.box_volume
    h = h_star.values
    h_mass = float(h.sum() * vol)

    def project(v: np.ndarray) -> np.ndarray:
        return v - (float(v.sum() * vol) / h_mass) * h

    estimates = []
    rng = np.random.Generator(np.random.Philox(key=seed))
    for _ in range(restarts):
        v = project(rng.standard_normal(h.size))
        norm = float(np.abs(v).sum() * vol)
        if norm == 0.0:
            estimates.append(0.0)
            continue
        v /= norm
        log_growth: list[float] = []
        dead = False
        for _ in range(iterations):
            v = project(matrix.propagate(v))
            norm = float(np.abs(v).sum() * vol)
            if norm <= 1e-300:
                dead = True
                break
            log_growth.append(math.log(norm))
            v /= norm
        if dead or not log_growth:
            estimates.append(0.0)
        else:
            tail_logs = log_growth[-min(tail, len(log_growth)):]
            estimates.append(math.exp(sum(tail_logs) / len(tail_logs)))
    best = max(estimates)
    return best, {"restart_estimates": estimates,
                  "note": "power-iteration estimate; peripheral spectrum "
                          "reported as gap found/not found"}


@dataclass(frozen=True)
class SpectralReport:
    """Leading/subdominant spectral data of the discretized operator."""

    leading: float
    h_star: DensityGrid
    lam2: float
    gap: float
    iterations: int
    cesaro_discrepancy: float
    converged: bool
    restart_estimates: tuple

    def to_dict(self) -> dict:
        return {
            "leading": self.leading,
            "lam2": self.lam2,
            "gap": self.gap,
            "iterations": self.iterations,
            "cesaro_discrepancy": self.cesaro_discrepancy,
            "converged": self.converged,
            "restart_estimates": list(self.restart_estimates),
        }


def spectral_report(matrix: StochasticMatrix, grid: Grid, seed: int = 0,
                    tol: float = 1e-10) -> SpectralReport:
    h, residual, info = stationary_density(matrix, grid, tol=tol)
    lam2, sub_info = subdominant_modulus(matrix, h, seed=seed)
    hm = matrix.propagate(h.values)
    leading = float((hm * h.values).sum() / (h.values * h.values).sum())
    return SpectralReport(
        leading=leading, h_star=h, lam2=lam2, gap=1.0 - lam2,
        iterations=info["iterations"],
        cesaro_discrepancy=info["cesaro_discrepancy"],
        converged=info["converged"],
        restart_estimates=tuple(sub_info["restart_estimates"]))


# ---------------------------------------------------------------------------
# forward mass transport (change-of-variables integral of the pushforward)


def transfer_integral_forward(f: DensityGrid, spec: ModelSpec, geom: GeometryReport,
                              quad_order: int = 8, subsamples: int = 4,
                              chunk_boxes: int = 1024) -> float:
    """Integral of the averaged pushforward of ``f`` over Omega.

    Integrates branch by branch in the source variables (each subsample
    contributes its weight wherever its image lands), which is how the
    pushforward integral is defined; it must reproduce the integral of
    ``f`` to rounding accuracy when no mass leaks.
    """
    grid = f.grid
    nodes, weights = theta_quadrature(spec.perturbation, quad_order)
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    per_box = subsamples ** grid.k
    total = 0.0
    for start in range(0, grid.size, chunk_boxes):
        ids = np.arange(start, min(start + chunk_boxes, grid.size))
        pts = grid.subsample_points(ids, subsamples)
        fvals = np.repeat(f.values[ids], per_box)
        landed = np.zeros(pts.shape[0])
        for theta, wt in zip(nodes, weights):
            images = apply_T(pts, float(theta), spec, geom, phi_batch=phi_batch)
            landed += wt * in_omega(images, geom)
        total += float((fvals * landed).sum()) * grid.box_volume / per_box
    return total
