"""Inverse branches and transfer-operator evaluation.

For a fixed perturbation value theta the one-step map is a finite union of
expanding diffeomorphic branches; pushing a density forward sums, over the
inverse branches of a target point, the density value times the inverse
Jacobian ``1 / |d1 phi0|``.  Averaging over theta uses deterministic
composite Gauss-Legendre quadrature on the (truncated) noise support so
that Ulam matrices and reports are reproducible.

Branch inversion is by bisection on the first coordinate: the slope
condition makes ``phi0`` strictly monotone there, so the bracket
``(-L-beta, L+beta)`` is guaranteed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import expr
from .model import (GeometryReport, ModelSpec, PerturbationSpec, branch_window,
                    in_omega, unit_ball_volume)


class TransferError(RuntimeError):
    """Branch inversion or constant tuning failed."""


BISECT_ITERS = 52  # bracket width 2(L+beta) * 2^-52: below 1e-14 at unit scale


@dataclass(frozen=True)
class Branch:
    """One inverse branch of the map at a target point."""

    j: int
    preimage: np.ndarray
    weight: float  # inverse Jacobian 1 / |d1 phi0|


def _as_point_function(f) -> Callable[[np.ndarray], np.ndarray]:
    """Coerce f (callable, density grid, or constant) to act on (M, k) points."""
    if callable(f):
        return f
    if hasattr(f, "as_function"):
        return f.as_function()
    if isinstance(f, (int, float)):
        c = float(f)
        return lambda pts: np.full(pts.shape[0], c)
    raise TypeError(f"cannot evaluate {type(f).__name__} as a point function")


# ---------------------------------------------------------------------------
# quadrature over the perturbation


def theta_quadrature(pert: PerturbationSpec, quad_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and H-weighted weights over the truncated noise support.

    Composite Gauss-Legendre with ``2 * quad_order`` panels of
    ``quad_order`` nodes each; a degenerate law yields the single node with
    weight one.  The returned weights integrate test functions against the
    renormalized density.
    """
    if pert.degenerate:
        return np.array([pert.a]), np.array([1.0])
    if quad_order < 2:
        raise ValueError("quad_order must be >= 2")
    lo, hi = pert.support()
    panels = 2 * quad_order
    x, w = np.polynomial.legendre.leggauss(quad_order)
    edges = np.linspace(lo, hi, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights * pert.density(nodes)


# ---------------------------------------------------------------------------
# branch inversion


def _bisect_first_coordinate(phi_batch, trans_args: np.ndarray, targets: np.ndarray,
                             lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve phi0(c, trans_args_i) = targets_i for c in [lo, hi], vectorized.

    Returns (roots, bracketed); roots are NaN where no sign change exists.
    """
    m = targets.size
    buf = np.empty((m, trans_args.shape[1] + 1))
    buf[:, 1:] = trans_args
    buf[:, 0] = lo
    fa_all = phi_batch(buf) - targets
    buf[:, 0] = hi
    fb_all = phi_batch(buf) - targets
    bracketed = fa_all * fb_all <= 0.0
    roots = np.full(m, np.nan)
    idx = np.nonzero(bracketed)[0]
    if idx.size == 0:
        return roots, bracketed
    a = np.full(idx.size, float(lo))
    b = np.full(idx.size, float(hi))
    fa = fa_all[idx]
    sub = np.empty((idx.size, buf.shape[1]))
    sub[:, 1:] = trans_args[idx]
    t = targets[idx]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (a + b)
        sub[:, 0] = mid
        fm = phi_batch(sub) - t
        same = (fm > 0) == (fa > 0)
        a = np.where(same, mid, a)
        fa = np.where(same, fm, fa)
        b = np.where(same, b, mid)
    roots[idx] = 0.5 * (a + b)
    return roots, bracketed


def _branch_targets(ys: np.ndarray, js: np.ndarray, theta: float,
                    spec: ModelSpec, geom: GeometryReport) -> np.ndarray:
    """Right-hand sides phi0 must reach, one per (point, branch index)."""
    base = ys[:, -1] * geom.gamma ** (-(spec.k - 1)) - theta
    return base[:, None] + 2.0 * spec.L * js[None, :]


def _solve_branches(ys: np.ndarray, js: np.ndarray, theta: float,
                    spec: ModelSpec, geom: GeometryReport, phi_batch):
    """Roots and preimage data for every (point, branch) pair.

    Returns (u1 roots (N, W), found (N, W), trans_args (N, k-1)); a pair is
    found when the bracket holds and the root lies strictly inside (-L, L).
    """
    n, k = ys.shape
    w = js.size
    trans_args = ys[:, :k - 1] / geom.gscale[:k - 1]
    targets = _branch_targets(ys, js, theta, spec, geom).ravel()
    trans_rep = np.repeat(trans_args, w, axis=0)
    lo, hi = -spec.L - spec.beta, spec.L + spec.beta
    roots, bracketed = _bisect_first_coordinate(phi_batch, trans_rep, targets, lo, hi)
    roots = roots.reshape(n, w)
    with np.errstate(invalid="ignore"):
        found = bracketed.reshape(n, w) & (np.abs(roots) < spec.L)
    return roots, found, trans_args


def inverse_branch(y, j: int, theta: float, spec: ModelSpec,
                   geom: GeometryReport) -> Optional[Branch]:
    """Invert branch ``j`` at a point of Omega; None when the branch is empty.

    The preimage tail is the rescaled shift of ``y``; the first coordinate
    solves a monotone scalar equation by bisection.  Round trip through the
    forward map reproduces ``y`` to ~1e-10.
    """
    ys = np.atleast_2d(np.asarray(y, dtype=float))
    if not in_omega(ys, geom).all():
        raise TransferError("target point outside Omega")
    if geom.bounds_wide.grad_sq_min[0] <= 0.0:
        raise TransferError("first-partial sign is not bounded away from zero")
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    roots, found, trans_args = _solve_branches(
        ys, np.array([j]), theta, spec, geom, phi_batch)
    if not found[0, 0]:
        return None
    u = np.empty(spec.k)
    u[0] = roots[0, 0]
    u[1:] = spec.gamma * ys[0, :spec.k - 1]
    x = np.concatenate([[u[0]], trans_args[0]])
    _, grad = expr.evaluate_with_gradient(spec.phi0, x)
    return Branch(j=j, preimage=u, weight=1.0 / abs(float(grad[0])))


def enumerate_branches(y, theta: float, spec: ModelSpec,
                       geom: GeometryReport) -> list[Branch]:
    """All nonempty inverse branches at ``y`` for one perturbation value."""
    ys = np.atleast_2d(np.asarray(y, dtype=float))
    if not in_omega(ys, geom).all():
        raise TransferError("target point outside Omega")
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    js = np.array(list(branch_window(geom, spec.L, theta)))
    roots, found, trans_args = _solve_branches(ys, js, theta, spec, geom, phi_batch)
    branches = []
    for col in np.nonzero(found[0])[0]:
        u = np.empty(spec.k)
        u[0] = roots[0, col]
        u[1:] = spec.gamma * ys[0, :spec.k - 1]
        x = np.concatenate([[u[0]], trans_args[0]])
        _, grad = expr.evaluate_with_gradient(spec.phi0, x)
        branches.append(Branch(int(js[col]), u, 1.0 / abs(float(grad[0]))))
    return branches


# ---------------------------------------------------------------------------
# operator evaluation


def transfer_theta_batch(f, ys: np.ndarray, theta: float, spec: ModelSpec,
                         geom: GeometryReport, phi_batch=None,
                         max_block: int = 1 << 21) -> np.ndarray:
    """Pointwise transfer-operator values at points ``ys`` (N, k), fixed theta."""
    fn = _as_point_function(f)
    ys = np.asarray(ys, dtype=float)
    if phi_batch is None:
        phi_batch = expr.compile_batch(spec.phi0, spec.k)
    js = np.array(list(branch_window(geom, spec.L, theta)))
    w = js.size
    n = ys.shape[0]
    out = np.zeros(n)
    step = max(1, max_block // max(w, 1))
    for start in range(0, n, step):
        block = ys[start:start + step]
        roots, found, trans_args = _solve_branches(block, js, theta, spec, geom, phi_batch)
        rows, cols = np.nonzero(found)
        if rows.size == 0:
            continue
        m = rows.size
        pts_u = np.empty((m, spec.k))
        pts_u[:, 0] = roots[rows, cols]
        pts_u[:, 1:] = spec.gamma * block[rows, :spec.k - 1]
        pts_x = np.empty_like(pts_u)
        pts_x[:, 0] = pts_u[:, 0]
        pts_x[:, 1:] = trans_args[rows]
        _, grads = expr.dual_batch(spec.phi0, pts_x)
        weights = 1.0 / np.abs(grads[:, 0])
        vals = fn(pts_u)
        np.add.at(out, start + rows, weights * np.asarray(vals, dtype=float))
    return out


def apply_transfer_theta(f, y, theta: float, spec: ModelSpec,
                         geom: GeometryReport) -> float:
    """Transfer-operator value at one point for one perturbation value."""
    ys = np.atleast_2d(np.asarray(y, dtype=float))
    if not in_omega(ys, geom).all():
        raise TransferError("target point outside Omega")
    return float(transfer_theta_batch(f, ys, theta, spec, geom)[0])


def transfer_averaged_batch(f, ys: np.ndarray, spec: ModelSpec, geom: GeometryReport,
                            quad_order: int = 8, phi_batch=None) -> np.ndarray:
    """Noise-averaged operator values at points ``ys`` (N, k)."""
    nodes, weights = theta_quadrature(spec.perturbation, quad_order)
    if phi_batch is None:
        phi_batch = expr.compile_batch(spec.phi0, spec.k)
    out = np.zeros(np.asarray(ys).shape[0])
    for theta, wt in zip(nodes, weights):
        out += wt * transfer_theta_batch(f, ys, float(theta), spec, geom, phi_batch)
    return out


def apply_transfer_averaged(f, y, spec: ModelSpec, geom: GeometryReport,
                            quad_order: int = 8) -> float:
    ys = np.atleast_2d(np.asarray(y, dtype=float))
    if not in_omega(ys, geom).all():
        raise TransferError("target point outside Omega")
    return float(transfer_averaged_batch(f, ys, spec, geom, quad_order)[0])


def transfer_sup_bound(spec: ModelSpec, geom: GeometryReport, sup_f: float) -> float:
    """Uniform pointwise bound N * sup|f| * C1^(-(k-1)/2) C2^(-1/2) sigma^(-k/2)."""
    k = spec.k
    return (geom.N_bound * sup_f * spec.C1 ** (-(k - 1) / 2.0)
            * spec.C2 ** -0.5 * spec.sigma ** (-k / 2.0))


# ---------------------------------------------------------------------------
# duality check (forward Monte Carlo oracle vs pointwise evaluation)


def duality_check(spec: ModelSpec, geom: GeometryReport, box_lo: np.ndarray,
                  box_hi: np.ndarray, theta: float, f, n_samples: int = 100_000,
                  quad_per_axis: int = 16, seed: int = 0) -> dict:
    """Compare both sides of the defining relation of the operator on a box.

    The left side integrates pointwise operator values over the box with a
    tensor midpoint rule; the right side is an independent forward Monte
    Carlo estimate of the mass entering the box, with its standard error.
    """
    from .model import apply_T  # local import keeps module order tidy

    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    k = spec.k
    fn = _as_point_function(f)

    axes = [box_lo[i] + (box_hi[i] - box_lo[i]) * (np.arange(quad_per_axis) + 0.5)
            / quad_per_axis for i in range(k)]
    mesh = np.meshgrid(*axes, indexing="ij")
    ypts = np.stack([m.ravel() for m in mesh], axis=-1)
    vol_box = float(np.prod(box_hi - box_lo))
    lhs = float(transfer_theta_batch(f, ypts, theta, spec, geom).mean()) * vol_box

    rng = np.random.Generator(np.random.Philox(key=seed))
    xs = rng.uniform(-1.0, 1.0, size=(n_samples, k)) * geom.omega
    images = apply_T(xs, theta, spec, geom)
    inside = ((images >= box_lo) & (images < box_hi)).all(axis=1)
    integrand = inside * np.asarray(fn(xs), dtype=float) * geom.omega_volume()
    rhs = float(integrand.mean())
    se = float(integrand.std(ddof=1) / math.sqrt(n_samples))
    return {"lhs": lhs, "rhs": rhs, "se": se, "diff": abs(lhs - rhs)}


# ---------------------------------------------------------------------------
# Lasota-Yorke constants


@dataclass(frozen=True)
class LYConstants:
    """Sampled oscillation-inequality constants ``|Pf|_1 <= eta |f|_1 + D ||f||_1``.

    ``K`` is the Jacobian-Lipschitz constant, ``M`` a common bound on the
    first/second differentials and the inverse first partial, ``eta_bar``
    the geometric factor at radius ``eps0``.  All suprema are sampled lower
    bounds of the true suprema.
    """

    eps0: float
    K: float
    M: float
    eta_bar: float
    eta: float
    D: float
    metadata: dict

    def to_dict(self) -> dict:
        return {"eps0": self.eps0, "K": self.K, "M": self.M,
                "eta_bar": self.eta_bar, "eta": self.eta, "D": self.D,
                "metadata": dict(self.metadata)}


def _sup_inverse_shift_norm(spec: ModelSpec, geom: GeometryReport,
                            resolution: int) -> float:
    """Sampled sup of the inverse-differential norm of the unreduced map.

    Equals 1 / (smallest singular value of DS) maximized over a grid of the
    2/3-enlarged box; the expansion property caps it by 1/sqrt(sigma).
    """
    k, gamma = spec.k, spec.gamma
    r = spec.L + 2.0 * spec.beta / 3.0
    axes = [np.linspace(-r * g, r * g, resolution) for g in geom.gscale]
    mesh = np.meshgrid(*axes, indexing="ij")
    us = np.stack([m.ravel() for m in mesh], axis=-1)
    _, grads = expr.dual_batch(spec.phi0, us / geom.gscale)
    n = us.shape[0]
    ds = np.zeros((n, k, k))
    for i in range(k - 1):
        ds[:, i, i + 1] = 1.0 / gamma
    ds[:, k - 1, :] = grads * gamma ** (k - 1 - np.arange(k))
    smin = np.linalg.svd(ds, compute_uv=False)[:, -1]
    return float(1.0 / smin.min())


def _eta_bar_fn(spec: ModelSpec, geom: GeometryReport, M: float) -> Callable[[float], float]:
    k, sigma = spec.k, spec.sigma
    s = math.sqrt(sigma)
    ratio = unit_ball_volume(k - 1) / unit_ball_volume(k)
    coeff = 4.0 * ratio * geom.Y / (s - 1.0)

    def eta_bar(eps0: float) -> float:
        return (1.0 / s + coeff * (1.0 + M * eps0 * (1.0 + 1.0 / s))
                * (1.0 + M * (1.0 - 1.0 / s) * eps0) ** (k - 1))

    return eta_bar


def lasota_yorke_constants(spec: ModelSpec, geom: GeometryReport,
                           eps0: Optional[float] = None,
                           resolution: Optional[int] = None) -> LYConstants:
    """Sample K and M, then tune eps0 until the contraction factor is < 1.

    Starting from the boundary-separation cap, eps0 is bisected downward
    whenever ``eta(eps0) > 1 - 1e-3``; failure to reach the target even at
    1e-12 signals a sigma too close to the crossing threshold.
    """
    if eps0 is None:
        eps0 = geom.eps0
    if eps0 <= 0:
        raise ValueError("eps0 must be positive")
    res = resolution if resolution is not None else geom.resolution
    k, sigma = spec.k, spec.sigma
    r = spec.L + 2.0 * spec.beta / 3.0
    box23 = [(-r, r)] * k
    b23 = expr.sampled_derivative_bounds(spec.phi0, box23, res)

    sup_d1 = math.sqrt(float(b23.grad_sq_max[0]))
    inv_d1 = 1.0 / math.sqrt(float(b23.grad_sq_min[0]))
    sup_ds_inv = _sup_inverse_shift_norm(spec, geom, res)
    K = 2.0 * (sup_d1 * spec.C1 ** (-k + 1) * spec.C2 ** -1 * sigma ** -k
               * b23.grad1_hess_norm_max * spec.gamma ** (-k + 1) * sup_ds_inv)
    M = max(b23.grad_norm_max, b23.hess_norm_max, inv_d1)

    eta_bar = _eta_bar_fn(spec, geom, M)
    s = math.sqrt(sigma)

    def eta_of(e: float) -> float:
        return (1.0 + K * e / s) * eta_bar(e)

    target = 1.0 - 1e-3
    floor = 1e-12
    chosen = eps0
    if eta_of(chosen) > target:
        if eta_of(floor) > target:
            raise TransferError(
                "no eps0 > 1e-12 achieves eta < 1; sigma is too close to the "
                "crossing threshold")
        lo, hi = floor, chosen
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if eta_of(mid) > target:
                hi = mid
            else:
                lo = mid
        chosen = lo

    eb = eta_bar(chosen)
    eta = (1.0 + K * chosen / s) * eb
    D = K * chosen / s + eta
    return LYConstants(
        eps0=chosen, K=K, M=M, eta_bar=eb, eta=eta, D=D,
        metadata={
            "sup_d1_phi0": sup_d1,
            "sup_grad_d1_phi0": b23.grad1_hess_norm_max,
            "sup_inverse_shift_norm": sup_ds_inv,
            "resolution": res,
            "eps0_cap": eps0,
            "note": "suprema sampled on the 2/3-enlarged box; lower bounds of "
                    "the true suprema",
        })
