"""Problem definition and derived geometry.

A model is a k-term stochastic recurrence driven by a nonlinearity phi0 on
a box plus an additive i.i.d. perturbation.  The scalar process embeds into
a k-dimensional box ``Omega`` with anisotropic half-widths ``gamma^(j-1) L``
on which the one-step map ``T_theta`` acts piecewise.  This module derives
the contraction parameter ``gamma``, the admissibility margins for the
slope conditions, the crossing threshold in ``sigma``, the branch-count
bound, and pointwise expansion/boundary diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from . import expr
from .expr import DerivativeBounds, ExprAST


class ModelError(ValueError):
    """Invalid model specification or out-of-domain state."""


# ---------------------------------------------------------------------------
# specification


@dataclass(frozen=True)
class PerturbationSpec:
    """Law of the additive noise.

    ``gaussian`` uses ``mean``/``std`` and is truncated at ``truncation``
    standard deviations (then renormalized) so that quadrature and branch
    windows have compact support.  ``uniform`` uses ``[a, b]``; ``a == b``
    degenerates to a deterministic perturbation (single quadrature node),
    used by the 1-D test modes.
    """

    law: str
    mean: float = 0.0
    std: float = 1.0
    a: float = 0.0
    b: float = 0.0
    truncation: float = 8.0

    def __post_init__(self):
        if self.law not in ("gaussian", "uniform"):
            raise ModelError(f"unknown perturbation law {self.law!r}")
        if self.law == "gaussian" and (self.std <= 0 or self.truncation <= 0):
            raise ModelError("gaussian perturbation requires std > 0 and truncation > 0")
        if self.law == "uniform" and self.b < self.a:
            raise ModelError("uniform perturbation requires a <= b")

    @property
    def degenerate(self) -> bool:
        return self.law == "uniform" and self.a == self.b

    def support(self) -> tuple[float, float]:
        if self.law == "gaussian":
            half = self.truncation * self.std
            return self.mean - half, self.mean + half
        return self.a, self.b

    def density(self, theta: np.ndarray) -> np.ndarray:
        """Renormalized density on the truncated support (0 outside)."""
        th = np.asarray(theta, dtype=float)
        lo, hi = self.support()
        inside = (th >= lo) & (th <= hi)
        if self.law == "gaussian":
            mass = special.erf(self.truncation / math.sqrt(2.0))
            z = (th - self.mean) / self.std
            vals = np.exp(-0.5 * z * z) / (self.std * math.sqrt(2.0 * math.pi) * mass)
        else:
            if self.degenerate:
                raise ModelError("degenerate uniform law has no density")
            vals = np.full_like(th, 1.0 / (self.b - self.a))
        return np.where(inside, vals, 0.0)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF of the (truncated, renormalized) law; u in [0, 1)."""
        uu = np.asarray(u, dtype=float)
        if self.law == "uniform":
            return self.a + (self.b - self.a) * uu
        mass = special.erf(self.truncation / math.sqrt(2.0))
        lower = 0.5 * (1.0 - mass)
        return self.mean + self.std * special.ndtri(lower + mass * uu)

    def cdf(self, t: np.ndarray) -> np.ndarray:
        """CDF of the (truncated, renormalized) law."""
        tt = np.asarray(t, dtype=float)
        if self.law == "uniform":
            if self.degenerate:
                return (tt >= self.a).astype(float)
            return np.clip((tt - self.a) / (self.b - self.a), 0.0, 1.0)
        mass = special.erf(self.truncation / math.sqrt(2.0))
        lower = 0.5 * (1.0 - mass)
        raw = special.ndtr((tt - self.mean) / self.std)
        return np.clip((raw - lower) / mass, 0.0, 1.0)


@dataclass(frozen=True)
class ModelSpec:
    """Full problem definition (recurrence order, box, slope constants)."""

    k: int
    L: float
    beta: float
    phi0: ExprAST
    perturbation: PerturbationSpec
    C1: float
    C2: float
    sigma: float

    def __post_init__(self):
        if self.k < 1:
            raise ModelError("k must be >= 1")
        if self.L <= 0 or self.beta <= 0:
            raise ModelError("L and beta must be positive")
        if self.C1 <= 1 or self.C2 <= 1:
            raise ModelError("C1 and C2 must exceed 1")
        if self.sigma <= 1:
            raise ModelError("sigma must exceed 1")
        if expr.max_var_index(self.phi0) > self.k:
            raise ModelError("phi0 references a variable beyond x%d" % self.k)

    @property
    def gamma(self) -> float:
        return 1.0 / math.sqrt(self.C1 * self.sigma)


# ---------------------------------------------------------------------------
# threshold in sigma


def unit_ball_volume(n: int) -> float:
    """Volume of the n-dimensional unit ball, pi^(n/2) / Gamma(n/2 + 1)."""
    if n < 0:
        raise ValueError("dimension must be >= 0")
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


def eta0(sigma: float, Y: int, k: int) -> float:
    """Geometric admissibility function; must drop below 1 for a usable sigma.

    ``eta0 = 1/sqrt(sigma) + 4 Y vol(B_{k-1}) / ((sqrt(sigma)-1) vol(B_k))``,
    strictly decreasing in sigma on (1, inf).
    """
    if sigma <= 1:
        raise ValueError("sigma must exceed 1")
    s = math.sqrt(sigma)
    ratio = unit_ball_volume(k - 1) / unit_ball_volume(k)
    return 1.0 / s + 4.0 / (s - 1.0) * Y * ratio


def crossing_threshold(Y: int, k: int) -> float:
    """The unique sigma > 1 with ``eta0(sigma, Y, k) == 1`` (bisection).

    In ``s = sqrt(sigma)`` the equation is the quadratic
    ``s^2 - (2 + 4 Y v_{k-1}/v_k) s + 1 = 0``; bisection to 1e-12 relative
    reproduces its larger root without special-casing.
    """
    if Y < 1 or k < 1:
        raise ValueError("Y and k must be >= 1")
    lo, hi = 1.0 + 1e-12, 4.0
    while eta0(hi, Y, k) >= 1.0:
        hi *= 2.0
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if eta0(mid, Y, k) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# derived geometry


@dataclass(frozen=True)
class GeometryReport:
    """gamma, Omega, admissibility margins and derived bounds for a model.

    ``condition_margins`` holds per-condition slack (>= 0 means satisfied):
    ``grad1`` for the first-partial lower bound, ``grad_rest`` for the
    remaining partials' upper bound, ``sigma`` for the crossing threshold.
    ``eps0`` is the boundary-separation cap on the regularity radius; the
    Lasota-Yorke tuning may shrink it further (see ``transfer``).
    """

    gamma: float
    omega: np.ndarray            # per-axis half-widths gamma^(j-1) L
    Y: int
    threshold: float
    eta0_value: float
    condition_margins: dict
    N_bound: int
    M1_phi0: float
    M_Gamma: float
    eps0: float
    ok: bool
    grad1_sign: float
    bounds_wide: DerivativeBounds   # sampled on (-L-beta, L+beta)^k
    bounds_core: DerivativeBounds   # sampled on [-L, L]^k
    resolution: int
    notes: tuple = ()

    @property
    def gscale(self) -> np.ndarray:
        """Per-axis scaling gamma^(j-1); Omega = prod [-gscale_j L, gscale_j L]."""
        k = self.omega.shape[0]
        return self.gamma ** np.arange(k)

    def omega_volume(self) -> float:
        return float(np.prod(2.0 * self.omega))

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "omega_half_widths": self.omega.tolist(),
            "Y": self.Y,
            "threshold": self.threshold,
            "eta0_value": self.eta0_value,
            "condition_margins": dict(self.condition_margins),
            "N_bound": self.N_bound,
            "M1_phi0": self.M1_phi0,
            "M_Gamma": self.M_Gamma,
            "eps0": self.eps0,
            "ok": self.ok,
            "phi_min": self.bounds_core.phi_min,
            "phi_max": self.bounds_core.phi_max,
            "resolution": self.resolution,
            "notes": list(self.notes),
        }


def derive_geometry(spec: ModelSpec, resolution: int = 33) -> GeometryReport:
    """Derive gamma, Omega and check the admissibility conditions by sampling.

    Violations are reported through negative margins and ``ok=False``, not
    exceptions, so diagnostic runs on inadmissible models still work.
    """
    k, L, beta, sigma = spec.k, spec.L, spec.beta, spec.sigma
    gamma = spec.gamma
    wide_box = [(-L - beta, L + beta)] * k
    core_box = [(-L, L)] * k
    bounds_wide = expr.sampled_derivative_bounds(spec.phi0, wide_box, resolution)
    bounds_core = expr.sampled_derivative_bounds(spec.phi0, core_box, resolution)

    Y = k + 2  # worst-case crossing count, independent of theta
    threshold = crossing_threshold(Y, k)
    margins = {
        "grad1": float(bounds_wide.grad_sq_min[0]) - spec.C1 ** (k - 1) * spec.C2 * sigma ** k,
        "grad_rest": math.inf if k == 1 else
            (spec.C1 - 1.0) * (spec.C2 - 1.0) * sigma / (k - 1)
            - float(bounds_wide.grad_sq_max[1:].max()),
        "sigma": sigma - threshold,
    }
    ok = all(m >= 0 for m in margins.values())

    phi_span = bounds_core.phi_max - bounds_core.phi_min
    n_bound = int(math.floor(phi_span / (2.0 * L) + 2.0))
    m_gamma = gamma ** (-(k - 1))
    m1 = bounds_core.grad_norm_max
    eps0 = L / (2.0 * m1 * m_gamma) * (1.0 - 1e-6)

    center = np.zeros(k)
    _, grad_center = expr.evaluate_with_gradient(spec.phi0, center)
    grad1_sign = math.copysign(1.0, grad_center[0]) if grad_center[0] != 0 else 0.0

    return GeometryReport(
        gamma=gamma,
        omega=L * gamma ** np.arange(k),
        Y=Y,
        threshold=threshold,
        eta0_value=eta0(sigma, Y, k),
        condition_margins=margins,
        N_bound=n_bound,
        M1_phi0=m1,
        M_Gamma=m_gamma,
        eps0=eps0,
        ok=ok,
        grad1_sign=grad1_sign,
        bounds_wide=bounds_wide,
        bounds_core=bounds_core,
        resolution=resolution,
        notes=(
            "eps0 enforces only the boundary-separation cap; the chart-overlap "
            "radius is not constructively computable and is omitted",
        ),
    )


# ---------------------------------------------------------------------------
# maps


def branch_index(v, L: float):
    """Index j with ``v - 2 j L`` in [-L, L); floor((v + L) / (2 L))."""
    return np.floor((np.asarray(v, dtype=float) + L) / (2.0 * L)).astype(np.int64)


def reduce_into_band(v, L: float):
    """Reduce v into [-L, L) by subtracting 2 L * branch_index(v, L)."""
    v = np.asarray(v, dtype=float)
    return v - 2.0 * L * branch_index(v, L)


def in_omega(u: np.ndarray, geom: GeometryReport, slack: float = 1e-12) -> np.ndarray:
    """Componentwise membership of points (..., k) in Omega, with slack."""
    uu = np.asarray(u, dtype=float)
    tol = slack * (1.0 + geom.omega)
    return (np.abs(uu) <= geom.omega + tol).all(axis=-1)


def apply_T(u, theta: float, spec: ModelSpec, geom: GeometryReport,
            phi_batch=None) -> np.ndarray:
    """One step of the embedded map: shift-and-rescale plus reduced update.

    Accepts a single point (k,) or a batch (..., k); points must lie in
    Omega.  Points within 1e-14 of a branch boundary are still mapped (the
    half-open reduction picks the branch whose band starts there).
    """
    uu = np.asarray(u, dtype=float)
    single = uu.ndim == 1
    pts = np.atleast_2d(uu)
    if not in_omega(pts, geom).all():
        raise ModelError("point outside Omega")
    if phi_batch is None:
        phi_batch = expr.compile_batch(spec.phi0, spec.k)
    v = phi_batch(pts / geom.gscale) + theta
    last = spec.gamma ** (spec.k - 1) * reduce_into_band(v, spec.L)
    out = np.concatenate([pts[:, 1:] / spec.gamma, last[:, None]], axis=1)
    return out[0] if single else out.reshape(uu.shape)


def apply_S(u, spec: ModelSpec, geom: GeometryReport, phi_batch=None) -> np.ndarray:
    """Auxiliary unreduced map; defined whenever the rescaled point stays in
    the open phi0 domain (-L-beta, L+beta)^k."""
    uu = np.asarray(u, dtype=float)
    single = uu.ndim == 1
    pts = np.atleast_2d(uu)
    x = pts / geom.gscale
    if (np.abs(x) >= spec.L + spec.beta).any():
        raise ModelError("rescaled point outside the phi0 domain")
    if phi_batch is None:
        phi_batch = expr.compile_batch(spec.phi0, spec.k)
    last = spec.gamma ** (spec.k - 1) * phi_batch(x)
    out = np.concatenate([pts[:, 1:] / spec.gamma, last[:, None]], axis=1)
    return out[0] if single else out.reshape(uu.shape)


def boundary_hit(v, L: float, tol: float = 1e-14) -> np.ndarray:
    """True where ``v`` is within tol of a branch boundary (odd multiple of L)."""
    t = (np.asarray(v, dtype=float) + L) / (2.0 * L)
    return np.abs(t - np.round(t)) * 2.0 * L <= tol


# ---------------------------------------------------------------------------
# expansion diagnostics


@dataclass(frozen=True)
class ExpansionDiagnostics:
    """Eigenvalues of the local expansion form at one rescaled point."""

    v1: float
    Vnorm2: float
    lam_minus: float
    lam_plus: float
    gamma_inv_sq: float
    margin: float


def expansion_eigenvalues(x, spec: ModelSpec, geom: GeometryReport) -> ExpansionDiagnostics:
    """Diagnostics at a rescaled point x in (-L-beta, L+beta)^k.

    The expansion form is ``gamma^-2 diag(0, I) + w w^T`` with
    ``w = (gamma^(k-1) d1 phi0, ..., gamma^0 dk phi0)``; its two nontrivial
    eigenvalues are the roots of
    ``X^2 - (gamma^-2 + v1^2 + |V|^2) X + gamma^-2 v1^2``.
    For k = 1 the form is the scalar v1^2.
    """
    xx = np.asarray(x, dtype=float)
    _, grad = expr.evaluate_with_gradient(spec.phi0, xx)
    k, gamma = spec.k, spec.gamma
    scale = gamma ** (k - 1 - np.arange(k))
    w = scale * grad
    v1 = float(w[0])
    vnorm2 = float((w[1:] ** 2).sum())
    ginv2 = gamma ** -2.0
    if k == 1:
        lam_minus = lam_plus = v1 * v1
    else:
        s = ginv2 + v1 * v1 + vnorm2
        disc = math.sqrt(max(s * s - 4.0 * v1 * v1 * ginv2, 0.0))
        lam_minus, lam_plus = 0.5 * (s - disc), 0.5 * (s + disc)
    return ExpansionDiagnostics(
        v1=v1, Vnorm2=vnorm2, lam_minus=lam_minus, lam_plus=lam_plus,
        gamma_inv_sq=ginv2, margin=lam_minus - spec.sigma)


# ---------------------------------------------------------------------------
# branch windows and boundary separation


def branch_window(geom: GeometryReport, L: float, theta: float, pad: int = 1) -> range:
    """Integer indices of possibly nonempty branches for a perturbation value.

    Derived from the sampled range of phi0 on the core box, padded by
    ``pad`` on each side to absorb sampling error.
    """
    lo = math.ceil((theta + geom.bounds_core.phi_min - L) / (2.0 * L)) - pad
    hi = math.floor((theta + geom.bounds_core.phi_max + L) / (2.0 * L)) + pad
    return range(lo, hi + 1)


@dataclass(frozen=True)
class BoundarySeparation:
    """Sampled minimum distance between distinct slanted boundary sheets."""

    min_distance: float
    bound: float
    ok: bool
    vacuous: bool
    n_boundaries: int


def _trace_boundary(spec: ModelSpec, geom: GeometryReport, phi_batch,
                    targets: np.ndarray, trans: np.ndarray) -> list[np.ndarray]:
    """Solve phi0(Gamma u) = target for u1 in [-L, L] over transverse points.

    ``trans`` has shape (M, k-1) in Omega coordinates.  Returns one point
    cloud per target (possibly empty).  Monotone bisection; the slope
    condition guarantees a single root per column.
    """
    L = spec.L
    m = trans.shape[0]
    trans_args = trans / geom.gscale[1:] if spec.k > 1 else np.zeros((m, 0))

    def g(c: np.ndarray) -> np.ndarray:
        return phi_batch(np.concatenate([c[:, None], trans_args], axis=1))

    g_lo = g(np.full(m, -L))
    g_hi = g(np.full(m, L))
    clouds = []
    for t in targets:
        has_root = (g_lo - t) * (g_hi - t) <= 0.0
        idx = np.nonzero(has_root)[0]
        if idx.size == 0:
            clouds.append(np.empty((0, spec.k)))
            continue
        a = np.full(idx.size, -L)
        b = np.full(idx.size, L)
        fa = g_lo[idx] - t
        for _ in range(52):
            mid = 0.5 * (a + b)
            fmid = phi_batch(np.concatenate([mid[:, None], trans_args[idx]], axis=1)) - t
            left = np.sign(fmid) == np.sign(fa)
            a = np.where(left, mid, a)
            fa = np.where(left, fmid, fa)
            b = np.where(left, b, mid)
        roots = 0.5 * (a + b)
        clouds.append(np.column_stack([roots, trans[idx]]))
    return clouds


def boundary_separation(spec: ModelSpec, geom: GeometryReport, theta: float,
                        sampling: int = 17) -> BoundarySeparation:
    """Trace the slanted boundaries for one theta and check their spacing.

    The sheets are sampled on a transverse grid of ``sampling`` points per
    axis; the reported minimum pairwise distance between points on distinct
    sheets must exceed ``2 L / (M1 M_Gamma)``.  With at most one nonempty
    sheet the check is vacuous.
    """
    k, L = spec.k, spec.L
    phi_batch = expr.compile_batch(spec.phi0, spec.k)
    window = branch_window(geom, L, theta)
    targets = np.array([(2 * j - 1) * L - theta for j in window])
    if k == 1:
        trans = np.zeros((1, 0))
    else:
        axes = [np.linspace(-geom.omega[i], geom.omega[i], sampling)
                for i in range(1, k)]
        mesh = np.meshgrid(*axes, indexing="ij")
        trans = np.stack([m.ravel() for m in mesh], axis=-1)
    clouds = _trace_boundary(spec, geom, phi_batch, targets, trans)
    nonempty = [c for c in clouds if c.shape[0] > 0]
    bound = 2.0 * L / (geom.M1_phi0 * geom.M_Gamma)
    if len(nonempty) <= 1:
        return BoundarySeparation(math.inf, bound, True, True, len(nonempty))
    best = math.inf
    for left, right in zip(nonempty[:-1], nonempty[1:]):
        diff = left[:, None, :] - right[None, :, :]
        d = np.sqrt((diff ** 2).sum(axis=-1)).min()
        best = min(best, float(d))
    ok = best >= bound * (1.0 - 1e-9)
    return BoundarySeparation(best, bound, ok, False, len(nonempty))
