"""Free kinetic Fokker-Planck fundamental solutions.

Every kernel handled here is, coordinate by coordinate, a bivariate Gaussian
in ``(x_i, v_i)``::

    K(z; z0) = kappa / (2 pi sqrt(det S)) * exp(-1/2 (z - M z0)^T S^{-1} (z - M z0))

with an affine mean map ``M`` and a 2x2 covariance ``S``.  The forward kernel
``H`` is the transition density of the Langevin process

    dX = V dt,   dV = -beta V dt + sqrt(2 sigma) dW,

so it is a probability density in the target ``(x, v)``.  The backward kernel
``G`` solves ``d_t psi - v.d_x psi + beta v.d_v psi - sigma Lap_v psi = 0`` in
``(x, v, t)``; it equals the same transition density read as a function of the
starting point, which gives ``kappa = exp(beta t)`` per coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from vpfp._quadrature import gauss_legendre_box

__all__ = [
    "ModelParams",
    "PhasePoint",
    "Direction",
    "KernelSpec",
    "CoordCovariance",
    "QuadratureError",
    "SERIES_THRESHOLD",
    "coord_covariance",
    "variance_scalar",
    "mean_map",
    "log_kernel",
    "eval_kernel",
    "grad_v_kernel",
    "grad_v0_kernel",
    "kernel_mass",
    "mass_constants",
    "chapman_kolmogorov_residual",
    "pde_residual",
    "domination_constants",
    "closed_form_quadratic_coefficients",
    "assembled_quadratic_coefficients",
]

# |rate * t| below this switches the covariance entries to their Taylor series.
SERIES_THRESHOLD = 1e-3

# Taylor coefficients in u = rate * t of the normalised covariance entries.
_SERIES_PHI1 = (1.0, -1 / 2, 1 / 6, -1 / 24, 1 / 120, -1 / 720)
_SERIES_VV = (1.0, -1.0, 2 / 3, -1 / 3, 2 / 15, -2 / 45)
_SERIES_XX = (1 / 3, -1 / 4, 7 / 60, -1 / 24, 31 / 2520, -1 / 320)
_SERIES_D = (1 / 12, -1 / 12, 17 / 360, -7 / 360, 43 / 6720, -107 / 60480)


class QuadratureError(RuntimeError):
    """Raised when a quadrature does not reach its requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved {achieved:.3e})")
        self.achieved = achieved


@dataclass(frozen=True)
class ModelParams:
    """Physical configuration: friction, diffusion, dimension and horizon."""

    beta: float = 1.0
    sigma: float = 1.0
    dim: int = 1
    horizon: float = 1.0

    def __post_init__(self):
        for name in ("beta", "sigma", "horizon"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0 (only sigma > 0 is treated)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")


@dataclass(frozen=True)
class PhasePoint:
    """Position and velocity arrays; the last axis has length ``dim``."""

    x: np.ndarray
    v: np.ndarray

    @classmethod
    def of(cls, x, v) -> "PhasePoint":
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if x.ndim == 0:
            x = x[None]
        if v.ndim == 0:
            v = v[None]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("phase point has non-finite components")
        return cls(x, v)


class Direction(str, Enum):
    BACKWARD_G = "BackwardG"
    FORWARD_H = "ForwardH"
    REVERSED_G1 = "ReversedG1"
    REVERSED_G2 = "ReversedG2"


@dataclass(frozen=True)
class KernelSpec:
    direction: Direction
    params: ModelParams

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass(frozen=True)
class CoordCovariance:
    """Per-coordinate Gaussian data of a kernel at elapsed time ``t``.

    ``mean_x`` and ``mean_v`` are the rows of the mean map: the center is
    ``(mean_x . (x0, v0), mean_v . (x0, v0))``.  ``D`` is the scalar with
    ``det == 4 sigma^2 D``; ``kappa`` is the kernel's total mass over the
    target variables.
    """

    mean_x: tuple[float, float]
    mean_v: tuple[float, float]
    Sxx: float
    Sxv: float
    Svv: float
    det: float
    D: float
    kappa: float

    @property
    def mean_matrix(self) -> np.ndarray:
        return np.array([self.mean_x, self.mean_v])

    @property
    def cov(self) -> np.ndarray:
        return np.array([[self.Sxx, self.Sxv], [self.Sxv, self.Svv]])


def _series(coeffs, u):
    return sum(c * u**k for k, c in enumerate(coeffs))


def _ou_blocks(rate: float, sigma: float, t: float):
    """Mean-map and covariance entries of dX = V, dV = -rate V + sqrt(2 sigma) dW."""
    u = rate * t
    if abs(u) < SERIES_THRESHOLD:
        phi1 = t * _series(_SERIES_PHI1, u)
        svv = 2 * sigma * t * _series(_SERIES_VV, u)
        sxx = 2 * sigma * t**3 * _series(_SERIES_XX, u)
        D = t**4 * _series(_SERIES_D, u)
    else:
        # cancellation in sxx and D costs ~1/u^2 digits; longdouble absorbs it
        ul = np.longdouble(u)
        a = -np.expm1(-ul)
        tl = np.longdouble(t)
        phi1 = float(a / ul * tl)
        svv = float(2 * sigma * tl * a * (2 - a) / (2 * ul))
        sxx = float(2 * sigma * tl**3 * (ul - a - a * a / 2) / ul**3)
        D = float(tl**4 * (ul * a * (2 - a) - 2 * a * a) / (2 * ul**4))
    sxv = sigma * phi1 * phi1
    return phi1, math.exp(-u), sxx, sxv, svv, D


def coord_covariance(spec: KernelSpec, t: float) -> CoordCovariance:
    """Gaussian data for elapsed time ``t > 0`` (``t == 0`` gives a zero covariance)."""
    if t < 0:
        raise ValueError("elapsed time must be >= 0")
    beta, sigma = spec.params.beta, spec.params.sigma
    d = spec.direction
    if d in (Direction.FORWARD_H, Direction.REVERSED_G2):
        phi1, e, sxx, sxv, svv, D = _ou_blocks(beta, sigma, t)
        kappa = 1.0 if d is Direction.FORWARD_H else math.exp(-beta * t)
        return CoordCovariance((1.0, phi1), (0.0, e), sxx, sxv, svv, 4 * sigma**2 * D, D, kappa)
    # G_beta(z; z0) = exp(beta t) H_{-beta}(R z; R z0) with R = diag(-1, 1)
    phi1, e, sxx, sxv, svv, D = _ou_blocks(-beta, sigma, t)
    return CoordCovariance((1.0, -phi1), (0.0, e), sxx, -sxv, svv, 4 * sigma**2 * D, D, math.exp(beta * t))


def variance_scalar(spec: KernelSpec, t: float) -> float:
    """The scalar D(t); the per-coordinate covariance determinant is 4 sigma^2 D."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return coord_covariance(spec, t).D


def mean_map(spec: KernelSpec, x0, v0, t: float):
    """Center ``(cx, cv)`` of the kernel so that x_bar = x - cx and v_bar = v - cv."""
    c = coord_covariance(spec, t)
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    return c.mean_x[0] * x0 + c.mean_x[1] * v0, c.mean_v[0] * x0 + c.mean_v[1] * v0


def _elapsed(spec: KernelSpec, t, tau) -> float:
    if not (math.isfinite(t) and math.isfinite(tau)):
        raise ValueError("times must be finite")
    if t <= tau:
        raise ValueError(f"kernel undefined for t <= tau (t={t}, tau={tau})")
    if spec.direction in (Direction.REVERSED_G1, Direction.REVERSED_G2):
        T = spec.params.horizon
        # reversed clock: the kernel at (t, tau) is the forward one at (T - tau, T - t)
        return (T - tau) - (T - t)
    return t - tau


def _as_point(p) -> PhasePoint:
    if isinstance(p, PhasePoint):
        if not (np.all(np.isfinite(p.x)) and np.all(np.isfinite(p.v))):
            raise ValueError("phase point has non-finite components")
        return p
    return PhasePoint.of(*p)


class _Deviation(NamedTuple):
    xb: np.ndarray
    vb: np.ndarray
    cov: CoordCovariance


def _deviation(spec, p, t, p0, tau) -> _Deviation:
    p, p0 = _as_point(p), _as_point(p0)
    c = coord_covariance(spec, _elapsed(spec, t, tau))
    cx, cv = mean_map_from(c, p0.x, p0.v)
    return _Deviation(p.x - cx, p.v - cv, c)


def mean_map_from(c: CoordCovariance, x0, v0):
    return c.mean_x[0] * x0 + c.mean_x[1] * v0, c.mean_v[0] * x0 + c.mean_v[1] * v0


def _quad_form(c: CoordCovariance, xb, vb):
    return (c.Svv * xb * xb - 2 * c.Sxv * xb * vb + c.Sxx * vb * vb) / c.det


def log_kernel(spec: KernelSpec, p, t, p0, tau) -> np.ndarray:
    xb, vb, c = _deviation(spec, p, t, p0, tau)
    q = _quad_form(c, xb, vb)
    lognorm = math.log(c.kappa) - math.log(2 * math.pi) - 0.5 * math.log(c.det)
    return np.sum(lognorm - 0.5 * q, axis=-1)


def eval_kernel(spec: KernelSpec, p, t, p0, tau) -> np.ndarray:
    """Kernel value at target ``p`` and time ``t`` from source ``p0`` at ``tau``."""
    return np.exp(log_kernel(spec, p, t, p0, tau))


def grad_v_kernel(spec: KernelSpec, p, t, p0, tau) -> np.ndarray:
    xb, vb, c = _deviation(spec, p, t, p0, tau)
    k = eval_kernel(spec, p, t, p0, tau)
    return -k[..., None] * (c.Sxx * vb - c.Sxv * xb) / c.det


def grad_v0_kernel(spec: KernelSpec, p, t, p0, tau) -> np.ndarray:
    xb, vb, c = _deviation(spec, p, t, p0, tau)
    k = eval_kernel(spec, p, t, p0, tau)
    gx = (c.Svv * xb - c.Sxv * vb) / c.det
    gv = (c.Sxx * vb - c.Sxv * xb) / c.det
    return k[..., None] * (c.mean_x[1] * gx + c.mean_v[1] * gv)


def _target_frame(c: CoordCovariance, z0):
    """Mean and covariance of the kernel as a density in the target variable."""
    return c.mean_matrix @ z0, c.cov


def _source_frame(c: CoordCovariance, z):
    minv = np.linalg.inv(c.mean_matrix)
    return minv @ z, minv @ c.cov @ minv.T


def _gaussian_box_integral(fn, mean, cov, n, width):
    nodes, weights = gauss_legendre_box(n, width, dim=2)
    evals, evecs = np.linalg.eigh(cov)
    L = evecs * np.sqrt(evals)
    pts = mean[None, :] + nodes @ L.T
    jac = float(np.prod(np.sqrt(evals)))
    return float(np.sum(weights * fn(pts)) * jac)


def kernel_mass(
    spec: KernelSpec,
    t: float,
    tau: float = 0.0,
    integrate_over: str = "Target",
    n_nodes: int = 48,
    width: float = 8.0,
    tol: float = 1e-9,
    anchor=None,
) -> float:
    """Integral of the kernel over the target ``(x, v)`` or the source ``(x0, v0)``.

    Gauss-Legendre on a box of +-``width`` standard deviations in the kernel's
    principal axes.  The kernel is a product over coordinates, so the d-dim
    mass is the one-coordinate mass to the power ``dim``.
    """
    if integrate_over not in ("Target", "Source"):
        raise ValueError("integrate_over must be 'Target' or 'Source'")
    dt = _elapsed(spec, t, tau)
    c = coord_covariance(spec, dt)
    z_anchor = np.zeros(2) if anchor is None else np.asarray(anchor, dtype=float)
    one = KernelSpec(spec.direction, ModelParams(spec.params.beta, spec.params.sigma, 1, spec.params.horizon))

    if integrate_over == "Target":
        mean, cov = _target_frame(c, z_anchor)

        def fn(pts):
            return eval_kernel(one, (pts[:, :1], pts[:, 1:]), t, (z_anchor[:1], z_anchor[1:]), tau)
    else:
        mean, cov = _source_frame(c, z_anchor)

        def fn(pts):
            return eval_kernel(one, (z_anchor[:1], z_anchor[1:]), t, (pts[:, :1], pts[:, 1:]), tau)

    m1 = _gaussian_box_integral(fn, mean, cov, n_nodes, width)
    m2 = _gaussian_box_integral(fn, mean, cov, 2 * n_nodes, width)
    err = abs(m2 - m1) / max(abs(m2), 1e-300)
    if err > tol:
        raise QuadratureError("kernel mass quadrature did not converge", err)
    return m2 ** spec.params.dim


def mass_constants(spec: KernelSpec, times) -> dict[str, float]:
    """Fitted c1 (target mass) and c2 (source mass) as maxima over ``times``."""
    c1 = max(kernel_mass(spec, t, 0.0, "Target") for t in times)
    c2 = max(kernel_mass(spec, t, 0.0, "Source") for t in times)
    return {"c1": c1, "c2": c2}


def chapman_kolmogorov_residual(
    spec: KernelSpec,
    t: float,
    s: float,
    tau: float,
    n_nodes: int = 40,
    width: float = 8.0,
    n_pairs: int = 25,
    seed: int = 7,
    half_argument: bool = False,
) -> float:
    """Max over sampled (p, p0) of |int K(p,t;p1,s) K(p1,s;p0,tau) dp1 - K(p,t;p0,tau)|.

    One coordinate is used (the kernel factorizes).  With ``half_argument`` the
    kernels are evaluated at halved arguments and the reference carries the
    Jacobian 2^2 of the substitution p1 -> p1 / 2.
    """
    if not tau < s < t:
        raise ValueError("need tau < s < t")
    one = KernelSpec(spec.direction, ModelParams(spec.params.beta, spec.params.sigma, 1, spec.params.horizon))
    c_out = coord_covariance(one, _elapsed(one, t, s))
    c_in = coord_covariance(one, _elapsed(one, s, tau))
    c_all = coord_covariance(one, _elapsed(one, t, tau))
    rng = np.random.default_rng(seed)
    scale = 0.5 if half_argument else 1.0
    worst = 0.0
    for _ in range(n_pairs):
        z0 = rng.normal(size=2)
        mu, cov = _target_frame(c_all, z0)
        z = mu + np.linalg.cholesky(cov) @ rng.normal(size=2)
        # integrand in p1 (after halving) is a product of Gaussians; build its frame
        zs, z0s = scale * z, scale * z0
        M, S = c_out.mean_matrix, c_out.cov
        P = M.T @ np.linalg.inv(S) @ M + np.linalg.inv(c_in.cov)
        rhs = M.T @ np.linalg.solve(S, zs) + np.linalg.solve(c_in.cov, c_in.mean_matrix @ z0s)
        mean = np.linalg.solve(P, rhs)
        cov_p = np.linalg.inv(P)
        if half_argument:
            mean, cov_p = mean / scale, cov_p / scale**2

        def fn(pts):
            p1 = scale * pts
            a = eval_kernel(one, (zs[:1], zs[1:]), t, (p1[:, :1], p1[:, 1:]), s)
            b = eval_kernel(one, (p1[:, :1], p1[:, 1:]), s, (z0s[:1], z0s[1:]), tau)
            return a * b

        lhs = _gaussian_box_integral(fn, mean, cov_p, n_nodes, width)
        ref = eval_kernel(one, (zs[:1], zs[1:]), t, (z0s[:1], z0s[1:]), tau)
        if half_argument:
            ref = ref * 4.0
        lhs_fine = _gaussian_box_integral(fn, mean, cov_p, 2 * n_nodes, width)
        if abs(lhs_fine - lhs) > 1e-10 * max(1.0, abs(ref)):
            raise QuadratureError("Chapman-Kolmogorov quadrature truncation dominates", abs(lhs_fine - lhs))
        worst = max(worst, abs(float(lhs) - float(ref)))
    return worst


def pde_residual(spec: KernelSpec, h: float, t: float = 1.0, tau: float = 0.0, n_points: int = 9) -> float:
    """Max residual of the kernel's own PDE by centered differences of spacing ``h``.

    One coordinate.  Sample points sit on a whitened 3x3 pattern around the
    kernel center, one standard deviation apart.
    """
    beta, sigma = spec.params.beta, spec.params.sigma
    one = KernelSpec(spec.direction, ModelParams(beta, sigma, 1, spec.params.horizon))
    z0 = np.array([0.3, -0.2])
    c = coord_covariance(one, _elapsed(one, t, tau))
    mu, cov = _target_frame(c, z0)
    L = np.linalg.cholesky(cov)
    g = np.linspace(-1.0, 1.0, int(round(math.sqrt(n_points))))
    xi = np.array([(a, b) for a in g for b in g])
    pts = mu + xi @ L.T
    x, v = pts[:, :1], pts[:, 1:]
    src = (z0[:1], z0[1:])

    def K(xx, vv, tt):
        return eval_kernel(one, (xx, vv), tt, src, tau)

    k_t = (K(x, v, t + h) - K(x, v, t - h)) / (2 * h)
    k_x = (K(x + h, v, t) - K(x - h, v, t)) / (2 * h)
    k_v = (K(x, v + h, t) - K(x, v - h, t)) / (2 * h)
    k0 = K(x, v, t)
    k_vv = (K(x, v + h, t) - 2 * k0 + K(x, v - h, t)) / h**2
    vs = v[:, 0]
    if spec.direction is Direction.FORWARD_H:
        res = k_t + vs * k_x - beta * (k0 + vs * k_v) - sigma * k_vv
    elif spec.direction is Direction.BACKWARD_G:
        res = k_t - vs * k_x + beta * vs * k_v - sigma * k_vv
    else:
        raise ValueError("pde_residual is defined for BackwardG and ForwardH")
    return float(np.max(np.abs(res)))


def domination_constants(spec: KernelSpec, elapsed_times, n_grid: int = 41, span: float = 6.0) -> dict:
    """Fitted constants of the half-argument domination bounds, per elapsed time.

    ``grad``: sup |d_v K| (t - tau)^{1/2} / K(half arguments).
    ``vbar``: sup |v_bar| K / (t^{1/2} K(half arguments)).
    The sup runs over a whitened grid of +-``span`` standard deviations.
    """
    one = KernelSpec(spec.direction, ModelParams(spec.params.beta, spec.params.sigma, 1, spec.params.horizon))
    z0 = np.array([0.5, -0.25])
    g = np.linspace(-span, span, n_grid)
    xi = np.array([(a, b) for a in g for b in g])
    grad_c, vbar_c = [], []
    for dt in elapsed_times:
        c = coord_covariance(one, dt)
        mu, cov = _target_frame(c, z0)
        pts = mu + xi @ np.linalg.cholesky(cov).T
        p = (pts[:, :1], pts[:, 1:])
        src = (z0[:1], z0[1:])
        half = eval_kernel(one, (pts[:, :1] / 2, pts[:, 1:] / 2), dt, (z0[:1] / 2, z0[1:] / 2), 0.0)
        gv = np.abs(grad_v_kernel(one, p, dt, src, 0.0)[:, 0])
        k = eval_kernel(one, p, dt, src, 0.0)
        vbar = np.abs(pts[:, 1] - mu[1])
        grad_c.append(float(np.max(gv / half)) * math.sqrt(dt))
        vbar_c.append(float(np.max(vbar * k / half)) / math.sqrt(dt))
    return {"times": list(map(float, elapsed_times)), "grad": grad_c, "vbar": vbar_c}


def closed_form_quadratic_coefficients(spec: KernelSpec, t: float) -> tuple[float, float, float]:
    """Coefficients (a, b, c) of exp{-1/(4 sigma D)[a|xb|^2 - b<xb,vb> + c|vb|^2]} in the classical closed form.

    ForwardH uses the forward display, BackwardG the backward one; both are
    written in the mean-map convention of that display.
    """
    b_ = spec.params.beta
    if b_ == 0:
        raise ValueError("closed-form coefficients are singular at beta = 0")
    if spec.direction is Direction.FORWARD_H:
        em, em2 = math.exp(-b_ * t), math.exp(-2 * b_ * t)
        a = (1 - em2) / (2 * b_)
        b = 2 / b_**2 * (1 - em) - 2 / b_**2 * (1 - em2)
        c = t / b_**2 - 2 / b_**2 * (1 - em) + 2 / (2 * b_**3) * (1 - em2)
    elif spec.direction is Direction.BACKWARD_G:
        ep, ep2 = math.exp(b_ * t), math.exp(2 * b_ * t)
        a = (ep2 - 1) / (2 * b_)
        b = (1 - ep) / b_**2 - (1 - ep2) / (2 * b_**2)
        c = t / b_**2 + 2 / b_**3 * (1 - ep) - (1 - ep2) / (2 * b_**3)
    else:
        raise ValueError("closed-form coefficients exist for BackwardG and ForwardH only")
    return a, b, c


def assembled_quadratic_coefficients(spec: KernelSpec, t: float) -> tuple[float, float, float]:
    """The same (a, b, c) recovered from the assembled covariance.

    For BackwardG the closed-form position center is the mirror image of ours
    (x -> -x), which flips the sign of the cross term; that is undone here.
    """
    c = coord_covariance(spec, t)
    s = spec.params.sigma
    cross = c.Sxv / s if spec.direction is Direction.FORWARD_H else -c.Sxv / s
    return c.Svv / (2 * s), cross, c.Sxx / (2 * s)
