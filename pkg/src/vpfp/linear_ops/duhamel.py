"""Phase-space grids, field samplers and the free Duhamel operator T."""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .._quadrature import gauss_hermite_2d, gauss_legendre
from ..grids import GridError, PhaseGrid
from ..kernel_core import Direction, KernelSpec, ModelParams, coord_covariance


@dataclass(frozen=True)
class GridFunction:
    """Samples of a phase-time function on ``times x grid``; zero outside the grid."""

    grid: PhaseGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (times.size,) + self.grid.shape:
            raise GridError(f"values shape {values.shape} does not match {(times.size,) + self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("sampled values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, t, x, v):
        x, v = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float))
        t = np.broadcast_to(np.asarray(t, float), x.shape[:-1])
        axes = (self.times,) + (self.grid.x,) * self.grid.dim + (self.grid.v,) * self.grid.dim
        method = "cubic" if min(len(a) for a in axes) >= 4 else "linear"
        interp = RegularGridInterpolator(axes, self.values, method=method, bounds_error=False, fill_value=0.0)
        pts = np.concatenate([t[..., None], x, v], axis=-1)
        return interp(pts.reshape(-1, pts.shape[-1])).reshape(x.shape[:-1])


@dataclass(frozen=True)
class FieldSampler:
    """A force field ``E(t, x)`` with the blow-up metadata ``|E(t)| <= C t^-mu``."""

    evaluator: Callable
    mu: float = 0.0
    bound_constant: float | None = None
    name: str = "field"

    def __post_init__(self):
        if not (self.mu >= 0):
            raise ValueError("mu must be >= 0")

    def __call__(self, t, x):
        out = np.asarray(self.evaluator(t, x), dtype=float)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"field {self.name} is not finite at t={t}")
        return out

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def fit_bound(self, times, xs) -> float:
        """Smallest C with ``max_x |E(t, x)| <= C t^-mu`` on the samples."""
        xs = np.asarray(xs, dtype=float)
        return float(max(np.abs(self(t, xs)).max() * t**self.mu for t in times))

    @classmethod
    def zero(cls):
        return cls(lambda t, x: np.zeros(np.shape(x)), 0.0, 0.0, name="zero")

    @classmethod
    def constant(cls, value: float):
        return cls(lambda t, x: np.full(np.shape(x), float(value)), 0.0, abs(value), name=f"constant({value})")


@dataclass(frozen=True)
class WeightedKernelNorm:
    """Exponents of the weighted sup-norms ``(t-tau)^a |g| / G_half`` and ``(t-tau)^b |dv g| / G_half``."""

    a: float = 1 / 5
    b: float = 7 / 10
    reference: KernelSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (0 <= self.a < 1):
            raise ValueError("need 0 <= a < 1")
        if not (0 < self.b < 1):
            raise ValueError("need 0 < b < 1")


def _base_direction(spec: KernelSpec):
    if spec.direction not in (Direction.FORWARD_H, Direction.BACKWARD_G):
        raise ValueError(f"operator needs a ForwardH or BackwardG kernel, got {spec.direction.value}")
    return spec.direction


def source_frame(spec: KernelSpec, elapsed: float):
    """Per-coordinate data of the kernel as a Gaussian in its source variable.

    Returns ``(Minv, chol, mass, score)``: the source mean is ``Minv @ z``,
    ``chol`` is a Cholesky factor of the source covariance, ``mass`` the
    source mass and ``score`` maps a standard node ``zeta`` to
    ``-d/dz log K`` for the target variables.
    """
    c = coord_covariance(spec, elapsed)
    M, S = c.mean_matrix, c.cov
    Minv = np.linalg.inv(M)
    Q = Minv @ S @ Minv.T
    L = np.linalg.cholesky(0.5 * (Q + Q.T))
    mass = c.kappa / abs(np.linalg.det(M))
    # z - M z0 = -M L zeta, so d_z K = K S^{-1} M L zeta
    score = np.linalg.solve(S, M @ L)
    return Minv, L, mass, score


def _as_points(points):
    if isinstance(points, PhaseGrid):
        return points.points()
    x, v = points
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.broadcast_arrays(x, v)


def apply_T(
    f,
    spec: KernelSpec,
    t: float,
    points,
    *,
    derivative: bool = False,
    n_time: int = 24,
    n_gh: int = 10,
    max_gh: int = 80,
    rtol: float = 1e-9,
    atol: float = 1e-300,
):
    """Duhamel integral ``int_0^t int K(z, t - tau; z0) f(z0, tau) dz0 dtau`` at ``points``.

    ``f`` is a callable ``f(tau, x, v)`` or a :class:`GridFunction`;
    ``points`` is a :class:`PhaseGrid` or an ``(x, v)`` pair with last axis
    ``dim``.  With ``derivative`` the velocity gradient is returned with an
    extra trailing axis of length ``dim``.

    The source integral uses Gauss-Hermite nodes in the kernel's own
    Gaussian frame; the time integral uses ``tau = t (1 - y^2)`` so the
    ``(t - tau)^(-1/2)`` behaviour of the gradient becomes smooth.
    """
    _base_direction(spec)
    p = spec.params
    if not (0 < t <= p.horizon * (1 + 1e-12)):
        raise ValueError(f"t={t} outside (0, horizon={p.horizon}]")
    X, V = _as_points(points)
    d = p.dim
    if X.shape[-1] != d:
        raise GridError(f"points have {X.shape[-1]} coordinates, kernel has dim {d}")
    if isinstance(f, GridFunction):
        if isinstance(points, PhaseGrid) and not f.grid.contains(points):
            raise GridError("output grid extends beyond the sampled data")
        if t > f.times[-1] + 1e-12:
            raise GridError(f"t={t} beyond sampled times")

    y, wy = gauss_legendre(n_time, 0.0, 1.0)
    z = np.stack([X, V], axis=-1)  # (..., d, 2)
    out = np.zeros(X.shape[:-1] + ((d,) if derivative else ()))
    for yk, wk in zip(y, wy):
        elapsed = t * yk * yk
        frame = source_frame(spec, elapsed)
        jac = 2.0 * t * yk * wk * frame[2] ** d
        # wide kernels need more nodes to resolve f: double until two orders agree
        n, prev = n_gh, None
        while True:
            cur = _source_expectation(f, t - elapsed, z, frame, n, derivative)
            if prev is not None:
                scale = max(np.abs(cur).max(), atol)
                if np.abs(cur - prev).max() <= rtol * scale or n >= max_gh:
                    break
            prev, n = cur, 2 * n
        out += jac * cur
    return out


def _source_expectation(f, tau, z, frame, n, derivative):
    Minv, L, _, score = frame
    d = z.shape[-2]
    zeta, wz = gauss_hermite_2d(n)
    # tensor nodes over coordinates: index tuples into the 2D node set
    idx = np.stack(np.meshgrid(*([np.arange(zeta.shape[0])] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(wz[idx], axis=-1)
    z0 = (z @ Minv.T)[..., None, :, :] + zeta[idx] @ L.T
    vals = f(tau, z0[..., 0], z0[..., 1])
    if derivative:
        sv = zeta[idx] @ score[1]  # (n, d): d/dv_i log K at each node
        return np.einsum("...n,n,nd->...d", vals, wts, sv)
    return vals @ wts


def energy_identity_residual(eta, grid: PhaseGrid, times, params: ModelParams, coeffs=None):
    """Residual of ``1/2 d/dt |eta|^2 + c_beta |eta|^2 + c_sigma |dv eta|^2`` at interior time levels.

    ``eta`` has shape ``(n_t,) + grid.shape`` on equally spaced ``times``.
    The default coefficients are ``(-dim beta / 2, sigma)``; a centered time
    difference and centered velocity differences are used.
    """
    eta = np.asarray(eta, dtype=float)
    times = np.asarray(times, dtype=float)
    if eta.shape[0] < 3 or times.size != eta.shape[0]:
        raise ValueError("need at least 3 time levels matching the samples")
    if eta.shape[1:] != grid.shape:
        raise GridError(f"eta shape {eta.shape[1:]} does not match grid {grid.shape}")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9):
        raise GridError("time levels must be equally spaced")
    dt = dts[0]
    d = grid.dim
    c_beta, c_sigma = coeffs if coeffs is not None else (-d * params.beta / 2, params.sigma)
    vol = grid.cell_volume
    sq = (eta**2).reshape(eta.shape[0], -1).sum(axis=1) * vol
    grad_sq = np.zeros(eta.shape[0])
    for i in range(d):
        dv = np.gradient(eta, grid.hv, axis=1 + d + i, edge_order=2)
        grad_sq += (dv**2).reshape(eta.shape[0], -1).sum(axis=1) * vol
    ddt = (sq[2:] - sq[:-2]) / (2 * dt)
    return 0.5 * ddt + c_beta * sq[1:-1] + c_sigma * grad_sq[1:-1]
