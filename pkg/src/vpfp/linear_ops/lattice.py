"""Perturbed kernels for a continuum of sources: lattice interpolation, composition and T2."""

from dataclasses import dataclass

import numpy as np

from .._quadrature import gauss_hermite_2d, gauss_legendre
from ..kernel_core import KernelSpec
from ._cheb import bary_matrix, lobatto
from .duhamel import FieldSampler, GridError, WeightedKernelNorm, _as_points, apply_T, source_frame
from .propagator import (
    PropagatorTable,
    TableLayout,
    bridge,
    build_gamma,
    kernel_frame,
)


@dataclass(frozen=True)
class SourceLattice:
    """Tensor Lobatto grid of source points ``center + axes @ q`` with ``q`` in ``[-1, 1]^2``."""

    center: np.ndarray
    axes: np.ndarray
    n: int = 5

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(2)
        A = np.asarray(self.axes, dtype=float).reshape(2, 2)
        if self.n < 1:
            raise ValueError("lattice needs at least one node per axis")
        if self.n > 1 and abs(np.linalg.det(A)) == 0:
            raise ValueError("lattice axes are degenerate")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", A)

    @classmethod
    def rect(cls, x_lim, v_lim, n=5):
        c = [0.5 * (x_lim[0] + x_lim[1]), 0.5 * (v_lim[0] + v_lim[1])]
        return cls(c, np.diag([0.5 * (x_lim[1] - x_lim[0]), 0.5 * (v_lim[1] - v_lim[0])]), n)

    @property
    def size(self):
        return self.n * self.n

    def nodes(self):
        if self.n == 1:
            return self.center[None, :]
        q = lobatto(self.n)[0]
        Q = np.stack(np.meshgrid(q, q, indexing="ij"), axis=-1).reshape(-1, 2)
        return self.center + Q @ self.axes.T

    def weights(self, z0):
        """Interpolation weights ``(..., size)``; mild extrapolation past the lattice."""
        z0 = np.asarray(z0, dtype=float)
        if self.n == 1:
            return np.ones(z0.shape[:-1] + (1,))
        q = np.clip((z0 - self.center) @ np.linalg.inv(self.axes).T, -1.5, 1.5)
        xn, xw = lobatto(self.n)
        Wa = bary_matrix(xn, xw, q[..., 0])
        Wb = bary_matrix(xn, xw, q[..., 1])
        return (Wa[..., :, None] * Wb[..., None, :]).reshape(z0.shape[:-1] + (self.size,))


@dataclass(frozen=True)
class LatticeGamma:
    """A table whose sources are ``taus x lattice.nodes()`` (tau-major) with one end time."""

    table: PropagatorTable
    lattice: SourceLattice
    taus: np.ndarray
    tau_weights: np.ndarray | None = None

    def _block(self, j):
        m = self.lattice.size
        return range(j * m, (j + 1) * m)

    def ratio(self, j, t, xi, z0):
        """``Gamma / K - 1`` for sources at ``taus[j]`` and ``z0`` seen at whitened targets ``xi``."""
        tab = self.table
        block = self._block(j)
        ip = tab.source_map(block[0]).interp
        tau = self.taus[j]
        t_end = tab.t_end[block[0]]
        if not (tau < t <= t_end * (1 + 1e-12)):
            raise GridError(f"t={t} outside ({tau}, {t_end}] for lattice slice {j}")
        w = np.sqrt(t - tau)
        R = np.array([ip.at_time(tab.r[i], w) for i in block])
        Wx, Wv = ip.weights(np.asarray(xi, dtype=float))
        vals = np.einsum("...a,sab,...b->...s", Wx, R, Wv, optimize=True)
        return np.sum(vals * self.lattice.weights(z0), axis=-1)


def build_lattice_gamma(
    spec: KernelSpec,
    E: FieldSampler,
    lattice: SourceLattice,
    taus,
    t_end: float,
    *,
    tau_weights=None,
    norm: WeightedKernelNorm = WeightedKernelNorm(),
    tol: float = 1e-9,
    max_iter: int = 40,
    layout: TableLayout = TableLayout(),
    jobs: int = 1,
) -> LatticeGamma:
    """Converged perturbed kernel for every lattice source at every ``tau``; fails loudly otherwise."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    nodes = lattice.nodes()
    sources = np.array([(x0, v0, tau) for tau in taus for x0, v0 in nodes])
    table = build_gamma(spec, E, norm, sources, t_end, tol, max_iter, layout, jobs, max_depth=0)
    if not table.converged:
        raise RuntimeError(f"Picard iteration did not converge; step ratios {table.ratios.tolist()}")
    return LatticeGamma(table, lattice, taus, None if tau_weights is None else np.asarray(tau_weights, float))


def compose_gamma(first: PropagatorTable, second: LatticeGamma, t: float, n_gh: int = 8):
    """Ratio to the free kernel of ``int Gamma_2(z, t; z1, s) Gamma_1(z1, s; z0, tau) dz1``.

    ``first`` holds the single source ``(z0, tau)`` up to ``s``; ``second`` holds
    sources at ``s``.  The result is sampled on the whitened grid of
    ``first.layout`` at elapsed ``t - tau``.
    """
    if first.n_sources != 1 or second.taus.size != 1:
        raise ValueError("composition needs one source in the first table and one time slice in the second")
    x0, v0, tau = first.sources[0]
    s = float(first.t_end[0])
    if not np.isclose(second.taus[0], s):
        raise ValueError(f"second table starts at {second.taus[0]}, first ends at {s}")
    spec = first.spec
    m1 = first.source_map(0)
    ft = kernel_frame(spec, t - tau)
    zeta, w = gauss_hermite_2d(n_gh)
    U, e, _, fb = bridge(spec, tau, s, t, ft, m1.XI, zeta)
    z1 = (fb.M @ m1.z0) + U @ fb.L.T
    R1 = m1.interp.at_time(first.r[0], np.sqrt(s - tau))
    Wx, Wv = m1.interp.weights(U)
    r1 = m1.interp.apply(Wx, R1, Wv)
    r2 = second.ratio(0, t, e, z1)
    N = first.layout.n_xi
    return (((1.0 + r1) * (1.0 + r2)) @ w - 1.0).reshape(N, N)


def t2_lattice(spec, E, lattice, t, n_time=6, **kw) -> LatticeGamma:
    """Lattice kernel with source times at the Gauss nodes used by :func:`apply_T2` at time ``t``."""
    y, wy = gauss_legendre(n_time, 0.0, 1.0)
    taus = t * (1.0 - y**2)
    return build_lattice_gamma(spec, E, lattice, taus, t, tau_weights=2.0 * t * y * wy, **kw)


def apply_T2(f, gamma: LatticeGamma, t: float, points, *, n_gh: int = 8, n_time: int = 24):
    """``int_0^t int Gamma(z, t; z0, tau) f(z0, tau) dz0 dtau`` at ``points``.

    The free part is the Duhamel integral of :func:`apply_T`; the perturbation
    ``K r`` is integrated on the source times of the lattice kernel, which
    must come from :func:`t2_lattice` for the same ``t``.
    """
    if gamma.tau_weights is None:
        raise ValueError("lattice kernel has no time-quadrature weights; build it with t2_lattice")
    tab = gamma.table
    spec = tab.spec
    if not np.allclose(tab.t_end, t):
        raise GridError(f"lattice kernel ends at {tab.t_end[0]}, requested t={t}")
    X, V = _as_points(points)
    if X.shape[-1] != 1:
        raise GridError("T2 is available at dim = 1 only")
    free = apply_T(f, spec, t, (X, V), n_time=n_time)
    z = np.stack([X[..., 0], V[..., 0]], axis=-1)
    zeta, wz = gauss_hermite_2d(n_gh)
    out = np.zeros(z.shape[:-1])
    for j, (tau, jac) in enumerate(zip(gamma.taus, gamma.tau_weights)):
        el = t - tau
        Minv, L, mass, _ = source_frame(spec, el)
        ft = kernel_frame(spec, el)
        z0 = (z @ Minv.T)[..., None, :] + zeta @ L.T
        # whitened target offset of every source node; the same for all targets
        xi = -(zeta @ (ft.Linv @ ft.M @ L).T)
        xi = np.broadcast_to(xi, z0.shape)
        r = gamma.ratio(j, t, xi, z0)
        vals = f(tau, z0[..., 0:1], z0[..., 1:2])
        out += jac * mass * ((vals * r) @ wz)
    return free + out


def source_gradient_ratio(
    spec: KernelSpec,
    E: FieldSampler,
    source,
    t_end: float,
    *,
    h: float = 1e-3,
    norm: WeightedKernelNorm = WeightedKernelNorm(),
    layout: TableLayout = TableLayout(),
    tol: float = 1e-10,
    jobs: int = 1,
) -> float:
    """``sup (t - tau)^b |d_v0 Gamma| / G(half)`` by a centered difference in the source velocity."""
    x0, v0, tau = (float(c) for c in source)
    pair = [(x0, v0 + h, tau), (x0, v0 - h, tau)]
    table = build_gamma(spec, E, norm, pair, t_end, tol, layout=layout, jobs=jobs, max_depth=0)
    if not table.converged:
        raise RuntimeError(f"Picard iteration did not converge; step ratios {table.ratios.tolist()}")
    m = table.source_map(0)
    XI = m.XI
    weight = np.exp(-0.375 * (XI**2).sum(axis=1))
    z0 = np.array([x0, v0])
    worst = 0.0
    for t in m.levels:
        f = kernel_frame(spec, t - tau)
        z = f.M @ z0 + XI @ f.L.T
        G = f.kappa / (2 * np.pi * f.L[0, 0] * f.L[1, 1]) * np.exp(-0.5 * (XI**2).sum(axis=1))
        d = (table.evaluate(0, z[:, 0], z[:, 1], t) - table.evaluate(1, z[:, 0], z[:, 1], t)) / (2 * h)
        worst = max(worst, float(((t - tau) ** norm.b * np.abs(d) / G * weight).max()))
    return worst
