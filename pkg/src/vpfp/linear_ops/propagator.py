"""Field-perturbed fundamental solutions built by Picard iteration.

A table stores, for every source ``(x0, v0, tau)``, the ratio
``r = Gamma / K - 1`` where ``K`` is the free kernel.  ``r`` lives on a
Chebyshev-Lobatto grid in the whitened target coordinates
``xi = L^-1 (z - M z0)`` (``M`` the mean map, ``L L^T`` the covariance at
elapsed ``t - tau``) and on Lobatto levels in ``w = sqrt(t - tau)``.  The
Duhamel integral of one Picard step is an expectation under the Gaussian
bridge between the two kernel factors, evaluated with Gauss-Hermite nodes;
the time integral uses ``s = tau + (t - tau) sin^2(theta)``, which removes
both endpoint singularities.

The perturbed equations are ``d_t psi = L psi + E d_v psi`` for the backward
kernel and ``d_t f + v d_x f + E d_v f = ...`` for the forward kernel, so the
Duhamel correction enters with sign -1 and +1 respectively.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .._binio import read_blob, write_blob
from .._quadrature import gauss_hermite_2d, gauss_legendre
from ..kernel_core import Direction, KernelSpec, ModelParams, coord_covariance
from ._cheb import bary_matrix, diff_matrix, lobatto
from .duhamel import FieldSampler, GridError, WeightedKernelNorm

DUHAMEL_SIGN = {Direction.BACKWARD_G: -1.0, Direction.FORWARD_H: 1.0}
MAGIC = "VPFP-GAMMA-TABLE 1"


@dataclass(frozen=True)
class TableLayout:
    n_xi: int = 20
    box: float = 6.0
    n_levels: int = 9
    n_theta: int = 16
    n_gh: int = 4

    def __post_init__(self):
        if self.n_xi < 4 or self.n_levels < 3 or self.n_theta < 2 or self.n_gh < 2:
            raise ValueError(f"layout too small: {self}")
        if self.box <= 0:
            raise ValueError("box must be positive")

    @property
    def xi(self):
        return self.box * lobatto(self.n_xi)[0]

    def refined(self) -> "TableLayout":
        """Layout whose phase grid nests the current one with half the spacing."""
        return replace(self, n_xi=2 * self.n_xi - 1)


class Frame(NamedTuple):
    M: np.ndarray
    L: np.ndarray
    Linv: np.ndarray
    kappa: float


def kernel_frame(spec: KernelSpec, elapsed: float) -> Frame:
    """Mean map and a Cholesky factor built from the accurately computed determinant."""
    c = coord_covariance(spec, elapsed)
    l11 = np.sqrt(c.Sxx)
    l21 = c.Sxv / l11
    l22 = np.sqrt(c.det) / l11
    L = np.array([[l11, 0.0], [l21, l22]])
    Linv = np.array([[1.0 / l11, 0.0], [-l21 / (l11 * l22), 1.0 / l22]])
    return Frame(c.mean_matrix, L, Linv, c.kappa)


class _Interp:
    """Evaluates a stored ratio field at whitened points and at any time level."""

    def __init__(self, layout: TableLayout, W: float):
        self.layout = layout
        xn, xw = lobatto(layout.n_xi)
        self.xn, self.xw = xn, xw
        self.D = diff_matrix(layout.n_xi) / layout.box
        wn, ww = lobatto(layout.n_levels)
        self.wnodes = 0.5 * W * (wn + 1.0)
        self.ww = ww

    def at_time(self, r_levels, w):
        """Time-interpolated grid values; level 0 (w = 0) is identically zero."""
        Tw = bary_matrix(self.wnodes, self.ww, w)[1:]
        return np.tensordot(Tw, r_levels, axes=1)

    def weights(self, U):
        # polynomial extrapolation a little past the box; bridge nodes of edge points land there
        u = np.clip(U / self.layout.box, -1.5, 1.5)
        return bary_matrix(self.xn, self.xw, u[..., 0]), bary_matrix(self.xn, self.xw, u[..., 1])

    @staticmethod
    def apply(Wx, R, Wv):
        return np.einsum("...a,...a->...", Wx @ R, Wv)


def bridge(spec: KernelSpec, tau: float, s: float, t: float, ft: Frame, XI, zeta):
    """Gauss-Hermite nodes of the product ``K(z, t; z1, s) K(z1, s; z0, tau)`` as a measure in ``z1``.

    ``XI`` are whitened targets at elapsed ``t - tau`` (frame ``ft``).  Returns
    the intermediate points ``U`` whitened at elapsed ``s - tau``, the
    whitened offsets ``e`` of the targets seen from each ``z1`` (so
    ``e = Linv_a (z - M_a z1)``) and the two factor frames.
    """
    fa = kernel_frame(spec, t - s)
    fb = kernel_frame(spec, s - tau)
    B = fa.Linv @ fa.M @ fb.L
    Y = XI @ (fa.Linv @ ft.L).T
    BtB, BBt = B.T @ B, B @ B.T
    det = 1.0 + np.trace(BtB) + np.linalg.det(B) ** 2
    Sig = np.array([[1 + BtB[1, 1], -BtB[0, 1]], [-BtB[0, 1], 1 + BtB[0, 0]]]) / det
    l11 = np.sqrt(Sig[0, 0])
    Ls = np.array([[l11, 0.0], [Sig[0, 1] / l11, np.sqrt(1.0 / det) / l11]])
    # residual y - B u for the bridge mean, via (I + B B^T)^-1 y without cancellation
    Einv = np.array([[1 + BBt[1, 1], -BBt[0, 1]], [-BBt[0, 1], 1 + BBt[0, 0]]]) / det
    U = (Y @ (Sig @ B.T).T)[:, None, :] + zeta @ Ls.T
    e = (Y @ Einv.T)[:, None, :] - zeta @ (B @ Ls).T
    return U, e, fa, fb


class _SourceMap:
    """The Picard map for a single source, in both integral forms."""

    def __init__(self, spec: KernelSpec, x0: float, v0: float, tau: float, t_end: float, layout: TableLayout):
        if not (t_end > tau):
            raise ValueError(f"t_end={t_end} must exceed tau={tau}")
        self.spec, self.layout = spec, layout
        self.z0 = np.array([x0, v0], dtype=float)
        self.tau, self.t_end = float(tau), float(t_end)
        self.sign = DUHAMEL_SIGN[spec.direction]
        W = np.sqrt(t_end - tau)
        self.interp = _Interp(layout, W)
        self.levels = tau + self.interp.wnodes[1:] ** 2
        self.frames = [kernel_frame(spec, t - tau) for t in self.levels]
        xi = layout.xi
        XI = np.stack(np.meshgrid(xi, xi, indexing="ij"), axis=-1)
        self.XI = XI.reshape(-1, 2)
        self.theta, self.wtheta = gauss_legendre(layout.n_theta, 0.0, 0.5 * np.pi)
        self.zeta, self.wz = gauss_hermite_2d(layout.n_gh)

    def _bridge(self, k: int, s: float):
        """Nodes of the bridge measure for every grid point of level ``k`` at intermediate time ``s``."""
        U, e, fa, fb = bridge(self.spec, self.tau, s, self.levels[k], self.frames[k], self.XI, self.zeta)
        gv = e @ (fa.M.T @ fa.Linv.T)[1]
        x1 = (fb.M @ self.z0)[0] + U @ fb.L[0]
        return U, gv, x1, fb

    def apply(self, r_levels, E: FieldSampler, form: str = "A"):
        """One application of the Picard map to ``r_levels`` (shape ``(K-1, N, N)``)."""
        N = self.layout.n_xi
        out = np.zeros_like(r_levels)
        ip = self.interp
        for k, t in enumerate(self.levels):
            el = t - self.tau
            acc = np.zeros(N * N)
            for th, wt in zip(self.theta, self.wtheta):
                s = self.tau + el * np.sin(th) ** 2
                U, gv, x1, fb = self._bridge(k, s)
                try:
                    Ev = E(s, x1)
                except ValueError as err:
                    raise ValueError(f"time quadrature failed at s={s:.6g} for (tau, t) = ({self.tau:.6g}, {t:.6g}): {err}") from err
                R = ip.at_time(r_levels, np.sqrt(s - self.tau))
                Wx, Wv = ip.weights(U)
                rv = ip.apply(Wx, R, Wv)
                if form == "A":
                    integrand = gv * Ev * (1.0 + rv)
                else:
                    li = fb.Linv[1, 1]
                    drv = ip.apply(Wx, R @ ip.D.T, Wv)
                    dlog = -(U[..., 1] * li)
                    integrand = -Ev * (dlog * (1.0 + rv) + li * drv)
                acc += el * np.sin(2 * th) * wt * (integrand @ self.wz)
            out[k] = self.sign * acc.reshape(N, N)
        return out


def _x_parts(r_levels, levels, tau, frames, layout: TableLayout, norm: WeightedKernelNorm, include_one=False):
    """Sup over the table of the two weighted ratios against the half-argument kernel."""
    xi = layout.xi
    XX, XV = np.meshgrid(xi, xi, indexing="ij")
    weight = np.exp(-0.375 * (XX**2 + XV**2))
    D = diff_matrix(layout.n_xi) / layout.box
    x1 = x2 = 0.0
    for k, t in enumerate(levels):
        el = t - tau
        g = r_levels[k] + (1.0 if include_one else 0.0)
        li = frames[k].Linv[1, 1]
        dv = li * (g @ D.T - XV * g)
        x1 = max(x1, float((el**norm.a * np.abs(g) * weight).max()))
        x2 = max(x2, float((el**norm.b * np.abs(dv) * weight).max()))
    return x1, x2


@dataclass(frozen=True)
class PropagatorTable:
    """Converged (or partial) perturbed kernel for a set of sources; immutable."""

    spec: KernelSpec
    layout: TableLayout
    norm: WeightedKernelNorm
    sources: np.ndarray
    t_end: np.ndarray
    r: np.ndarray
    iteration_history: tuple = ()
    converged: bool = False
    field_name: str = ""
    field_mu: float = 0.0
    split_depth: int = 0
    tol: float = 0.0
    _maps: list = field(default=None, repr=False, compare=False)

    @property
    def n_sources(self):
        return self.sources.shape[0]

    @property
    def ratios(self):
        h = np.asarray(self.iteration_history, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return h[1:] / h[:-1]

    def source_map(self, i) -> _SourceMap:
        if self._maps is None:
            object.__setattr__(self, "_maps", [None] * self.n_sources)
        if self._maps[i] is None:
            x0, v0, tau = self.sources[i]
            self._maps[i] = _SourceMap(self.spec, x0, v0, tau, self.t_end[i], self.layout)
        return self._maps[i]

    def levels(self, i):
        return self.source_map(i).levels

    def grid_points(self, i, k):
        """Phase points ``(x, v)`` (each ``(N, N)``) of level ``k`` of source ``i``."""
        m = self.source_map(i)
        f = m.frames[k]
        z = (f.M @ m.z0) + m.XI @ f.L.T
        N = self.layout.n_xi
        return z[:, 0].reshape(N, N), z[:, 1].reshape(N, N)

    def _free(self, i, k):
        f = self.source_map(i).frames[k]
        xi = self.layout.xi
        XX, XV = np.meshgrid(xi, xi, indexing="ij")
        return f.kappa / (2 * np.pi * f.L[0, 0] * f.L[1, 1]) * np.exp(-0.5 * (XX**2 + XV**2)), XV, f

    @property
    def values(self):
        out = np.empty_like(self.r)
        for i in range(self.n_sources):
            for k in range(self.r.shape[1]):
                K, _, _ = self._free(i, k)
                out[i, k] = K * (1.0 + self.r[i, k])
        return out

    @property
    def grad_values(self):
        D = diff_matrix(self.layout.n_xi) / self.layout.box
        out = np.empty_like(self.r)
        for i in range(self.n_sources):
            for k in range(self.r.shape[1]):
                K, XV, f = self._free(i, k)
                g = 1.0 + self.r[i, k]
                out[i, k] = K * f.Linv[1, 1] * (self.r[i, k] @ D.T - XV * g)
        return out

    def ratio_at(self, i, x, v, t):
        """``Gamma / K - 1`` for source ``i`` at arbitrary target points and time."""
        m = self.source_map(i)
        tau = m.tau
        if not (tau < t <= m.t_end * (1 + 1e-12)):
            raise GridError(f"t={t} outside ({tau}, {m.t_end}] for source {i}")
        f = kernel_frame(self.spec, t - tau)
        z = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float)), axis=-1)
        U = (z - f.M @ m.z0) @ f.Linv.T
        R = m.interp.at_time(self.r[i], np.sqrt(t - tau))
        Wx, Wv = m.interp.weights(U)
        return m.interp.apply(Wx, R, Wv), f, U

    def evaluate(self, i, x, v, t):
        """Gamma for source ``i`` at target points ``(x, v)`` and time ``t``."""
        rv, f, U = self.ratio_at(i, x, v, t)
        K = f.kappa / (2 * np.pi * f.L[0, 0] * f.L[1, 1]) * np.exp(-0.5 * (U**2).sum(axis=-1))
        return K * (1.0 + rv)

    def x_norm(self, include_one=True, norm: WeightedKernelNorm | None = None):
        """``(X1, X2)`` sup-ratios over every source and level."""
        norm = norm or self.norm
        x1 = x2 = 0.0
        for i in range(self.n_sources):
            m = self.source_map(i)
            a, b = _x_parts(self.r[i], m.levels, m.tau, m.frames, self.layout, norm, include_one)
            x1, x2 = max(x1, a), max(x2, b)
        return x1, x2

    def bound_report(self, norm: WeightedKernelNorm | None = None) -> dict:
        x1, x2 = self.x_norm(True, norm)
        return {
            "X1": x1,
            "X2": x2,
            "finite": bool(np.isfinite(x1) and np.isfinite(x2)),
            "converged": self.converged,
            "iterations": len(self.iteration_history),
            "split_depth": self.split_depth,
            "t_end": self.t_end.tolist(),
        }

    def save(self, path):
        header = {
            "direction": self.spec.direction.value,
            "params": {k: getattr(self.spec.params, k) for k in ("beta", "sigma", "dim", "horizon")},
            "layout": {k: getattr(self.layout, k) for k in ("n_xi", "box", "n_levels", "n_theta", "n_gh")},
            "norm": {"a": self.norm.a, "b": self.norm.b},
            "field": {"name": self.field_name, "mu": self.field_mu},
            "iteration_history": [float(h) for h in self.iteration_history],
            "converged": bool(self.converged),
            "split_depth": int(self.split_depth),
            "tol": float(self.tol),
        }
        write_blob(path, MAGIC, header, {"sources": self.sources, "t_end": self.t_end, "r": self.r})

    @classmethod
    def load(cls, path) -> "PropagatorTable":
        header, arr = read_blob(path, MAGIC)
        spec = KernelSpec(header["direction"], ModelParams(**header["params"]))
        return cls(
            spec,
            TableLayout(**header["layout"]),
            WeightedKernelNorm(**header["norm"]),
            arr["sources"],
            arr["t_end"],
            arr["r"],
            tuple(header["iteration_history"]),
            header["converged"],
            header["field"]["name"],
            header["field"]["mu"],
            header["split_depth"],
            header["tol"],
        )


def _check_spec(spec: KernelSpec):
    if spec.direction not in DUHAMEL_SIGN:
        raise ValueError(f"tables need a ForwardH or BackwardG kernel, got {spec.direction.value}")
    if spec.params.dim != 1:
        raise ValueError("perturbed kernel tables are built at dim = 1 only")


def empty_table(spec, sources, t_end, layout=TableLayout(), norm=WeightedKernelNorm()) -> PropagatorTable:
    """Iteration-0 table: ``Gamma`` equals the free kernel."""
    _check_spec(spec)
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    if sources.shape[1] != 3:
        raise ValueError("sources must be rows (x0, v0, tau)")
    t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (sources.shape[0],)).copy()
    if np.any(t_end <= sources[:, 2]) or np.any(t_end > spec.params.horizon * (1 + 1e-12)):
        raise ValueError("each source needs tau < t_end <= horizon")
    N = layout.n_xi
    r = np.zeros((sources.shape[0], layout.n_levels - 1, N, N))
    return PropagatorTable(spec, layout, norm, sources, t_end, r)


def _map_all(table: PropagatorTable, E: FieldSampler, form: str, jobs: int):
    def one(i):
        return table.source_map(i).apply(table.r[i], E, form)

    idx = range(table.n_sources)
    if jobs > 1 and table.n_sources > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return np.array(list(ex.map(one, idx)))
    return np.array([one(i) for i in idx])


def x_distance(table: PropagatorTable, r_new, r_old=None) -> float:
    """X-norm of the difference between two ratio tables on the same layout (max over sources)."""
    r_old = table.r if r_old is None else r_old
    d = 0.0
    for i in range(table.n_sources):
        m = table.source_map(i)
        a, b = _x_parts(r_new[i] - r_old[i], m.levels, m.tau, m.frames, table.layout, table.norm)
        d = max(d, a + b)
    return d


def picard_step(table: PropagatorTable, E: FieldSampler, jobs: int = 1):
    """Apply the Picard map once; returns the new table and the X-distance to the input."""
    r_new = _map_all(table, E, "A", jobs)
    dist = x_distance(table, r_new)
    out = replace(table, r=r_new, iteration_history=table.iteration_history + (dist,), field_name=E.name, field_mu=E.mu)
    object.__setattr__(out, "_maps", table._maps)
    return out, dist


def fixed_point_residual(table: PropagatorTable, E: FieldSampler, jobs: int = 1) -> dict:
    """X-distance of the table to one more step of each integral form."""
    ra = _map_all(table, E, "A", jobs)
    rb = _map_all(table, E, "B", jobs)
    return {"form_A": x_distance(table, ra), "form_B": x_distance(table, rb), "forms_gap": x_distance(table, ra, rb)}


def build_gamma(
    spec: KernelSpec,
    E: FieldSampler,
    norm: WeightedKernelNorm = WeightedKernelNorm(),
    sources=((0.0, 0.0, 0.0),),
    t_end=None,
    tol: float = 1e-9,
    max_iter: int = 40,
    layout: TableLayout = TableLayout(),
    jobs: int = 1,
    max_depth: int = 8,
) -> PropagatorTable:
    """Picard iteration to a fixed point, bisecting the time span while the map fails to contract.

    The returned table has ``converged`` set only when the X-distance fell
    below ``tol`` with every measured step ratio below 1.  Otherwise it holds
    the last iterate together with its history so the ratios can be inspected.
    """
    _check_spec(spec)
    src = np.atleast_2d(np.asarray(sources, dtype=float))
    t_end = spec.params.horizon if t_end is None else t_end
    ends = np.broadcast_to(np.asarray(t_end, dtype=float), (src.shape[0],)).copy()
    for depth in range(max_depth + 1):
        table = replace(empty_table(spec, src, ends, layout, norm), tol=tol, split_depth=depth)
        contracting = True
        for _ in range(max_iter):
            table, dist = picard_step(table, E, jobs)
            ratios = table.ratios
            if ratios.size and np.nanmax(ratios) >= 1.0 and dist > tol:
                contracting = False
                break
            if dist <= tol:
                return replace(table, converged=True)
        if contracting or depth == max_depth:
            return table
        ends = src[:, 2] + 0.5 * (ends - src[:, 2])
    return table


def apply_T3(g, table: PropagatorTable, t: float, n_gh: int = 24):
    """``int Gamma(z, t; z0, tau) g(z) dz`` for every source ``(z0, tau)`` of the table."""
    zeta, w = gauss_hermite_2d(n_gh)
    out = np.empty(table.n_sources)
    for i in range(table.n_sources):
        m = table.source_map(i)
        if not (m.tau < t <= m.t_end * (1 + 1e-12)):
            raise GridError(f"t={t} outside ({m.tau}, {m.t_end}] for source {i}")
        f = kernel_frame(table.spec, t - m.tau)
        z = f.M @ m.z0 + zeta @ f.L.T
        R = m.interp.at_time(table.r[i], np.sqrt(t - m.tau))
        Wx, Wv = m.interp.weights(zeta)
        rv = m.interp.apply(Wx, R, Wv)
        out[i] = f.kappa * np.sum(w * (1.0 + rv) * g(z[:, 0], z[:, 1]))
    return out
