"""Moments, the weak-form residual and the moment, uniqueness and regularity experiments."""

import warnings
from dataclasses import dataclass

import numpy as np

from ..field_poisson import TruncationWarning, lp_norm
from ..linear_ops import gronwall_weights
from .run import Trajectory, run
from .state import PhaseDensity, SolverConfig, TestFunction


def moment(f: PhaseDensity, k: float, bracket: bool = False, tail_tol: float = 1e-8) -> float:
    """``int f (1 + |v|^k)``, or ``int f <v>^k`` with ``<v> = (1 + |v|^2)^{1/2}`` when ``bracket``."""
    if k < 0:
        raise ValueError("moment order must be >= 0")
    grid = f.grid
    _, V = grid.points()
    s2 = np.sum(V**2, axis=-1)
    weight = (1 + s2) ** (k / 2) if bracket else 1 + s2 ** (k / 2)
    integrand = f.values * weight
    value = float(integrand.sum() * grid.cell_volume)
    d = grid.dim
    edge = np.zeros(integrand.shape, dtype=bool)
    for ax in range(d, 2 * d):
        idx = [slice(None)] * (2 * d)
        idx[ax] = [0, -1]
        edge[tuple(idx)] = True
    tail = float(integrand[edge].sum() * grid.cell_volume)
    if value > 0 and tail > tail_tol * value:
        warnings.warn(
            f"moment k={k}: velocity-edge contribution {tail / value:.2e} of the value; enlarge the velocity box",
            TruncationWarning,
            stacklevel=2,
        )
    return value


def weak_residual(traj: Trajectory, phi, fields=None) -> float:
    """Space-time quadrature of the weak formulation, including ``int f0 phi(0)``.

    ``phi`` is a :class:`TestFunction` or a sequence of them (summed). Time uses
    the trapezoid rule over the snapshots, which must span ``[0, T]`` with
    ``T = phi.T``.
    """
    phis = [phi] if isinstance(phi, TestFunction) else list(phi)
    fields = traj.fields if fields is None else fields
    dens = traj.densities
    if len(fields) != len(dens) or len(dens) < 2:
        raise ValueError("need at least two snapshots with one field each")
    t = traj.times
    beta, sigma = traj.params.beta, traj.params.sigma
    grid = dens[0].grid
    X, V = grid.points()
    cv = grid.cell_volume
    d = grid.dim
    vals = np.empty(t.size)
    for n, (f, E) in enumerate(zip(dens, fields)):
        Ex = E.values.reshape(E.values.shape[:d] + (1,) * d + (d,))
        acc = 0.0
        for p in phis:
            h, dh = p.h(X), p.dh(X)
            r, dr, lap = p.r(V), p.dr(V), p.lap_r(V)
            w, dw = p.w(t[n]), p.dw(t[n])
            L = dw * h * r + w * (
                np.sum(V * dh, axis=-1) * r
                + h * np.sum((Ex - beta * V) * dr, axis=-1)
                + sigma * h * lap
            )
            acc += float(np.sum(f.values * L) * cv)
        vals[n] = acc
    initial = sum(float(np.sum(dens[0].values * p.w(t[0]) * p.h(X) * p.r(V)) * cv) for p in phis)
    return float(np.trapezoid(vals, t) + initial)


@dataclass(frozen=True)
class MomentSlack:
    slack: np.ndarray
    C: float
    exponent: float


def moment_inequality_check(diag, k: int) -> MomentSlack:
    """``C (|E|_{3+k} Mt_k^{(k+2)/(k+3)} + Mt_k + Mt_{k-2}) - d/dt Mt_k`` per step with the smallest admissible C."""
    if k < 2:
        raise ValueError("the moment inequality needs k >= 2")
    need = [f"Mt{k}", f"Mt{k - 2}", f"E_L{3 + k}"]
    missing = [c for c in need if c not in diag]
    if missing:
        raise KeyError(f"diagnostics lack columns {missing}; configure moment order {k}")
    t = diag["t"]
    M, Mlow, E = diag[f"Mt{k}"], diag[f"Mt{k - 2}"], diag[f"E_L{3 + k}"]
    expo = (k + 2) / (k + 3)
    lhs = np.gradient(M, t, edge_order=2)
    bracket = E * M**expo + M + Mlow
    C = max(float(np.max(lhs / bracket)), 0.0)
    return MomentSlack(C * bracket - lhs, C, expo)


@dataclass(frozen=True)
class UniquenessResult:
    times: np.ndarray
    w_L2: np.ndarray
    Ew_L2: np.ndarray
    gronwall_C: float

    @property
    def sup_Ew(self):
        return float(self.Ew_L2.max())


def _restrict(fine, coarse):
    """Index of the coarse nodes inside the fine axis; they must coincide."""
    step = (fine.size // coarse.size) if coarse.size else 0
    if step < 1 or not np.allclose(fine[::step], coarse, rtol=0, atol=1e-12 * max(1, abs(coarse).max())):
        raise ValueError("grids are not nested; pair runs on the same box with an integer refinement factor")
    return slice(None, None, step)


def gronwall_constant(times, series, p=9 / 20, q=7 / 10):
    """Smallest C with ``u(s) <= C int_0^s u(t) t^-p (s-t)^-q dt`` on the samples ``s > 0``."""
    s = np.asarray(times, dtype=float)
    u = np.asarray(series, dtype=float)
    pos = s > 0
    s, u = s[pos], u[pos]
    Ku = gronwall_weights(s, p, q) @ u
    ok = Ku > 0
    if not np.any(u > 0):
        return 0.0
    if np.any((u > 0) & ~ok):
        return np.inf
    return float(np.max(u[ok] / Ku[ok]))


def uniqueness_experiment(config_pair, f0, *, p=9 / 20, q=7 / 10) -> UniquenessResult:
    """Evolve one initial density with two configurations and compare them on the coarser grid.

    ``f0`` is a function ``(X, V) -> values`` so both grids sample the same data.
    """
    a, b = config_pair
    if not np.isclose(a.params.horizon, b.params.horizon):
        raise ValueError(f"horizons differ: {a.params.horizon} vs {b.params.horizon}")
    if not callable(f0):
        raise ValueError("f0 must be a function of (X, V) so both grids see the same data")
    if b.grid.x.size < a.grid.x.size:
        a, b = b, a
    sx, sv = _restrict(b.grid.x, a.grid.x), _restrict(b.grid.v, a.grid.v)
    every = a.dt / b.dt
    if abs(every - round(every)) > 1e-9:
        raise ValueError("time steps are not nested")
    ta, _ = run(a, f0, snapshot_every=1)
    tb, _ = run(b, f0, snapshot_every=int(round(every)))
    d = a.grid.dim
    xs = (sx,) * d
    w_L2, Ew_L2 = [], []
    for fa, fb, Ea, Eb in zip(ta.densities, tb.densities, ta.fields, tb.fields):
        w = fa.values - fb.values[xs + (sv,) * d]
        w_L2.append(float(np.sqrt(np.sum(w**2) * a.grid.cell_volume)))
        Ew = Ea.values - Eb.values[xs]
        Ew_L2.append(lp_norm(np.linalg.norm(Ew, axis=-1), 2, Ea.grid.cell_volume))
    times = ta.times
    Ew_L2 = np.array(Ew_L2)
    return UniquenessResult(times, np.array(w_L2), Ew_L2, gronwall_constant(times, Ew_L2, p, q))


def refinement_ratios(base: SolverConfig, f0, levels=3):
    """``sup_t |E_w|_2`` for consecutive refinement pairs and the ratios between them."""
    configs = [base]
    for _ in range(levels - 1):
        configs.append(configs[-1].refined())
    sups = [uniqueness_experiment((c, c2), f0).sup_Ew for c, c2 in zip(configs, configs[1:])]
    return np.array(sups), np.array(sups[:-1]) / np.array(sups[1:])


@dataclass(frozen=True)
class RegularityCheck:
    integral: float
    exponent: float
    p_prime: float
    integrable: bool


def velocity_regularity_check(diag, p=10 / 3 + 0.1, window=None) -> RegularityCheck:
    """``int_0^T |d_v f|_2^{p'} dt`` and the fitted rate ``a`` in ``|d_v f|_2 ~ t^{-a}`` near 0.

    The integral converges for the fitted envelope when ``a < 1/p'``.
    """
    if "dv_f_L2" not in diag:
        raise KeyError("diagnostics lack the dv_f_L2 column")
    if p <= 1:
        raise ValueError("p must exceed 1")
    t, g = diag["t"], diag["dv_f_L2"]
    if not np.all(np.isfinite(g)):
        raise ValueError("dv_f_L2 is not available for this run")
    pp = p / (p - 1)
    integral = float(np.trapezoid(g**pp, t))
    lo, hi = window if window is not None else (t[1], t[-1] / 4)
    sel = (t >= lo) & (t <= hi) & (g > 0)
    if sel.sum() < 3:
        raise ValueError("fewer than three samples in the fit window")
    slope = np.polyfit(np.log(t[sel]), np.log(g[sel]), 1)[0]
    a = float(-slope)
    return RegularityCheck(integral, a, pp, a < 1 / pp)
