"""Macroscopic density, the self-consistent free-space field, Lp norms and decay fits."""

import csv
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .grids import GridError, PhaseGrid, XGrid


class TruncationWarning(UserWarning):
    """Density mass reaches the edge of the grid, so the free-space field is truncated."""


@dataclass(frozen=True)
class DensityGrid:
    grid: XGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridError(f"density shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("density must be finite")
        if np.any(values < 0):
            raise ValueError(f"density has negative values (min {values.min():.3e})")
        object.__setattr__(self, "values", values)

    @property
    def cell_volume(self):
        return self.grid.cell_volume

    @property
    def total_mass(self):
        return float(self.values.sum() * self.cell_volume)

    def to_csv(self, path):
        _write_csv(path, self.grid, {"rho": self.values})

    @classmethod
    def from_csv(cls, path) -> "DensityGrid":
        grid, cols = _read_csv(path)
        return cls(grid, cols["rho"])


@dataclass(frozen=True)
class FieldGrid:
    grid: XGrid
    values: np.ndarray
    omega: int = 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape + (self.grid.dim,):
            raise GridError(f"field shape {values.shape} does not match grid {self.grid.shape} x {self.grid.dim}")
        if self.omega not in (1, -1):
            raise ValueError("omega must be +1 (Coulombic) or -1 (gravitational)")
        object.__setattr__(self, "values", values)

    @property
    def magnitude(self):
        return np.linalg.norm(self.values, axis=-1)

    @property
    def structural_analogue(self) -> bool:
        """Fields below three dimensions are reduced analogues of the physical model."""
        return self.grid.dim != 3

    def divergence(self):
        """Centered-difference divergence at interior nodes (boundary layer set to nan)."""
        div = np.zeros(self.grid.shape)
        for i, h in enumerate(self.grid.spacing):
            div += np.gradient(self.values[..., i], h, axis=i)
        inner = tuple(slice(1, -1) for _ in range(self.grid.dim))
        out = np.full(self.grid.shape, np.nan)
        out[inner] = div[inner]
        return out

    def to_csv(self, path):
        cols = {f"E{i + 1}": self.values[..., i] for i in range(self.grid.dim)}
        cols["omega"] = np.full(self.grid.shape, float(self.omega))
        _write_csv(path, self.grid, cols)

    @classmethod
    def from_csv(cls, path) -> "FieldGrid":
        grid, cols = _read_csv(path)
        E = np.stack([cols[f"E{i + 1}"] for i in range(grid.dim)], axis=-1)
        return cls(grid, E, int(round(float(cols["omega"].flat[0]))))


def _write_csv(path, grid: XGrid, cols: dict):
    pts = grid.points().reshape(-1, grid.dim)
    names = [f"x{i + 1}" for i in range(grid.dim)] + list(cols)
    flat = [c.reshape(-1) for c in cols.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for k in range(pts.shape[0]):
            w.writerow([repr(float(x)) for x in pts[k]] + [repr(float(c[k])) for c in flat])


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names, data = rows[0], np.array(rows[1:], dtype=float)
    dim = sum(n.startswith("x") for n in names)
    axes = tuple(np.unique(data[:, i]) for i in range(dim))
    grid = XGrid(axes)
    cols = {n: data[:, j].reshape(grid.shape) for j, n in enumerate(names) if j >= dim}
    return grid, cols


def velocity_marginal(f) -> DensityGrid:
    """``rho(x) = int f(x, v) dv`` by the trapezoid rule over the velocity block.

    ``f`` is any object with ``grid`` (a :class:`PhaseGrid`) and ``values``.
    """
    grid: PhaseGrid = f.grid
    values = np.asarray(f.values, dtype=float)
    d = grid.dim
    w = grid.v_weights()
    rho = np.tensordot(values, w, axes=(tuple(range(d, 2 * d)), tuple(range(d))))
    return DensityGrid(grid.x_grid, np.maximum(rho, 0.0) if np.all(values >= 0) else rho)


# exact integrals of the free-space kernel over an axis-aligned cell, via corner inclusion-exclusion


def _prism_antiderivative_3d(x, y, z):
    # int int 1/r dy dz; additive terms independent of y or z cancel between corners
    r = np.sqrt(x * x + y * y + z * z)
    return y * np.arcsinh(z / np.hypot(x, y)) + z * np.arcsinh(y / np.hypot(x, z)) - x * np.arctan(y * z / (x * r))


def _prism_antiderivative_2d(x, y):
    # int ln(x^2 + y^2) dy / 2 without the term linear in y
    return 0.5 * y * np.log(x * x + y * y) + x * np.arctan(y / x)


def _cell_kernel_component(offsets, h, comp):
    """``int_cell u_c / |u|^d du`` for cells centered at ``offsets`` (shape (..., d))."""
    d = offsets.shape[-1]
    order = [comp] + [i for i in range(d) if i != comp]
    c = offsets[..., order]
    hh = np.asarray(h)[order]
    total = np.zeros(offsets.shape[:-1])
    for corner in np.ndindex(*(2,) * d):
        sgn = (-1) ** (d - sum(corner))
        pt = [c[..., i] + (corner[i] - 0.5) * hh[i] for i in range(d)]
        if d == 3:
            # int u_x / r^3 dx = -1/r
            total -= sgn * _prism_antiderivative_3d(*pt)
        else:
            total += sgn * _prism_antiderivative_2d(*pt)
    return total


@lru_cache(maxsize=16)
def _kernel_tables(shape: tuple, spacing: tuple):
    """Cell-integrated kernel on all offsets ``-(n-1)..(n-1)``; read-only and shared."""
    d = len(shape)
    axes = [h * np.arange(-(n - 1), n) for n, h in zip(shape, spacing)]
    offs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    norm = 4 * np.pi if d == 3 else 2 * np.pi
    tables = []
    for comp in range(d):
        with np.errstate(divide="ignore", invalid="ignore"):
            K = _cell_kernel_component(offs, spacing, comp) / norm
        # the self cell is symmetric, so the odd kernel integrates to zero
        K[tuple(n - 1 for n in shape)] = 0.0
        K = np.nan_to_num(K)
        K.setflags(write=False)
        tables.append(K)
    return tuple(tables)


def _edge_fraction(rho: DensityGrid):
    v = rho.values
    total = v.sum()
    if total == 0:
        return 0.0
    edge = np.zeros(v.shape, dtype=bool)
    for i in range(v.ndim):
        idx = [slice(None)] * v.ndim
        idx[i] = [0, -1]
        edge[tuple(idx)] = True
    return float(v[edge].sum() / total)


def solve_field(rho: DensityGrid, omega: int = 1, edge_tol: float = 1e-8) -> FieldGrid:
    """Free-space field ``E = -grad V`` with ``-Laplace V = omega rho`` in the grid's dimension.

    ``d = 1`` uses ``E(x) = omega/2 int sign(x - y) rho(y) dy`` exactly for the
    piecewise-constant density; ``d = 2, 3`` convolve with the cell-integrated
    kernel ``omega x / (2 pi |x|^2)`` or ``omega x / (4 pi |x|^3)`` by a
    zero-padded FFT, so there is no periodic image.
    """
    if omega not in (1, -1):
        raise ValueError("omega must be +1 or -1")
    grid = rho.grid
    frac = _edge_fraction(rho)
    if frac > edge_tol:
        warnings.warn(
            f"{frac:.2e} of the mass sits in boundary cells; expect a field truncation error of that relative size",
            TruncationWarning,
            stacklevel=2,
        )
    if grid.dim == 1:
        m = rho.values * grid.cell_volume
        left = np.cumsum(m) - m
        right = m.sum() - left - m
        return FieldGrid(grid, (0.5 * omega * (left - right))[:, None], omega)
    tables = _kernel_tables(grid.shape, grid.spacing)
    E = np.empty(grid.shape + (grid.dim,))
    for comp, K in enumerate(tables):
        full = signal.fftconvolve(rho.values, K, mode="full")
        sl = tuple(slice(n - 1, 2 * n - 1) for n in grid.shape)
        E[..., comp] = omega * full[sl]
    return FieldGrid(grid, E, omega)


def lp_norm(g, r, cell_volume=None) -> float:
    """Discrete ``L^r`` norm with cell-volume weights; vector fields use the pointwise length."""
    if not (r >= 1):
        raise ValueError(f"exponent must be >= 1, got {r}")
    if isinstance(g, FieldGrid):
        vals, cell_volume = g.magnitude, g.grid.cell_volume
    elif isinstance(g, DensityGrid):
        vals, cell_volume = g.values, g.cell_volume
    else:
        if cell_volume is None:
            raise ValueError("cell_volume is required for raw arrays")
        vals = np.asarray(g, dtype=float)
    a = np.abs(vals)
    if np.isinf(r):
        return float(a.max())
    m = a.max()
    if m == 0:
        return 0.0
    return float(m * (np.sum((a / m) ** r) * cell_volume) ** (1.0 / r))


@dataclass(frozen=True)
class SelfConvolutionBound:
    value: float
    certificate: float
    r: float
    p: float


def _tail_norm(q):
    # || |x|^-2 1_{|x| >= 1} ||_q in three dimensions
    return (4 * np.pi / (2 * q - 3)) ** (1 / q)


def _core_norm(q):
    # || |x|^-2 1_{|x| <= 1} ||_q in three dimensions
    return (4 * np.pi / (3 - 2 * q)) ** (1 / q)


def field_selfconvolution_bound(E: FieldGrid, r: float = 2.0, p: float = 3.5) -> SelfConvolutionBound:
    """``sup_x |int E(y) . (y - x) / |x - y|^3 dy|`` and its Hoelder split at ``|x - y| = 1``.

    The certificate is ``||E||_r ||.||_{r'} + ||E||_p ||.||_{p'}`` over the
    far and near parts of ``|x|^-2``; it needs ``1 < r < 3`` and ``p > 3``.
    """
    if E.grid.dim != 3:
        raise ValueError("the self-convolution bound is three-dimensional")
    if not (1 < r < 3 and p > 3):
        raise ValueError(f"need 1 < r < 3 and p > 3, got r={r}, p={p}")
    tables = _kernel_tables(E.grid.shape, E.grid.spacing)
    sl = tuple(slice(n - 1, 2 * n - 1) for n in E.grid.shape)
    total = np.zeros(E.grid.shape)
    for comp, K in enumerate(tables):
        # tables hold (x - y)_c / (4 pi |x - y|^3) per unit density
        total -= 4 * np.pi * signal.fftconvolve(E.values[..., comp], K, mode="full")[sl]
    value = float(np.abs(total).max())
    r_c, p_c = r / (r - 1), p / (p - 1)
    cert = lp_norm(E, r) * _tail_norm(r_c) + lp_norm(E, p) * _core_norm(p_c)
    return SelfConvolutionBound(value, float(cert), r, p)


@dataclass(frozen=True)
class DecayFit:
    """``norm ~ C t^-alpha`` on the fit window with a bootstrap interval for ``alpha``."""

    alpha: float
    C: float
    ci: tuple
    n: int

    @property
    def ci_width(self):
        return self.ci[1] - self.ci[0]


def decay_fit(t, norms, window=None, n_boot=2000, seed=0, level=0.95) -> DecayFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(norms, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and norms must be matching 1-D arrays")
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if t.size < 5:
        raise ValueError(f"need at least 5 samples, got {t.size}")
    if np.any(t <= 0) or np.any(y <= 0):
        raise ValueError("times and norms must be positive")
    lt, ly = np.log(t), np.log(y)
    slope, icpt = np.polyfit(lt, ly, 1)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        idx = rng.integers(0, t.size, t.size)
        if np.ptp(lt[idx]) == 0:
            continue
        boots.append(-np.polyfit(lt[idx], ly[idx], 1)[0])
    q = (1 - level) / 2
    lo, hi = np.quantile(boots, [q, 1 - q])
    return DecayFit(float(-slope), float(np.exp(icpt)), (float(lo), float(hi)), int(t.size))
