"""Solver state: phase densities, particle ensembles, configurations and per-step diagnostics."""

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .._binio import read_blob, write_blob
from ..field_poisson import FieldGrid
from ..grids import GridError, PhaseGrid
from ..kernel_core import ModelParams

SNAPSHOT_MAGIC = "VPFP-PHASE-DENSITY 1"


class Scheme(str, Enum):
    STRANG = "StrangKernelSplit"
    LIE = "LieSplit"
    PARTICLE = "ParticleEM"


class CFLError(ValueError):
    """The field kick would move mass by more than one velocity cell in a step."""


class DomainError(RuntimeError):
    """Mass reaches the edge of the phase box beyond the configured tolerance."""


@dataclass(frozen=True)
class PhaseDensity:
    """``f(x, v)`` on a phase grid at one time; negative input is clipped and the clipped mass recorded."""

    grid: PhaseGrid
    values: np.ndarray
    time: float = 0.0
    clipped_mass: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridError(f"density shape {values.shape} does not match phase grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("phase density must be finite")
        neg = values < 0
        clipped = self.clipped_mass
        if neg.any():
            clipped += float(-values[neg].sum() * self.grid.cell_volume)
            values[neg] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "clipped_mass", clipped)

    @classmethod
    def from_function(cls, grid: PhaseGrid, fn, time=0.0):
        X, V = grid.points()
        return cls(grid, fn(X, V), time)

    @property
    def mass(self):
        d = self.grid.dim
        w = self.grid.v_weights()
        marg = np.tensordot(self.values, w, axes=(tuple(range(d, 2 * d)), tuple(range(d))))
        return float(marg.sum() * self.grid.hx**d)

    def save(self, path):
        g = self.grid
        header = {"dim": g.dim, "periodic": g.periodic, "time": self.time, "clipped_mass": self.clipped_mass}
        write_blob(path, SNAPSHOT_MAGIC, header, {"x": g.x, "v": g.v, "values": self.values})

    @classmethod
    def load(cls, path) -> "PhaseDensity":
        h, a = read_blob(path, SNAPSHOT_MAGIC)
        grid = PhaseGrid(a["x"], a["v"], h["dim"], h["periodic"])
        return cls(grid, a["values"], h["time"], h["clipped_mass"])


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted particles; the noise of particle ``i`` at step ``n`` is counter ``i`` of the stream keyed by ``(seed, n)``."""

    x: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    seed: int
    step: int = 0
    time: float = 0.0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if x.shape != v.shape or x.shape[0] != w.size:
            raise ValueError(f"inconsistent particle arrays {x.shape}, {v.shape}, {w.shape}")
        if w.size < 1:
            raise ValueError("an ensemble needs at least one particle")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("particle weights must be finite and nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "weights", w)

    @property
    def n(self):
        return self.weights.size

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def mass(self):
        return float(self.weights.sum())


@dataclass(frozen=True)
class SolverConfig:
    """One run. Grid schemes use ``grid``; the particle scheme uses ``n_particles`` and ``deposit``."""

    params: ModelParams = ModelParams()
    omega: int = 1
    dt: float = 0.02
    scheme: Scheme = Scheme.STRANG
    grid: PhaseGrid | None = None
    n_particles: int = 0
    deposit: tuple = (6.0, 32)
    moment_orders: tuple = (2, 4)
    escape_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.omega not in (1, -1):
            raise ValueError("omega must be +1 or -1")
        if any(k < 0 for k in self.moment_orders):
            raise ValueError("moment orders must be >= 0")
        if self.scheme is Scheme.PARTICLE:
            if self.n_particles < 1:
                raise ValueError("particle runs need n_particles >= 1")
            half, n = self.deposit
            if half <= 0 or n < 2:
                raise ValueError("deposition box needs a positive half width and at least 2 cells")
        else:
            if self.grid is None:
                raise ValueError(f"{self.scheme.value} needs a phase grid")
            if not self.grid.periodic:
                raise GridError("grid schemes need a periodic_box phase grid")
            if self.grid.dim != self.params.dim:
                raise GridError(f"grid dimension {self.grid.dim} != model dimension {self.params.dim}")
            if self.params.dim == 3:
                raise ValueError("three-dimensional runs are particle-only")

    @property
    def n_steps(self):
        n = self.params.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"horizon {self.params.horizon} is not a multiple of dt {self.dt}")
        return int(round(n))

    def check_cfl(self, E_max):
        if self.grid is not None and E_max * self.dt > self.grid.hv:
            raise CFLError(f"max|E| dt = {E_max * self.dt:.3g} exceeds the velocity spacing {self.grid.hv:.3g}")

    def refined(self, factor=2):
        """Same box with ``factor`` times the nodes per axis and ``dt / factor``."""
        g = self.grid
        fine = None
        if g is not None:
            lx, lv = -g.x[0], -g.v[0]
            fine = PhaseGrid.periodic_box(lx, lv, g.x.size * factor, g.v.size * factor, g.dim)
        return replace(self, grid=fine, dt=self.dt / factor)


BASE_COLUMNS = ("t", "mass", "M2", "M4", "rho_L53", "E_Linf", "E_L2", "dv_f_L2", "energy_residual", "escaped_mass")


@dataclass
class Diagnostics:
    """Per-step record; the first ten columns are fixed, then clipped mass and per-order extras."""

    columns: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, orders):
        extra = ["clipped_mass", "f_L2sq"]
        for k in orders:
            extra += [f"Mt{k}", f"E_L{3 + k}"]
            if k >= 2:
                extra.append(f"Mt{k - 2}")
        names = list(BASE_COLUMNS) + list(dict.fromkeys(extra))
        return cls({n: [] for n in names})

    def record(self, row: dict):
        t = self.columns["t"]
        if t and row["t"] <= t[-1]:
            raise ValueError(f"diagnostics must advance in time ({row['t']} after {t[-1]})")
        for name, col in self.columns.items():
            col.append(float(row.get(name, math.nan)))

    def __getitem__(self, name):
        if name not in self.columns:
            raise KeyError(f"diagnostics have no column {name!r}; available: {', '.join(self.columns)}")
        return np.asarray(self.columns[name], dtype=float)

    def __contains__(self, name):
        return name in self.columns

    def __len__(self):
        return len(self.columns["t"])

    def to_csv(self, path):
        names = list(self.columns)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in zip(*(self.columns[n] for n in names)):
                w.writerow([repr(x) for x in row])

    @classmethod
    def from_csv(cls, path) -> "Diagnostics":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = rows[0]
        cols = {n: [float(r[j]) for r in rows[1:]] for j, n in enumerate(names)}
        return cls(cols)


@dataclass(frozen=True)
class TestFunction:
    """Separable ``phi(t, x, v) = w(t) h(x) r(v)`` with analytic derivatives.

    ``h``/``r`` take arrays with the coordinate on the last axis; ``dh``/``dr``
    return gradients with the same shape; ``lap_r`` returns the velocity Laplacian.
    """

    T: float
    w: Callable
    dw: Callable
    h: Callable
    dh: Callable
    r: Callable
    dr: Callable
    lap_r: Callable

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.w(self.T) != 0.0:
            raise ValueError("test function must vanish at the final time")

    @classmethod
    def gaussian(cls, T, x_center=0.0, x_width=1.0, v_center=0.0, v_width=1.0):
        """``(1 - t/T) exp(-|x-a|^2 / 2a^2) exp(-|v-b|^2 / 2b^2)`` with scalar widths."""

        def gauss(c, s):
            def val(y):
                return np.exp(-0.5 * np.sum((y - c) ** 2, axis=-1) / s**2)

            def grad(y):
                return -(y - c) / s**2 * val(y)[..., None]

            def lap(y):
                d = y.shape[-1]
                q = np.sum((y - c) ** 2, axis=-1) / s**2
                return (q - d) / s**2 * val(y)

            return val, grad, lap

        h, dh, _ = gauss(x_center, x_width)
        r, dr, lap_r = gauss(v_center, v_width)
        return cls(T, lambda t: 1.0 - t / T, lambda t: -1.0 / T + 0.0 * t, h, dh, r, dr, lap_r)


def field_max(E: FieldGrid) -> float:
    return float(E.magnitude.max()) if E.values.size else 0.0

