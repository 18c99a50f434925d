"""Uniform spatial and phase-space grids shared by the field, operator and solver code."""

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Sampled data and the requested evaluation grid do not fit together."""


def _check_axis(name, a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
        raise GridError(f"{name} axis must be increasing with at least 2 points")
    return a


@dataclass(frozen=True)
class XGrid:
    """Uniform tensor grid in physical space; each node carries the cell of width ``h`` around it."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(_check_axis(f"x{i + 1}", a) for i, a in enumerate(self.axes))
        if not 1 <= len(axes) <= 3:
            raise GridError("spatial dimension must be 1, 2 or 3")
        for a in axes:
            if not np.allclose(np.diff(a), a[1] - a[0], rtol=1e-9, atol=0):
                raise GridError("spatial axes must be uniform")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def cells(cls, lo, hi, n, dim=1):
        """``n`` cells per axis tiling ``[lo, hi]``, nodes at the cell centers."""
        h = (hi - lo) / n
        return cls((lo + h * (np.arange(n) + 0.5),) * dim)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    @property
    def spacing(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def points(self):
        """Array of shape ``shape + (dim,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def reflected(self) -> bool:
        """True when every axis is symmetric about the origin."""
        return all(np.allclose(a, -a[::-1], rtol=0, atol=1e-12 * max(1.0, abs(a[-1]))) for a in self.axes)


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor grid with the same ``x`` and ``v`` axes in every coordinate."""

    x: np.ndarray
    v: np.ndarray
    dim: int = 1
    periodic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "x", _check_axis("x", self.x))
        object.__setattr__(self, "v", _check_axis("v", self.v))

    @classmethod
    def uniform(cls, x_lim, v_lim, nx, nv, dim=1):
        return cls(np.linspace(*x_lim, nx), np.linspace(*v_lim, nv), dim)

    @classmethod
    def periodic_box(cls, x_half, v_half, nx, nv, dim=1):
        """Nodes ``-L + j h`` of the periodic boxes ``[-x_half, x_half)`` and ``[-v_half, v_half)``."""
        x = -x_half + (2 * x_half / nx) * np.arange(nx)
        v = -v_half + (2 * v_half / nv) * np.arange(nv)
        return cls(x, v, dim, True)

    @property
    def shape(self):
        return (self.x.size,) * self.dim + (self.v.size,) * self.dim

    @property
    def hx(self):
        return float(self.x[1] - self.x[0])

    @property
    def hv(self):
        return float(self.v[1] - self.v[0])

    @property
    def cell_volume(self):
        return (self.hx * self.hv) ** self.dim

    @property
    def x_grid(self) -> XGrid:
        return XGrid((self.x,) * self.dim)

    def v_weights(self):
        """Trapezoid weights on the velocity block, shape ``(nv,) * dim``; uniform when periodic."""
        w = np.full(self.v.size, self.hv)
        if not self.periodic:
            w[0] = w[-1] = 0.5 * self.hv
        out = w
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, w)
        return out

    def points(self):
        """Arrays ``(X, V)`` of shape ``shape + (dim,)``."""
        axes = [self.x] * self.dim + [self.v] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        X = np.stack(mesh[: self.dim], axis=-1)
        V = np.stack(mesh[self.dim :], axis=-1)
        return X, V

    def contains(self, other: "PhaseGrid") -> bool:
        return (
            other.dim == self.dim
            and other.x[0] >= self.x[0] - 1e-12
            and other.x[-1] <= self.x[-1] + 1e-12
            and other.v[0] >= self.v[0] - 1e-12
            and other.v[-1] <= self.v[-1] + 1e-12
        )
