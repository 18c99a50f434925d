"""Small quadrature helpers shared by the kernel and operator modules."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _gl(n: int):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=64)
def _gh(n: int):
    # probabilists' Hermite: weight exp(-x^2/2), normalised to sum 1
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def gauss_legendre(n: int, a: float, b: float):
    x, w = _gl(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def gauss_legendre_box(n: int, width: float, dim: int = 2):
    """Tensor Gauss-Legendre nodes on [-width, width]^dim, flattened."""
    x, w = gauss_legendre(n, -width, width)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def gauss_hermite_2d(n: int):
    """Standard-normal expectation nodes in 2D: (n*n, 2) nodes, weights summing to 1."""
    x, w = _gh(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.stack([X.ravel(), Y.ravel()], axis=-1), W.ravel()


def graded_mesh(a: float, b: float, n: int, power: float = 4.0, toward: str = "left"):
    """Mesh on [a, b] clustering as ``power`` toward one or both endpoints."""
    s = np.linspace(0.0, 1.0, n + 1)
    if toward == "left":
        g = s**power
    elif toward == "right":
        g = 1.0 - (1.0 - s) ** power
    elif toward == "both":
        g = np.where(s < 0.5, 0.5 * (2 * s) ** power, 1.0 - 0.5 * (2 * (1 - s)) ** power)
    else:
        raise ValueError(toward)
    return a + (b - a) * g


def composite_gauss_legendre(edges, order: int = 8):
    """Nodes and weights of Gauss-Legendre on every panel of ``edges``."""
    x, w = _gl(order)
    a, b = np.asarray(edges[:-1]), np.asarray(edges[1:])
    half = 0.5 * (b - a)
    nodes = a[:, None] + half[:, None] * (x[None, :] + 1.0)
    weights = half[:, None] * w[None, :]
    return nodes.ravel(), weights.ravel()
