"""Chebyshev-Lobatto interpolation helpers."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def lobatto(n: int):
    """Increasing Chebyshev-Lobatto nodes on [-1, 1] and their barycentric weights."""
    j = np.arange(n)
    x = -np.cos(np.pi * j / (n - 1))
    w = (-1.0) ** j
    w[0] *= 0.5
    w[-1] *= 0.5
    return x, w


@lru_cache(maxsize=32)
def diff_matrix(n: int):
    """Differentiation matrix on the increasing Lobatto nodes of [-1, 1]."""
    x, w = lobatto(n)
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    D = (w[None, :] / w[:, None]) / dx
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def bary_matrix(nodes, weights, pts):
    """Matrix ``B`` with ``B @ values`` the barycentric interpolant at ``pts`` (any shape)."""
    pts = np.asarray(pts, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = weights / (pts[..., None] - nodes)
        total = q.sum(axis=-1, keepdims=True)
    bad = ~np.isfinite(total[..., 0])
    if bad.any():
        # points sitting exactly on a node
        q[bad] = (pts[bad][:, None] == nodes).astype(float)
        total[bad] = 1.0
    q /= total
    return q
