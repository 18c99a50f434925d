"""Weighted singular integrals in time: the contraction probe and Henry-Gronwall iteration."""

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

# default exponents of the contraction estimate: outer (t-tau), (t-s), s, inner (s-tau)
CONTRACTION_EXPONENTS = (1 / 5, 1 / 2, 6 / 5, 1 / 5)


@dataclass(frozen=True)
class ContractionResult:
    value: float
    diverged: bool
    cutoffs: tuple = ()
    partial_values: tuple = ()
    growth_exponent: float = float("nan")


def _alg_quad(fn, lo, hi, alpha, beta):
    """Integral of fn(s) (s-lo)^alpha (hi-s)^beta over [lo, hi] by QUADPACK's QAWS."""
    if alpha == 0 and beta == 0:
        val, _ = integrate.quad(fn, lo, hi, limit=400, epsabs=0.0, epsrel=1e-13)
        return val
    val, _ = integrate.quad(fn, lo, hi, weight="alg", wvar=(alpha, beta), limit=400, epsabs=0.0, epsrel=1e-13)
    return val


def _integral_on(lo, tau, t, b, mu, c):
    """Integral of (t-s)^-b s^-mu (s-tau)^-c over [lo, t], lo >= tau, lo > 0 or integrable."""
    if lo == tau == 0.0:
        return _alg_quad(lambda s: 1.0, 0.0, t, -(mu + c), -b)
    if lo == tau:
        return _alg_quad(lambda s: s**-mu, tau, t, -c, -b)
    return _alg_quad(lambda s: s**-mu * (s - tau) ** -c, lo, t, 0.0, -b)


def contraction_integral(a, b, mu, tau, t, cutoff=0.0, *, c=None, refinements=5):
    """Weighted integral ``(t-tau)^a * int_tau^t (t-s)^-b s^-mu (s-tau)^-c ds``.

    The inner exponent ``c`` defaults to ``a``.  When ``tau == 0`` and the
    combined exponent at the origin is not integrable, the lower limit is
    ``cutoff`` and the cutoff is refined by factors of 4: if the value keeps
    growing as a power of the cutoff, ``diverged`` is set.  With ``cutoff = 0``
    the value is then infinite.
    """
    c = a if c is None else c
    if not (np.isfinite(tau) and np.isfinite(t)) or tau < 0 or t < tau:
        raise ValueError(f"need 0 <= tau <= t, got tau={tau}, t={t}")
    if b >= 1 or c >= 1:
        raise ValueError("endpoint exponents b and c must be < 1")
    if t == tau:
        return ContractionResult(0.0, False)
    outer = (t - tau) ** a
    if tau > 0 or mu + c < 1:
        return ContractionResult(outer * _integral_on(tau, tau, t, b, mu, c), False)

    start = cutoff if cutoff > 0 else min(1e-2, t / 4)
    cuts = start * 0.25 ** np.arange(refinements)
    vals = np.array([outer * _integral_on(e, 0.0, t, b, mu, c) for e in cuts])
    inc = np.diff(vals)
    # increments behave like cutoff^(1 - mu - c); a nonpositive exponent means no limit
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.log(inc[1:] / inc[:-1]) / np.log(0.25)
    growth = float(np.median(rates)) if rates.size else float("nan")
    diverged = bool(np.all(inc > 0) and growth <= 0.02)
    value = vals[0] if cutoff > 0 else (np.inf if diverged else vals[-1])
    return ContractionResult(float(value), diverged, tuple(cuts), tuple(vals), growth)


def contraction_probe(taus, t, exponents=CONTRACTION_EXPONENTS):
    """Values of the contraction integral for a sequence of ``tau`` and their log-log growth rate.

    Returns ``(values, slope, diverging)``; ``diverging`` is set when the
    values increase as ``tau`` decreases with a negative fitted power.
    """
    a, b, mu, c = exponents
    taus = np.asarray(taus, dtype=float)
    vals = np.array([contraction_integral(a, b, mu, tau, t, c=c).value for tau in taus])
    order = np.argsort(taus)
    slope = float(np.polyfit(np.log(taus[order]), np.log(vals[order]), 1)[0])
    monotone = bool(np.all(np.diff(vals[order]) < 0))
    return vals, slope, monotone and slope < -0.05


def singular_beta_integral(p, q):
    """``int_0^1 t^-p (1-t)^-q dt`` by algebraic-weight quadrature."""
    _check_exponents(p, q)
    return _alg_quad(lambda s: 1.0, 0.0, 1.0, -p, -q)


def _check_exponents(p, q):
    if p >= 1 or q >= 1:
        raise ValueError(f"exponents must be < 1 for an integrable endpoint, got p={p}, q={q}")


def _inc_beta(a, b, x):
    return special.betainc(a, b, x) * special.beta(a, b)


def gronwall_weights(s, p, q):
    """Product-integration matrix W with (K u)(s_i) = sum_j W_ij u_j.

    ``u`` is piecewise linear between samples and constant on (0, s_1].
    Every cell moment is an exact incomplete Beta function.
    """
    _check_exponents(p, q)
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s[0] <= 0 or np.any(np.diff(s) <= 0):
        raise ValueError("sample times must be positive and increasing")
    n = s.size
    W = np.zeros((n, n))
    a0, a1, bq = 1 - p, 2 - p, 1 - q
    for i in range(n):
        si = s[i]
        x = s[: i + 1] / si
        B0 = _inc_beta(a0, bq, x) * si ** (a0 - q)
        B1 = _inc_beta(a1, bq, x) * si ** (a1 - q)
        W[i, 0] += B0[0]
        m0 = np.diff(B0)
        m1 = np.diff(B1)
        lo, hi = s[:i], s[1 : i + 1]
        h = hi - lo
        # linear hat functions on each cell [lo, hi]
        W[i, :i] += (hi * m0 - m1) / h
        W[i, 1 : i + 1] += (m1 - lo * m0) / h
    return W


@dataclass(frozen=True)
class GronwallResult:
    times: np.ndarray
    iterates: np.ndarray
    sup_norms: np.ndarray


def henry_gronwall_iterate(u0, s, p=9 / 20, q=7 / 10, n_iter=10, C=1.0) -> GronwallResult:
    """Apply ``(K u)(s) = C int_0^s u(t) t^-p (s-t)^-q dt`` repeatedly to the samples ``u0``."""
    u0 = np.asarray(u0, dtype=float)
    if np.any(u0 < 0) or not np.all(np.isfinite(u0)):
        raise ValueError("u0 must be finite and nonnegative")
    W = C * gronwall_weights(s, p, q)
    its = [u0]
    for _ in range(n_iter):
        its.append(W @ its[-1])
    its = np.array(its)
    return GronwallResult(np.asarray(s, dtype=float), its, np.abs(its).max(axis=1))


def gronwall_envelope(p, q, C, n_iter, S=1.0):
    """Sup-norms on (0, S] of the exact iterates of ``u0 = 1``.

    The n-th iterate is ``C^n prod_k B(1-p+k g, 1-q) s^(n g)`` with
    ``g = 1-p-q``.  Entries are infinite once the iterate is unbounded
    near the origin or no longer integrable.
    """
    g = 1 - p - q
    out, coef = [1.0], 1.0
    for k in range(n_iter):
        first = 1 - p + k * g
        if first <= 0 or not np.isfinite(coef):
            coef = np.inf
        else:
            coef *= C * special.beta(first, 1 - q)
        if g < 0:
            out.append(np.inf)
        else:
            out.append(coef * S ** ((k + 1) * g))
    return np.array(out)


def predicted_iterations(p, q, C=1.0, threshold=1e-3, S=1.0, max_iter=200):
    """First iteration count at which the exact envelope drops below ``threshold``; None if it never does."""
    env = gronwall_envelope(p, q, C, max_iter, S)
    below = np.nonzero(env < threshold)[0]
    return int(below[0]) if below.size else None
