"""Deterministic splitting scheme on a periodic phase box.

The free step (transport, friction and velocity diffusion) is applied exactly
in Fourier variables: the spectrum at ``(k, eta)`` is carried along
``eta(u) = eta e^{-beta u} + k u phi(beta u)`` and damped by
``exp(-sigma int eta(u)^2 du)``, i.e. convolution with the forward kernel.
For each wavenumber ``k`` this is one dense velocity matrix, so the step is
time-homogeneous and conserves the zero mode (the mass) exactly. The field
kick is an exact spectral shift of every velocity column by ``E(x) dt``.
"""

from functools import lru_cache

import numpy as np

from .._quadrature import gauss_legendre
from ..field_poisson import FieldGrid, lp_norm, solve_field, velocity_marginal
from ..grids import PhaseGrid
from ..kernel_core import ModelParams
from .state import DomainError, PhaseDensity, Scheme, SolverConfig, field_max


def _phi1(x):
    """``(1 - e^{-x}) / x`` with the removable singularity at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - 0.5 * x, -np.expm1(-safe) / safe)


@lru_cache(maxsize=16)
def _free_matrices(beta, sigma, dt, nx, hx, nv, v0, hv):
    """Per-wavenumber velocity matrices ``P[k]`` of shape ``(nx, nv, nv)``."""
    k = 2 * np.pi * np.fft.fftfreq(nx, hx)
    eta = 2 * np.pi * np.fft.fftfreq(nv, hv)
    v = v0 + hv * np.arange(nv)
    K, H = np.meshgrid(k, eta, indexing="ij")
    foot = H * np.exp(-beta * dt) + K * dt * _phi1(beta * dt)
    u, wu = gauss_legendre(16, 0.0, dt)
    path = H[..., None] * np.exp(-beta * u) + K[..., None] * u * _phi1(beta * u)
    damp = np.exp(-sigma * (path**2) @ wu)
    # the grid function is band limited: its spectrum vanishes past the Nyquist frequency
    damp = np.where(np.abs(foot) <= np.pi / hv * (1 + 1e-12), damp, 0.0)
    analysis = np.exp(-1j * foot[..., None] * v)  # (k, eta, n)
    synthesis = np.exp(1j * np.multiply.outer(v, eta)) / nv  # (l, eta)
    P = np.einsum("lm,km,kmn->kln", synthesis, damp, analysis)
    P.setflags(write=False)
    return P


def free_step(values, grid: PhaseGrid, params: ModelParams, dt: float):
    """Apply the exact free forward kernel over ``dt`` to grid values."""
    d = grid.dim
    out = np.asarray(values, dtype=float)
    P = _free_matrices(
        float(params.beta), float(params.sigma), float(dt), grid.x.size, grid.hx, grid.v.size, float(grid.v[0]), grid.hv
    )
    for i in range(d):
        a = np.moveaxis(out, (i, d + i), (-2, -1))
        shape = a.shape
        a = np.fft.fft(a.reshape(-1, shape[-2], shape[-1]), axis=1)  # (rest, k, n)
        b = np.matmul(a.transpose(1, 0, 2), P.transpose(0, 2, 1))  # (k, rest, l)
        b = np.fft.ifft(b.transpose(1, 0, 2), axis=1).real
        out = np.moveaxis(b.reshape(shape), (-2, -1), (i, d + i))
    return np.ascontiguousarray(out)


def kick(values, grid: PhaseGrid, E: FieldGrid, tau: float):
    """``f(x, v) -> f(x, v - E(x) tau)`` by an exact shift of the velocity spectrum."""
    d = grid.dim
    vax = tuple(range(d, 2 * d))
    eta = 2 * np.pi * np.fft.fftfreq(grid.v.size, grid.hv)
    phase = np.zeros(grid.shape)
    for i in range(d):
        shape_e = (grid.x.size,) * d + (1,) * d
        shape_k = (1,) * d + tuple(eta.size if j == i else 1 for j in range(d))
        phase = phase + E.values[..., i].reshape(shape_e) * eta.reshape(shape_k)
    spec = np.fft.fftn(values, axes=vax) * np.exp(-1j * tau * phase)
    return np.fft.ifftn(spec, axes=vax).real


def velocity_gradient_sq(values, grid: PhaseGrid):
    """``|grad_v f|^2`` integrated over phase space, by spectral differentiation."""
    d = grid.dim
    eta = 2 * np.pi * np.fft.fftfreq(grid.v.size, grid.hv)
    total = 0.0
    for i in range(d):
        ax = d + i
        shape = [1] * (2 * d)
        shape[ax] = eta.size
        g = np.fft.ifft(1j * eta.reshape(shape) * np.fft.fft(values, axis=ax), axis=ax).real
        total += float(np.sum(g**2))
    return total * grid.cell_volume


def boundary_mass(values, grid: PhaseGrid):
    """Mass in the outermost cell layer of the phase box (the mass that can wrap around)."""
    edge = np.zeros(values.shape, dtype=bool)
    for ax in range(values.ndim):
        idx = [slice(None)] * values.ndim
        idx[ax] = [0, -1]
        edge[tuple(idx)] = True
    return float(values[edge].sum() * grid.cell_volume)


def field_of(f: PhaseDensity, omega: int) -> FieldGrid:
    return solve_field(velocity_marginal(f), omega, edge_tol=np.inf)


def step_split(f: PhaseDensity, E: FieldGrid, dt: float, config: SolverConfig, field_after=None) -> PhaseDensity:
    """One splitting step with the field ``E`` computed from ``f``'s marginal (or held fixed).

    For the Strang scheme ``field_after`` maps the state after the free step
    to the field of the closing half kick; kicks leave the marginal unchanged,
    so this keeps the self-consistent step second order. Default: reuse ``E``.
    """
    grid = f.grid
    config.check_cfl(field_max(E))
    vals = f.values
    if config.scheme is Scheme.STRANG:
        vals = kick(vals, grid, E, 0.5 * dt)
        vals = free_step(vals, grid, config.params, dt)
        E2 = E if field_after is None else field_after(PhaseDensity(grid, vals, f.time + dt))
        config.check_cfl(field_max(E2))
        vals = kick(vals, grid, E2, 0.5 * dt)
    elif config.scheme is Scheme.LIE:
        vals = kick(vals, grid, E, dt)
        vals = free_step(vals, grid, config.params, dt)
    else:
        raise ValueError(f"{config.scheme.value} is not a grid scheme")
    out = PhaseDensity(grid, vals, f.time + dt, f.clipped_mass)
    edge = boundary_mass(out.values, grid)
    if edge > config.escape_tol * max(out.mass, 1e-300):
        raise DomainError(f"{edge:.3e} of mass in the boundary layer at t={out.time:.4g}; enlarge the phase box")
    return out


def density_row(f: PhaseDensity, E: FieldGrid, orders) -> dict:
    """Diagnostics of one grid state (the energy residual is filled in after the run)."""
    grid = f.grid
    _, V = grid.points()
    speed2 = np.sum(V**2, axis=-1)
    cv = grid.cell_volume
    vals = f.values
    mass = float(vals.sum() * cv)
    rho = velocity_marginal(f)
    row = {
        "t": f.time,
        "mass": mass,
        "M2": float(np.sum(vals * (1 + speed2)) * cv),
        "M4": float(np.sum(vals * (1 + speed2**2)) * cv),
        "rho_L53": lp_norm(rho, 5 / 3),
        "E_Linf": lp_norm(E, np.inf),
        "E_L2": lp_norm(E, 2),
        "dv_f_L2": np.sqrt(velocity_gradient_sq(vals, grid)),
        "escaped_mass": boundary_mass(vals, grid),
        "clipped_mass": f.clipped_mass,
        "f_L2sq": float(np.sum(vals**2) * cv),
    }
    for k in orders:
        for j in (k, k - 2):
            if j >= 0:
                row[f"Mt{j}"] = float(np.sum(vals * (1 + speed2) ** (j / 2)) * cv)
        row[f"E_L{3 + k}"] = lp_norm(E, 3 + k)
    return row


def energy_residual(t, f_L2sq, dv_f_L2, params: ModelParams):
    """``1/2 d/dt |f|^2 - d beta/2 |f|^2 + sigma |grad_v f|^2`` along a run (zero for the exact flow)."""
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        return np.zeros(t.size)
    dE = np.gradient(np.asarray(f_L2sq), t, edge_order=2 if t.size > 2 else 1)
    return 0.5 * dE - 0.5 * params.dim * params.beta * np.asarray(f_L2sq) + params.sigma * np.asarray(dv_f_L2) ** 2


