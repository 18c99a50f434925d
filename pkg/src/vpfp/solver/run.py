"""Self-consistent runs on the grid and with particles."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..field_poisson import DensityGrid, FieldGrid, lp_norm, solve_field
from ..grids import XGrid
from ..kernel_core import ModelParams
from .grid_scheme import density_row, energy_residual, field_of, step_split
from .state import Diagnostics, ParticleEnsemble, PhaseDensity, Scheme, SolverConfig


class RunAborted(RuntimeError):
    """A step failed; ``diagnostics`` holds every step recorded before the failure."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Trajectory:
    """Snapshots with the field each one generated (or the external field)."""

    params: ModelParams
    densities: list = field(default_factory=list)
    fields: list = field(default_factory=list)

    @property
    def times(self):
        return np.array([f.time for f in self.densities])


def _field_source(config, external):
    if external is None:
        return lambda f: field_of(f, config.omega)
    if isinstance(external, FieldGrid):
        return lambda f: external
    return lambda f: external(f.time)


def _abort(err, diag, out_dir):
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        diag.to_csv(Path(out_dir) / "diagnostics.partial.csv")
    raise RunAborted(f"run aborted: {err}", diag) from err


def run(config: SolverConfig, f0, *, field=None, snapshot_every=None, snapshot_times=(), out_dir=None):
    """Evolve ``f0`` to the horizon; returns ``(Trajectory, Diagnostics)``.

    ``field`` freezes the force: a :class:`FieldGrid` or a function of time
    returning one. Snapshots are kept at the start, the end, every
    ``snapshot_every`` steps and at the steps nearest ``snapshot_times``.
    """
    if config.scheme is Scheme.PARTICLE:
        raise ValueError("use particle_run for the particle scheme")
    if not isinstance(f0, PhaseDensity):
        f0 = PhaseDensity.from_function(config.grid, f0)
    if f0.grid != config.grid and not (
        np.array_equal(f0.grid.x, config.grid.x) and np.array_equal(f0.grid.v, config.grid.v)
    ):
        raise ValueError("initial density lives on a different grid than the configuration")
    n = config.n_steps
    keep = {0, n}
    if snapshot_every:
        keep |= set(range(0, n + 1, snapshot_every))
    keep |= {int(round(t / config.dt)) for t in snapshot_times}
    source = _field_source(config, field)
    traj = Trajectory(config.params)
    diag = Diagnostics.empty(config.moment_orders)
    f = f0
    for step in range(n + 1):
        E = source(f)
        diag.record(density_row(f, E, config.moment_orders))
        if step in keep:
            traj.densities.append(f)
            traj.fields.append(E)
        if step == n:
            break
        try:
            f = step_split(f, E, config.dt, config, source)
            f = PhaseDensity(f.grid, f.values, (step + 1) * config.dt, f.clipped_mass)
        except (ValueError, RuntimeError) as err:
            _abort(err, diag, out_dir)
    diag.columns["energy_residual"] = energy_residual(
        diag["t"], diag["f_L2sq"], diag["dv_f_L2"], config.params
    ).tolist()
    return traj, diag


# particles -----------------------------------------------------------------

_INIT_STREAM = 2**64 - 1


def _philox(seed, stream):
    return np.random.Philox(key=np.array([seed % 2**64, stream], dtype=np.uint64))


def particle_normals(seed, step, start, stop, d):
    """Standard normals for particles ``start..stop-1``: particle ``i`` reads counter ``i`` of stream ``(seed, step)``."""
    start, stop = int(start), int(stop)
    bg = _philox(seed, step)
    bg.advance(start)
    raw = bg.random_raw(4 * (stop - start)).reshape(-1, 4)
    u = (raw >> np.uint64(11)).astype(float) * 2.0**-53
    r1 = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    r2 = np.sqrt(-2.0 * np.log1p(-u[:, 2]))
    z = np.stack(
        [r1 * np.cos(2 * np.pi * u[:, 1]), r1 * np.sin(2 * np.pi * u[:, 1]),
         r2 * np.cos(2 * np.pi * u[:, 3]), r2 * np.sin(2 * np.pi * u[:, 3])],
        axis=1,
    )
    return z[:, :d]


def init_generator(seed):
    """Generator for drawing initial particles, disjoint from every step stream."""
    return np.random.Generator(_philox(seed, _INIT_STREAM))


def sample_maxwellian(n, d, seed, x_var=1.0, v_var=1.0, mass=1.0, v_mean=0.0):
    g = init_generator(seed)
    x = g.normal(0.0, np.sqrt(x_var), (n, d))
    v = v_mean + g.normal(0.0, np.sqrt(v_var), (n, d))
    return ParticleEnsemble(x, v, np.full(n, mass / n), seed)


def sample_heavy_tail(n, d, seed, k0, eps=0.5, mass=1.0):
    """Velocities with density ``(1 + |v|^2)^{-(d + k0 + eps)/2}``, positions standard normal."""
    g = init_generator(seed)
    nu = k0 + eps
    x = g.normal(0.0, 1.0, (n, d))
    y = g.standard_normal((n, d)) / np.sqrt(g.chisquare(nu, n) / nu)[:, None]
    return ParticleEnsemble(x, y / np.sqrt(nu), np.full(n, mass / n), seed)


@dataclass(frozen=True)
class _Deposit:
    grid: XGrid
    lo: float
    h: float

    @classmethod
    def box(cls, half, n, d):
        grid = XGrid.cells(-half, half, n, d)
        return cls(grid, float(grid.axes[0][0]), float(grid.spacing[0]))

    def stencil(self, x):
        """Corner indices and cloud-in-cell weights; particles whose cloud leaves the grid are flagged."""
        n = self.grid.shape[0]
        s = (x - self.lo) / self.h
        i0 = np.floor(s).astype(int)
        frac = s - i0
        inside = np.all((i0 >= 0) & (i0 + 1 <= n - 1), axis=1)
        i0 = np.clip(i0, 0, n - 2)
        return i0, frac, inside

    def _corners(self, d):
        return [tuple((c >> j) & 1 for j in range(d)) for c in range(2**d)]

    def deposit(self, x, w):
        d = x.shape[1]
        shape = self.grid.shape
        i0, frac, inside = self.stencil(x)
        w = np.where(inside, w, 0.0)
        rho = np.zeros(int(np.prod(shape)))
        for corner in self._corners(d):
            c = np.array(corner)
            wt = w * np.prod(np.where(c, frac, 1.0 - frac), axis=1)
            flat = np.ravel_multi_index(tuple((i0 + c).T), shape)
            rho += np.bincount(flat, weights=wt, minlength=rho.size)
        return rho.reshape(shape) / self.grid.cell_volume, inside

    def gather(self, E: FieldGrid, x):
        d = x.shape[1]
        i0, frac, inside = self.stencil(x)
        out = np.zeros(x.shape)
        for corner in self._corners(d):
            c = np.array(corner)
            wt = np.prod(np.where(c, frac, 1.0 - frac), axis=1)
            out += wt[:, None] * E.values[tuple((i0 + c).T)]
        return np.where(inside[:, None], out, 0.0)


def _particle_row(ens: ParticleEnsemble, rho, E, inside, orders):
    w = ens.weights
    s2 = np.sum(ens.v**2, axis=1)
    row = {
        "t": ens.time,
        "mass": float(w.sum()),
        "M2": float(w @ (1 + s2)),
        "M4": float(w @ (1 + s2**2)),
        "rho_L53": lp_norm(rho, 5 / 3),
        "E_Linf": lp_norm(E, np.inf),
        "E_L2": lp_norm(E, 2),
        "escaped_mass": float(w[~inside].sum()),
        "clipped_mass": 0.0,
    }
    for k in orders:
        for j in (k, k - 2):
            if j >= 0:
                row[f"Mt{j}"] = float(w @ (1 + s2) ** (j / 2))
        row[f"E_L{3 + k}"] = lp_norm(E, 3 + k)
    return row


def particle_run(config: SolverConfig, ensemble: ParticleEnsemble, *, force=None, jobs=1, snapshot_every=None):
    """Cloud-in-cell deposition, free-space field, Euler-Maruyama update.

    Returns ``(list of ParticleEnsemble snapshots, Diagnostics, list of FieldGrid)``.
    Particles outside the deposition box carry no charge and feel no
    self-consistent force; their weight is the ``escaped_mass`` column.
    ``force(t, x)`` replaces the self-consistent field by an external one
    acting on every particle. Grid-only columns are nan.
    """
    if config.scheme is not Scheme.PARTICLE:
        raise ValueError("particle_run needs the ParticleEM scheme")
    d = config.params.dim
    if ensemble.dim != d:
        raise ValueError(f"ensemble dimension {ensemble.dim} != model dimension {d}")
    half, ncell = config.deposit
    dep = _Deposit.box(float(half), int(ncell), d)
    beta, sigma, dt = config.params.beta, config.params.sigma, config.dt
    n = config.n_steps
    keep = {0, n} | (set(range(0, n + 1, snapshot_every)) if snapshot_every else set())
    chunks = np.linspace(0, ensemble.n, max(1, jobs) + 1).astype(int)
    diag = Diagnostics.empty(config.moment_orders)
    snaps, fields = [], []
    ens = ensemble
    pool = ThreadPoolExecutor(max_workers=max(1, jobs))
    try:
        for step in range(n + 1):
            rho_vals, inside = dep.deposit(ens.x, ens.weights)
            rho = DensityGrid(dep.grid, rho_vals)
            if force is None:
                E = solve_field(rho, config.omega, edge_tol=np.inf)
            else:
                E = FieldGrid(dep.grid, force(ens.time, dep.grid.points()), config.omega)
            diag.record(_particle_row(ens, rho, E, inside, config.moment_orders))
            if step in keep:
                snaps.append(ens)
                fields.append(E)
            if step == n:
                break
            acc = dep.gather(E, ens.x) if force is None else force(ens.time, ens.x)

            def advance(a, b, ens=ens, acc=acc, step=step):
                xi = particle_normals(ens.seed, step, a, b, d)
                v = ens.v[a:b]
                return (
                    ens.x[a:b] + v * dt,
                    v + (acc[a:b] - beta * v) * dt + np.sqrt(2 * sigma * dt) * xi,
                )

            parts = list(pool.map(advance, chunks[:-1], chunks[1:]))
            x = np.concatenate([p[0] for p in parts])
            v = np.concatenate([p[1] for p in parts])
            ens = ParticleEnsemble(x, v, ens.weights, ens.seed, ens.step + 1, (step + 1) * dt)
    finally:
        pool.shutdown()
    return snaps, diag, fields
