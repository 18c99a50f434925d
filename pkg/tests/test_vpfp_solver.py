import warnings

import numpy as np
import pytest

from vpfp._quadrature import gauss_hermite_2d
from vpfp.field_poisson import FieldGrid, TruncationWarning
from vpfp.grids import GridError, PhaseGrid
from vpfp.kernel_core import KernelSpec, ModelParams
from vpfp.linear_ops import FieldSampler, TableLayout, apply_T3, build_gamma
from vpfp.solver import (
    BASE_COLUMNS,
    CFLError,
    Diagnostics,
    ParticleEnsemble,
    PhaseDensity,
    RunAborted,
    Scheme,
    SolverConfig,
    TestFunction,
    free_step,
    gronwall_constant,
    kick,
    moment,
    moment_inequality_check,
    particle_normals,
    particle_run,
    refinement_ratios,
    run,
    sample_maxwellian,
    step_split,
    uniqueness_experiment,
    velocity_regularity_check,
    weak_residual,
)

BOX = PhaseGrid.periodic_box(8.0, 8.0, 64, 64, 1)
COS = FieldSampler(lambda t, x: 0.6 * np.cos(2 * x) + 0.3, name="cos")


def maxwellian(x_var=1.0, v_var=1.0, v_mean=0.0):
    def f0(X, V):
        d = X.shape[-1]
        q = np.sum(X**2, axis=-1) / x_var + np.sum((V - v_mean) ** 2, axis=-1) / v_var
        return np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(x_var * v_var)) ** d

    return f0


def two_bumps(X, V):
    x, v = X[..., 0], V[..., 0]
    a = np.exp(-((x - 1.2) ** 2) - 0.5 * (v + 0.4) ** 2)
    b = np.exp(-((x + 1.0) ** 2) / 0.5 - 0.5 * (v - 0.3) ** 2 / 0.7)
    return (a + b) / 8.0


def config(grid=BOX, dt=0.02, horizon=0.5, scheme=Scheme.STRANG, omega=-1, beta=1.0, sigma=1.0, **kw):
    return SolverConfig(ModelParams(beta, sigma, grid.dim, horizon), omega, dt, scheme, grid, **kw)


def frozen(grid, fn):
    X = grid.x_grid.points()
    return FieldGrid(grid.x_grid, np.stack([fn(X[..., i]) for i in range(grid.dim)], axis=-1))


def stats(values, grid):
    X, V = grid.points()
    cv = grid.cell_volume
    m = values.sum() * cv
    mv = np.sum(values * V[..., 0]) * cv / m
    var = np.sum(values * (V[..., 0] - mv) ** 2) * cv / m
    return m, mv, var


class TestFreeStep:
    @pytest.mark.parametrize("beta", [0.0, 0.5, 2.0])
    def test_variance_follows_ou_recursion(self, beta):
        sigma, dt, s0 = 0.7, 0.3, 0.6
        f = maxwellian(1.0, s0, 0.5)(*BOX.points())
        out = free_step(f, BOX, ModelParams(beta, sigma, 1), dt)
        e = np.exp(-beta * dt)
        ou = 2 * sigma * dt if beta == 0 else sigma / beta * (1 - e**2)
        m, mv, var = stats(out, BOX)
        assert m == pytest.approx(stats(f, BOX)[0], abs=1e-13)
        # without friction the sheared tails reach the box corners at the 1e-12 level
        assert mv == pytest.approx(0.5 * e, abs=1e-11)
        assert var == pytest.approx(s0 * e**2 + ou, abs=1e-11)

    def test_semigroup(self):
        p = ModelParams(1.0, 0.8, 1)
        f = maxwellian(1.0, 0.8, 0.3)(*BOX.points())
        one = free_step(f, BOX, p, 0.2)
        two = free_step(free_step(f, BOX, p, 0.1), BOX, p, 0.1)
        assert np.abs(one - two).max() < 1e-15

    def test_position_mean_follows_transport(self):
        f = maxwellian(0.5, 1.0, 0.5)(*BOX.points())
        out = free_step(f, BOX, ModelParams(1.0, 1.0, 1), 0.4)
        X, _ = BOX.points()
        cv = BOX.cell_volume
        assert np.sum(out * X[..., 0]) * cv == pytest.approx(0.5 * (1 - np.exp(-0.4)), rel=1e-12)

    def test_two_dimensional_coordinates_are_independent(self):
        g = PhaseGrid.periodic_box(8.0, 6.0, 40, 40, 2)
        f = maxwellian(1.0, 0.5)(*g.points())
        out = free_step(f, g, ModelParams(1.0, 1.0, 2), 0.25)
        _, V = g.points()
        cv = g.cell_volume
        var = np.sum(out * V[..., 0] ** 2) * cv
        assert var == pytest.approx(0.5 * np.exp(-0.5) + (1 - np.exp(-0.5)), rel=1e-10)
        assert out.sum() * cv == pytest.approx(f.sum() * cv, abs=1e-13)


class TestKick:
    def test_constant_force_shifts_velocity_mean(self):
        f = maxwellian()(*BOX.points())
        E = frozen(BOX, lambda x: np.full_like(x, 0.7))
        for dt in (0.1, 0.01):
            _, mv, var = stats(kick(f, BOX, E, dt), BOX)
            assert mv == pytest.approx(0.7 * dt, abs=1e-12)
            assert var == pytest.approx(1.0, rel=1e-10)

    def test_shift_depends_on_position(self):
        X, V = BOX.points()
        f = maxwellian(1.0, 0.6, 0.5)(X, V)
        E = frozen(BOX, lambda x: 0.3 * np.cos(x))
        out = kick(f, BOX, E, 0.1)
        exact = maxwellian(1.0, 0.6)(X, V - 0.5 - 0.03 * np.cos(X))
        assert np.abs(out - exact).max() < 1e-14

    def test_lie_and_strang_differ_at_second_order(self):
        E = frozen(BOX, lambda x: 0.6 * np.cos(2 * x) + 0.3)
        f = PhaseDensity.from_function(BOX, two_bumps)
        gaps = []
        for dt in (0.1, 0.05, 0.025):
            s = step_split(f, E, dt, config(dt=dt))
            h = dt / 2
            lie = config(dt=h, scheme=Scheme.LIE)
            two = step_split(step_split(f, E, h, lie), E, h, lie)
            gaps.append(np.abs(s.values - two.values).sum() * BOX.cell_volume)
        slopes = np.log2(np.array(gaps[:-1]) / gaps[1:])
        assert np.all(slopes > 1.8)


class TestRun:
    def test_mass_conserved_over_100_steps(self):
        grid = PhaseGrid.periodic_box(8.0, 8.0, 128, 64, 1)
        traj, diag = run(config(grid=grid, dt=0.01, horizon=1.0), maxwellian(0.25))
        m = diag["mass"]
        assert np.abs(m - m[0]).max() < 1e-10
        assert diag["clipped_mass"][-1] < 1e-12
        assert traj.times[-1] == pytest.approx(1.0, abs=1e-15)

    def test_diagnostic_columns_and_finiteness(self):
        _, diag = run(config(horizon=0.2), maxwellian(0.5))
        assert list(diag.columns)[:10] == list(BASE_COLUMNS)
        for name in diag.columns:
            assert np.all(np.isfinite(diag[name])), name
        assert np.all(np.diff(diag["t"]) > 0)
        assert len(diag) == 11

    def test_energy_residual_shrinks_with_dt(self):
        res = []
        for dt in (0.04, 0.02):
            _, diag = run(config(dt=dt, horizon=0.4, omega=1), two_bumps)
            res.append(np.abs(diag["energy_residual"]).max() / diag["f_L2sq"][0])
        assert res[1] < res[0] / 3
        assert res[1] < 1e-3

    @pytest.mark.parametrize("scheme,order", [(Scheme.STRANG, 1.9), (Scheme.LIE, 0.9)])
    def test_splitting_order(self, scheme, order):
        errs = []
        for dt in (0.1, 0.05, 0.025):
            cfg = config(dt=dt, horizon=0.4, scheme=scheme)
            ref = config(dt=dt / 4, horizon=0.4, scheme=scheme)
            a = run(cfg, two_bumps)[0].densities[-1].values
            b = run(ref, two_bumps)[0].densities[-1].values
            errs.append(np.abs(a - b).sum() * BOX.cell_volume)
        slope = np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(errs), 1)[0]
        assert slope >= order

    def test_frozen_field_matches_perturbed_kernel(self):
        T, s2 = 0.25, 0.3
        grid = PhaseGrid.periodic_box(8.0, 8.0, 128, 128, 1)
        p = ModelParams(1.0, 1.0, 1, T)
        E = frozen(grid, lambda x: COS(0.0, x))
        traj, _ = run(SolverConfig(p, dt=0.0125, grid=grid), maxwellian(s2, s2), field=E)

        def g(x, v):
            return np.exp(-((x - 0.2) ** 2) - 0.5 * v**2)

        X, V = grid.points()
        lhs = np.sum(traj.densities[-1].values * g(X[..., 0], V[..., 0])) * grid.cell_volume
        zeta, w = gauss_hermite_2d(6)
        sources = [(np.sqrt(s2) * a, np.sqrt(s2) * b, 0.0) for a, b in zeta]
        table = build_gamma(
            KernelSpec("ForwardH", p), COS, sources=sources, t_end=T,
            layout=TableLayout(n_xi=14, n_levels=7, n_theta=10), tol=1e-9,
        )
        assert lhs == pytest.approx(w @ apply_T3(g, table, T), rel=1e-5)

    def test_cfl_violation(self):
        f = PhaseDensity.from_function(BOX, maxwellian())
        E = frozen(BOX, lambda x: np.full_like(x, 40.0))
        with pytest.raises(CFLError, match="velocity spacing"):
            step_split(f, E, 0.1, config(dt=0.1))

    def test_small_box_aborts_with_partial_diagnostics(self, tmp_path):
        tight = PhaseGrid.periodic_box(8.0, 2.5, 32, 32, 1)
        with pytest.raises(RunAborted, match="boundary layer") as info:
            run(config(grid=tight, horizon=0.5, sigma=2.0), maxwellian(v_var=0.3), out_dir=tmp_path)
        assert len(info.value.diagnostics) >= 1
        back = Diagnostics.from_csv(tmp_path / "diagnostics.partial.csv")
        assert len(back) == len(info.value.diagnostics)

    def test_rejects_bad_configurations(self):
        with pytest.raises(ValueError, match="dt"):
            config(dt=0.0)
        with pytest.raises(GridError, match="periodic"):
            config(grid=PhaseGrid.uniform((-5, 5), (-5, 5), 16, 16))
        with pytest.raises(ValueError, match="particle-only"):
            SolverConfig(ModelParams(dim=3), grid=PhaseGrid.periodic_box(4, 4, 4, 4, 3))
        with pytest.raises(ValueError, match="multiple"):
            _ = config(dt=0.3, horizon=1.0).n_steps

    def test_grid_and_particles_agree(self):
        grid = PhaseGrid.periodic_box(8.0, 8.0, 128, 96, 1)
        T, n = 0.5, 200_000
        traj, gdiag = run(config(grid=grid, dt=0.01, horizon=T), maxwellian(0.25))
        pc = SolverConfig(ModelParams(1.0, 1.0, 1, T), -1, 0.005, Scheme.PARTICLE, n_particles=n, deposit=(6.0, 48))
        runs = [particle_run(pc, sample_maxwellian(n, 1, seed, x_var=0.25)) for seed in (1, 2)]
        dep = runs[0][2][-1].grid
        xc = dep.axes[0]
        fg = traj.densities[-1]
        rho_g = np.interp(xc, grid.x, fg.values.sum(axis=1) * grid.hv)
        h = dep.spacing[0]
        rhos = []
        for snaps, diag, fields in runs:
            from vpfp.solver.run import _Deposit

            rhos.append(_Deposit.box(6.0, 48, 1).deposit(snaps[-1].x, snaps[-1].weights)[0])
        noise = np.abs(rhos[0] - rhos[1]).sum() * h / np.sqrt(2)
        assert np.abs(rhos[0] - rho_g).sum() * h < 3 * noise
        v = runs[0][0][-1].v[:, 0]
        se = np.std(1 + v**2) / np.sqrt(n)
        assert abs(runs[0][1]["M2"][-1] - gdiag["M2"][-1]) < 3 * se


class TestParticles:
    def test_mean_velocity_decays_with_friction(self):
        n, dt = 100_000, 0.01
        pc = SolverConfig(ModelParams(1.0, 0.5, 1, 1.0), 1, dt, Scheme.PARTICLE, n_particles=n)
        ens = ParticleEnsemble(np.zeros((n, 1)), np.ones((n, 1)), np.full(n, 1 / n), 3)
        snaps, diag, _ = particle_run(pc, ens, force=lambda t, x: np.zeros(x.shape))
        v = snaps[-1].v[:, 0]
        se = v.std() / np.sqrt(n)
        assert abs(v.mean() - (1 - dt) ** 100) < 3 * se
        assert abs((1 - dt) ** 100 - np.exp(-1.0)) < dt

    def test_single_particle(self):
        pc = SolverConfig(ModelParams(1.0, 1.0, 1, 0.1), 1, 0.01, Scheme.PARTICLE, n_particles=1)
        ens = ParticleEnsemble([[0.0]], [[1.0]], [1.0], 0)
        snaps, diag, _ = particle_run(pc, ens)
        assert len(snaps) == 2 and np.isfinite(snaps[-1].v).all()
        assert diag["mass"][-1] == 1.0

    def test_velocity_variance_follows_ou_law(self):
        n, dt, beta, sigma = 200_000, 0.005, 1.0, 0.8
        pc = SolverConfig(ModelParams(beta, sigma, 2, 1.0), 1, dt, Scheme.PARTICLE, n_particles=n)
        ens = ParticleEnsemble(np.zeros((n, 2)), np.zeros((n, 2)), np.full(n, 1 / n), 11)
        snaps, _, _ = particle_run(pc, ens, force=lambda t, x: np.zeros(x.shape))
        v = snaps[-1].v[:, 0]
        target = sigma / beta * (1 - np.exp(-2 * beta))
        se = v.var() * np.sqrt(2.0 / n)
        assert abs(v.var() - target) < 3 * se

    def test_weights_conserved_and_escape_tracked(self):
        n = 5000
        pc = SolverConfig(ModelParams(1.0, 1.0, 1, 0.5), 1, 0.05, Scheme.PARTICLE, n_particles=n, deposit=(1.0, 16))
        ens = sample_maxwellian(n, 1, 4)
        snaps, diag, _ = particle_run(pc, ens)
        assert snaps[-1].weights.sum() == ens.weights.sum()
        assert diag["escaped_mass"][-1] > 0.1
        assert np.all(np.isnan(diag["dv_f_L2"]))

    def test_deterministic_across_workers(self):
        n = 20_000
        pc = SolverConfig(ModelParams(1.0, 1.0, 2, 0.2), -1, 0.02, Scheme.PARTICLE, n_particles=n, deposit=(6.0, 24))
        ens = sample_maxwellian(n, 2, 9)
        a = particle_run(pc, ens, jobs=1)
        b = particle_run(pc, ens, jobs=8)
        assert np.array_equal(a[0][-1].v, b[0][-1].v)
        assert a[1].columns == b[1].columns
        c = particle_run(pc, sample_maxwellian(n, 2, 10))
        assert not np.array_equal(a[0][-1].v, c[0][-1].v)

    def test_noise_stream_is_per_particle(self):
        full = particle_normals(5, 7, 0, 100, 3)
        part = particle_normals(5, 7, 40, 60, 3)
        assert np.array_equal(full[40:60], part)
        z = particle_normals(1, 0, 0, 200_000, 1)[:, 0]
        assert abs(z.mean()) < 0.01 and abs(z.var() - 1) < 0.01

    def test_rejects_bad_ensembles(self):
        with pytest.raises(ValueError, match="at least one"):
            ParticleEnsemble(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0), 0)
        with pytest.raises(ValueError, match="inconsistent"):
            ParticleEnsemble(np.zeros((3, 1)), np.zeros((2, 1)), np.ones(3), 0)


class TestMoment:
    def test_order_zero_is_twice_mass(self):
        f = PhaseDensity.from_function(BOX, maxwellian())
        assert moment(f, 0) == pytest.approx(2 * f.mass, rel=1e-14)

    def test_gaussian_in_three_dimensions(self):
        g = PhaseGrid.periodic_box(3.0, 7.0, 4, 28, 3)
        s2 = 0.8

        def f0(X, V):
            return np.exp(-0.5 * np.sum(V**2, axis=-1) / s2) / (2 * np.pi * s2) ** 1.5 / 6.0**3

        f = PhaseDensity.from_function(g, f0)
        assert moment(f, 2) == pytest.approx(1 + 3 * s2, rel=1e-10)

    def test_second_moment_is_mass_plus_kinetic(self):
        f = PhaseDensity.from_function(BOX, maxwellian(1.0, 0.7, 0.3))
        _, V = BOX.points()
        kinetic = np.sum(f.values * V[..., 0] ** 2) * BOX.cell_volume
        assert moment(f, 2) == pytest.approx(f.mass + kinetic, rel=1e-14)
        assert moment(f, 2, bracket=True) == pytest.approx(moment(f, 2), rel=1e-14)

    def test_tail_warning(self):
        g = PhaseGrid.periodic_box(8.0, 3.0, 32, 24, 1)
        f = PhaseDensity.from_function(g, maxwellian())
        with pytest.warns(TruncationWarning, match="velocity-edge"):
            moment(f, 4)

    def test_negative_order(self):
        with pytest.raises(ValueError):
            moment(PhaseDensity.from_function(BOX, maxwellian()), -1)


class TestMomentInequality:
    def test_exponent(self):
        _, diag = run(config(horizon=0.2, moment_orders=(2,)), maxwellian(0.5))
        assert moment_inequality_check(diag, 2).exponent == pytest.approx(4 / 5)

    def test_free_diffusion_constant_from_laplacian(self):
        # beta = 0, E = 0: d/dt Mt_k = sigma int f Lap <v>^k <= sigma k (d + k - 2) Mt_{k-2}
        sigma = 0.6
        cfg = config(horizon=0.5, beta=0.0, sigma=sigma, moment_orders=(2, 4), dt=0.05)
        zero = frozen(BOX, np.zeros_like)
        _, diag = run(cfg, maxwellian(0.5, 0.5), field=zero)
        for k in (2, 4):
            res = moment_inequality_check(diag, k)
            assert np.all(res.slack >= 0)
            assert 0 < res.C <= sigma * k * (1 + k - 2) * (1 + 1e-6)

    def test_missing_columns(self):
        _, diag = run(config(horizon=0.1, moment_orders=(2,)), maxwellian(0.5))
        with pytest.raises(KeyError, match="Mt6"):
            moment_inequality_check(diag, 6)


class TestWeakResidual:
    def test_zero_solution(self):
        grid = PhaseGrid.periodic_box(4.0, 4.0, 16, 16, 1)
        traj, _ = run(config(grid=grid, horizon=0.2), lambda X, V: np.zeros(X.shape[:-1]))
        assert weak_residual(traj, TestFunction.gaussian(0.2)) == 0.0

    def test_manufactured_frozen_field_converges(self):
        E = frozen(BOX, lambda x: 0.6 * np.cos(2 * x) + 0.3)
        phi = TestFunction.gaussian(0.5, 0.3, 0.8, -0.2, 0.9)
        res = []
        for dt in (0.1, 0.05, 0.025):
            traj, _ = run(config(dt=dt), two_bumps, field=E, snapshot_every=1)
            res.append(abs(weak_residual(traj, phi)))
        slope = np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(res), 1)[0]
        assert slope >= 1.8

    def test_locality(self):
        # f supported in |v| < 1 for all time; psi lives in v > 2
        grid = PhaseGrid.periodic_box(4.0, 4.0, 32, 64, 1)
        X, V = grid.points()
        v = V[..., 0]
        bump = np.where(np.abs(v) < 1, np.exp(-1 / np.maximum(1 - v**2, 1e-300)), 0.0) * np.exp(-X[..., 0] ** 2)
        fields = [frozen(grid, np.zeros_like)] * 5
        from vpfp.solver import Trajectory

        traj = Trajectory(ModelParams(), [PhaseDensity(grid, bump, t) for t in np.linspace(0, 1, 5)], fields)
        phi = TestFunction.gaussian(1.0, 0.0, 1.0, 0.2, 0.7)

        def off(y):
            s = y[..., 0] - 3.0
            return np.where(np.abs(s) < 0.9, np.exp(-1 / np.maximum(0.81 - s**2, 1e-300)), 0.0)

        psi = TestFunction(1.0, phi.w, phi.dw, phi.h, phi.dh, off, lambda y: np.zeros(y.shape) + 0 * y, lambda y: 0 * y[..., 0])
        assert weak_residual(traj, [phi, psi]) == weak_residual(traj, phi)

    def test_test_function_must_vanish_at_end(self):
        phi = TestFunction.gaussian(1.0)
        with pytest.raises(ValueError, match="vanish"):
            TestFunction(1.0, lambda t: 1.0, phi.dw, phi.h, phi.dh, phi.r, phi.dr, phi.lap_r)


class TestUniqueness:
    base = config(grid=PhaseGrid.periodic_box(8.0, 8.0, 64, 48, 1), dt=0.05, horizon=0.5)

    def test_identical_configs(self):
        res = uniqueness_experiment((self.base, self.base), two_bumps)
        assert res.sup_Ew == 0.0 and res.w_L2.max() == 0.0
        assert res.gronwall_C == 0.0

    def test_refinement_shrinks_field_gap(self):
        sups, ratios = refinement_ratios(self.base, two_bumps, levels=3)
        assert np.all(ratios >= 2)

    def test_gronwall_consistency(self):
        res = uniqueness_experiment((self.base, self.base.refined()), two_bumps)
        assert np.isfinite(res.gronwall_C) and res.gronwall_C > 0
        assert res.Ew_L2[0] < 1e-12 * res.sup_Ew + 1e-15 or res.times[0] == 0.0

    def test_gronwall_constant_of_power_law(self):
        s = np.linspace(0.01, 1, 200)
        u = s ** (3 / 20)
        C = gronwall_constant(s, u)
        assert np.isfinite(C)
        assert gronwall_constant(s, np.zeros_like(s)) == 0.0

    def test_mismatched_horizons(self):
        other = config(grid=self.base.grid, dt=0.05, horizon=1.0)
        with pytest.raises(ValueError, match="horizons"):
            uniqueness_experiment((self.base, other), two_bumps)


class TestVelocityRegularity:
    @staticmethod
    def rough(X, V):
        return np.where(np.abs(V[..., 0]) < 1.0, 0.5, 0.0) * np.exp(-0.5 * X[..., 0] ** 2) / np.sqrt(2 * np.pi)

    def test_smooth_data_bounded(self):
        _, diag = run(config(horizon=0.5), maxwellian(0.5))
        res = velocity_regularity_check(diag)
        assert np.isfinite(res.integral) and res.integrable
        assert diag["dv_f_L2"].max() < 2 * diag["dv_f_L2"][0]

    def test_rough_data_integrable_and_stable(self):
        exps = []
        for n in (128, 256):
            grid = PhaseGrid.periodic_box(8.0, 8.0, 32, n, 1)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, diag = run(config(grid=grid, dt=0.005, horizon=0.4, omega=1), self.rough)
            res = velocity_regularity_check(diag, window=(0.02, 0.1))
            assert res.integrable and np.isfinite(res.integral)
            exps.append(res.exponent)
        assert abs(exps[0] - exps[1]) < 0.05
        assert 0.1 < exps[1] < 1 / (10 / 7)

    def test_conjugate_exponent_threshold(self):
        p = 10 / 3 + 1e-3
        pp = p / (p - 1)
        assert pp < 10 / 7 and 7 * pp / 10 < 1

    def test_missing_column(self):
        with pytest.raises(KeyError):
            velocity_regularity_check(Diagnostics({"t": [0.0, 1.0]}))


class TestFormats:
    def test_snapshot_round_trip(self, tmp_path):
        f = PhaseDensity.from_function(BOX, two_bumps, time=0.3)
        f.save(tmp_path / "f.bin")
        back = PhaseDensity.load(tmp_path / "f.bin")
        assert np.array_equal(back.values, f.values) and back.time == 0.3 and back.grid.periodic

    def test_diagnostics_csv_round_trip(self, tmp_path):
        _, diag = run(config(horizon=0.1), maxwellian(0.5))
        diag.to_csv(tmp_path / "d.csv")
        back = Diagnostics.from_csv(tmp_path / "d.csv")
        assert back.columns == {k: list(v) for k, v in diag.columns.items()}

    def test_negative_values_are_clipped_and_reported(self):
        vals = two_bumps(*BOX.points())
        vals[3, 4] = -0.5
        f = PhaseDensity(BOX, vals)
        assert f.values.min() == 0.0
        assert f.clipped_mass == pytest.approx(0.5 * BOX.cell_volume)

    def test_diagnostics_are_time_monotone(self):
        d = Diagnostics.empty((2,))
        d.record({"t": 0.0})
        with pytest.raises(ValueError, match="advance"):
            d.record({"t": 0.0})
