import warnings
from dataclasses import dataclass

import numpy as np
import pytest
from scipy import special

from vpfp.field_poisson import (
    DensityGrid,
    FieldGrid,
    TruncationWarning,
    decay_fit,
    field_selfconvolution_bound,
    lp_norm,
    solve_field,
    velocity_marginal,
)
from vpfp.grids import GridError, PhaseGrid, XGrid

coarse_ok = pytest.mark.filterwarnings("ignore::vpfp.field_poisson.TruncationWarning")


@dataclass
class Sampled:
    grid: PhaseGrid
    values: np.ndarray


def gaussian_density(grid: XGrid, s=1.0, center=None):
    P = grid.points()
    c = np.zeros(grid.dim) if center is None else np.asarray(center)
    r2 = ((P - c) ** 2).sum(axis=-1)
    return DensityGrid(grid, np.exp(-r2 / (2 * s * s)) / (2 * np.pi * s * s) ** (grid.dim / 2))


def enclosed_mass_field_3d(P, s=1.0):
    r = np.linalg.norm(P, axis=-1)
    M = special.erf(r / (np.sqrt(2) * s)) - np.sqrt(2 / np.pi) * (r / s) * np.exp(-(r**2) / (2 * s * s))
    return (M / (4 * np.pi * r**3))[..., None] * P


def enclosed_mass_field_2d(P, s=1.0):
    r2 = (P**2).sum(axis=-1)
    return ((1 - np.exp(-r2 / (2 * s * s))) / (2 * np.pi * r2))[..., None] * P


class TestVelocityMarginal:
    def test_separable(self):
        grid = PhaseGrid.uniform((-3, 3), (-8, 8), 31, 161)
        X, V = grid.points()
        rho0 = 1 + np.cos(X[..., 0])
        g = np.exp(-V[..., 0] ** 2 / 2) / np.sqrt(2 * np.pi)
        rho = velocity_marginal(Sampled(grid, rho0 * g))
        assert np.allclose(rho.values, 1 + np.cos(grid.x), atol=1e-12)

    def test_zero(self):
        grid = PhaseGrid.uniform((-1, 1), (-1, 1), 5, 7, dim=2)
        assert np.all(velocity_marginal(Sampled(grid, np.zeros(grid.shape))).values == 0)

    def test_correlated_gaussian_closed_form(self):
        grid = PhaseGrid.uniform((-3, 3), (-9, 9), 25, 241)
        X, V = grid.points()
        x, v = X[..., 0], V[..., 0]
        # covariance [[1, 0.6], [0.6, 2]]: the x-marginal is N(0, 1)
        C = np.array([[1.0, 0.6], [0.6, 2.0]])
        Ci = np.linalg.inv(C)
        f = np.exp(-0.5 * (Ci[0, 0] * x * x + 2 * Ci[0, 1] * x * v + Ci[1, 1] * v * v)) / (2 * np.pi * np.sqrt(np.linalg.det(C)))
        rho = velocity_marginal(Sampled(grid, f))
        assert np.allclose(rho.values, np.exp(-grid.x**2 / 2) / np.sqrt(2 * np.pi), atol=1e-8)

    def test_mass_matches_phase_space_sum(self):
        grid = PhaseGrid.uniform((-2, 2), (-3, 3), 9, 13, dim=2)
        f = np.random.default_rng(1).random(grid.shape)
        rho = velocity_marginal(Sampled(grid, f))
        w = grid.v_weights()
        phase_mass = np.sum(f * w[None, None]) * grid.hx**2
        assert rho.total_mass == pytest.approx(phase_mass, rel=1e-13)


class TestSolveField:
    def test_slab_closed_form(self):
        grid = XGrid.cells(-2, 2, 80)
        x = grid.axes[0]
        E = solve_field(DensityGrid(grid, np.where(np.abs(x) < 1, 0.5, 0.0)), omega=1)
        ref = np.where(np.abs(x) <= 1, x / 2, np.sign(x) / 2)
        assert np.abs(E.values[:, 0] - ref).max() < 1e-10
        assert E.structural_analogue

    def test_gravitational_sign(self):
        grid = XGrid.cells(-2, 2, 40)
        rho = DensityGrid(grid, np.where(np.abs(grid.axes[0]) < 1, 0.5, 0.0))
        assert np.array_equal(solve_field(rho, -1).values, -solve_field(rho, 1).values)

    def test_gaussian_3d_enclosed_mass(self):
        grid = XGrid.cells(-6, 6, 80, dim=3)
        E = solve_field(gaussian_density(grid), omega=1)
        assert np.abs(E.values - enclosed_mass_field_3d(grid.points())).max() < 1e-4
        assert not E.structural_analogue

    def test_gaussian_2d_enclosed_mass(self):
        grid = XGrid.cells(-8, 8, 192, dim=2)
        E = solve_field(gaussian_density(grid), omega=1)
        assert np.abs(E.values - enclosed_mass_field_2d(grid.points())).max() < 1e-4

    @pytest.mark.parametrize("dim,n", [(2, 48), (3, 32)])
    @coarse_ok
    def test_gauss_law_second_order(self, dim, n):
        errs = []
        for m in (n, 2 * n):
            grid = XGrid.cells(-6, 6, m, dim=dim)
            rho = gaussian_density(grid, center=[0.3] + [0.0] * (dim - 1))
            div = solve_field(rho).divergence()
            inner = np.linalg.norm(grid.points(), axis=-1) < 3
            errs.append(np.nanmax(np.abs(div - rho.values)[inner]))
        assert errs[0] / errs[1] > 3.5

    @pytest.mark.parametrize("dim", [1, 2, 3])
    @coarse_ok
    def test_even_density_gives_odd_field(self, dim):
        grid = XGrid.cells(-4, 4, 16, dim=dim)
        P = grid.points()
        rho = DensityGrid(grid, np.exp(-(P**2).sum(-1)) * (1 + 0.5 * np.cos(3 * P[..., 0])))
        E = solve_field(rho).values
        flipped = E[tuple(slice(None, None, -1) for _ in range(dim))]
        assert np.allclose(flipped, -E, atol=1e-15)

    @coarse_ok
    def test_reflection_equivariance(self):
        grid = XGrid.cells(-4, 4, 20, dim=2)
        P = grid.points()
        rho = np.exp(-((P[..., 0] - 0.7) ** 2 + (P[..., 1] + 0.4) ** 2))
        E = solve_field(DensityGrid(grid, rho)).values
        Er = solve_field(DensityGrid(grid, rho[::-1])).values
        assert np.allclose(Er[::-1, :, 0], -E[..., 0], atol=1e-15)
        assert np.allclose(Er[::-1, :, 1], E[..., 1], atol=1e-15)

    @pytest.mark.parametrize("dim", [1, 2, 3])
    @coarse_ok
    def test_no_self_force(self, dim):
        grid = XGrid.cells(-4, 4, 20, dim=dim)
        rho = gaussian_density(grid, center=[0.5] * dim)
        E = solve_field(rho)
        force = (E.values * rho.values[..., None]).sum(axis=tuple(range(dim))) * grid.cell_volume
        assert np.abs(force).max() < 1e-14

    def test_boundary_mass_warns(self):
        grid = XGrid.cells(-2, 2, 16, dim=2)
        with pytest.warns(TruncationWarning):
            solve_field(gaussian_density(grid))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            solve_field(gaussian_density(XGrid.cells(-8, 8, 32, dim=2)))

    def test_rejects_bad_input(self):
        grid = XGrid.cells(-1, 1, 4)
        with pytest.raises(ValueError):
            DensityGrid(grid, -np.ones(4))
        with pytest.raises(GridError):
            DensityGrid(grid, np.ones(5))
        with pytest.raises(ValueError):
            solve_field(DensityGrid(grid, np.ones(4)), omega=2)


class TestNorms:
    def test_indicator_of_unit_volume(self):
        grid = XGrid.cells(0, 4, 8, dim=2)
        vals = np.zeros(grid.shape)
        vals[:2, :2] = 1.0
        for r in (1, 1.5, 2, 5, np.inf):
            assert lp_norm(DensityGrid(grid, vals), r) == pytest.approx(1.0, rel=1e-14)

    @pytest.mark.parametrize("r", [1, 5 / 3, 2, 4])
    def test_gaussian_closed_form(self, r):
        grid = XGrid.cells(-10, 10, 200, dim=2)
        s = 1.3
        rho = gaussian_density(grid, s)
        # ||N(0, s^2 I_d)||_r = (2 pi s^2)^(-d/2 (1 - 1/r)) r^(-d / (2 r))
        exact = (2 * np.pi * s * s) ** (-(1 - 1 / r)) * r ** (-1 / r)
        assert lp_norm(rho, r) == pytest.approx(exact, rel=1e-8)

    def test_log_convexity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = rng.random((6, 6)) ** 3
            n1, n2, ninf = (lp_norm(g, r, 0.1) for r in (1, 2, np.inf))
            assert n2 <= np.sqrt(n1 * ninf) * (1 + 1e-12)

    def test_density_decay_exponent_vanishes_at_five_thirds(self):
        q = 5 / 3
        assert -27 / 10 + 9 / (2 * q) == pytest.approx(0.0, abs=1e-15)

    def test_field_uses_pointwise_length(self):
        grid = XGrid.cells(0, 1, 2, dim=2)
        E = FieldGrid(grid, np.full(grid.shape + (2,), [3.0, 4.0]))
        assert lp_norm(E, np.inf) == 5.0
        assert lp_norm(E, 1) == pytest.approx(5.0)

    def test_rejects_small_exponent(self):
        with pytest.raises(ValueError):
            lp_norm(np.ones(3), 0.5, 1.0)


def radial_bump_field(grid):
    P = grid.points()
    return FieldGrid(grid, P * np.exp(-(P**2).sum(-1))[..., None])


def brute_force_selfconvolution(E: FieldGrid):
    P = E.grid.points().reshape(-1, 3)
    F = E.values.reshape(-1, 3)
    vol = E.grid.cell_volume
    out = np.empty(P.shape[0])
    for i, x in enumerate(P):
        d = P - x
        r3 = np.linalg.norm(d, axis=1) ** 3
        r3[i] = np.inf
        out[i] = np.sum((F * d).sum(axis=1) / r3) * vol
    return np.abs(out).max()


class TestSelfConvolution:
    def test_zero_field(self):
        grid = XGrid.cells(-2, 2, 8, dim=3)
        res = field_selfconvolution_bound(FieldGrid(grid, np.zeros(grid.shape + (3,))))
        assert res.value == 0 and res.certificate == 0

    def test_direct_sum_below_certificate(self):
        E = radial_bump_field(XGrid.cells(-3, 3, 14, dim=3))
        res = field_selfconvolution_bound(E)
        direct = brute_force_selfconvolution(E)
        assert direct <= res.certificate
        assert res.value <= res.certificate
        assert res.value == pytest.approx(direct, rel=0.15)

    def test_exponent_windows(self):
        E = radial_bump_field(XGrid.cells(-2, 2, 6, dim=3))
        for r, p in [(1.0, 3.5), (3.0, 3.5), (2.0, 3.0)]:
            with pytest.raises(ValueError):
                field_selfconvolution_bound(E, r, p)
        with pytest.raises(ValueError):
            field_selfconvolution_bound(FieldGrid(XGrid.cells(-1, 1, 4, dim=2), np.zeros((4, 4, 2))))


class TestDecayFit:
    def test_synthetic_power_law(self):
        t = np.geomspace(0.01, 1, 40)
        noise = np.exp(0.02 * np.random.default_rng(0).standard_normal(t.size))
        fit = decay_fit(t, 3.0 * t**-0.5 * noise)
        assert fit.alpha == pytest.approx(0.5, abs=0.02)
        assert fit.ci[0] < fit.alpha < fit.ci[1]
        assert fit.ci_width < fit.alpha

    def test_constant_series(self):
        fit = decay_fit(np.linspace(0.1, 1, 10), np.full(10, 2.0))
        assert fit.alpha == pytest.approx(0.0, abs=1e-12)
        assert fit.C == pytest.approx(2.0)

    def test_window(self):
        t = np.geomspace(0.01, 1, 40)
        y = np.where(t < 0.1, t**-1.0, 10 * (t / 0.1) ** -0.2)
        assert decay_fit(t, y, window=(0.1, 1)).alpha == pytest.approx(0.2, abs=1e-10)

    def test_errors(self):
        with pytest.raises(ValueError):
            decay_fit([1, 2, 3, 4], [1, 1, 1, 1])
        with pytest.raises(ValueError):
            decay_fit([1, 2, 3, 4, 5], [1, 1, 0, 1, 1])


class TestCsv:
    @coarse_ok
    def test_round_trip(self, tmp_path):
        grid = XGrid.cells(-2, 2, 6, dim=2)
        rho = gaussian_density(grid)
        E = solve_field(rho, omega=-1)
        rho.to_csv(tmp_path / "rho.csv")
        E.to_csv(tmp_path / "E.csv")
        rho2 = DensityGrid.from_csv(tmp_path / "rho.csv")
        E2 = FieldGrid.from_csv(tmp_path / "E.csv")
        assert np.array_equal(rho2.values, rho.values)
        assert np.array_equal(E2.values, E.values) and E2.omega == -1
        assert (tmp_path / "rho.csv").read_text().splitlines()[0] == "x1,x2,rho"
