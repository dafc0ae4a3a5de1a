import numpy as np
import pytest

from fhn_meso import model as mdl
from fhn_meso import phase_space as ps
from conftest import random_field


class TestDrift:
    def test_default_cubic_values(self):
        spec = mdl.DriftSpec()
        assert mdl.eval_drift(spec, 0.0) == 0.0
        assert mdl.eval_drift(spec, 1.0) == 0.0
        assert mdl.eval_drift(spec, 2.0) == -6.0

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            mdl.eval_drift(mdl.DriftSpec(), float("nan"))

    def test_confinement_shape_required(self):
        with pytest.raises(ValueError):
            mdl.DriftSpec(coefficients=(0.0, 1.0, 0.0, 1.0))  # positive leading
        with pytest.raises(ValueError):
            mdl.DriftSpec(coefficients=(0.0, 1.0, -1.0))  # even degree

    def test_omega_decreasing_beyond_one(self):
        spec = mdl.DriftSpec()
        v = np.linspace(1.0, 8.0, 200)
        omega = spec.omega(v)
        assert np.all(omega <= spec.omega(1.0) + 1e-14)
        assert np.all(np.diff(omega) <= 1e-14)
        omega_neg = spec.omega(-v)
        assert np.all(omega_neg <= spec.omega(-1.0) + 1e-14)

    def test_growth_ratio_finite_on_grid(self, default_model):
        report = default_model.check_assumptions(v_max=8.0)
        assert np.isfinite(report["growth_ratio_sup"])
        assert all(np.isfinite(v) for v in report["confinement_sup"].values())


class TestAdaptation:
    def test_at_origin_returns_offset(self):
        p = mdl.AdaptationParams(a=1.0, b=2.0, c=3.0)
        assert mdl.eval_adaptation(p, 0.0, 0.0) == 3.0
        assert mdl.eval_adaptation_linear(p, 0.0, 0.0) == 0.0

    def test_affine_formula(self):
        p = mdl.AdaptationParams(a=1.0, b=2.0, c=3.0)
        assert mdl.eval_adaptation(p, 1.0, 1.0) == pytest.approx(2.0)

    def test_b_positive_required(self):
        with pytest.raises(ValueError):
            mdl.AdaptationParams(b=0.0)


class TestConvolution:
    def test_zero_kernel(self, space4):
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="constant", value=0.0, mass=None),
            rho0=mdl.SpatialDensity.constant(space4), space=space4,
        )
        assert np.allclose(mdl.conv_right(model, np.ones(4)), 0.0)

    def test_unit_kernel_unit_function(self, space4):
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="constant", value=1.0, mass=None),
            rho0=mdl.SpatialDensity.constant(space4), space=space4,
        )
        assert np.allclose(mdl.conv_right(model, np.ones(4)), 1.0, atol=1e-14)

    def test_gaussian_kernel_against_dense_double_sum(self):
        space = ps.SpatialGrid(nx=33)
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="gaussian", sigma=0.1, mass=None),
            rho0=mdl.SpatialDensity.constant(space), space=space,
        )
        g = (space.x_nodes <= 0.5).astype(float)
        got = mdl.conv_right(model, g)
        # independent brute-force trapezoid double loop
        x = space.x_nodes
        wts = space.weights
        expected = np.zeros_like(x)
        for i in range(space.nx):
            for j in range(space.nx):
                expected[i] += np.exp(-0.5 * ((x[i] - x[j]) / 0.1) ** 2) * g[j] * wts[j]
        assert np.allclose(got, expected, rtol=0, atol=1e-14)

    def test_row_l1_bound_controls_convolution(self, space4):
        rng = np.random.default_rng(7)
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="exponential", lam=0.3, mass=None),
            rho0=mdl.SpatialDensity.constant(space4), space=space4,
        )
        assert np.isfinite(model.kernel_bound)
        for _ in range(20):
            g = rng.uniform(-2, 2, space4.nx)
            out = mdl.conv_right(model, g)
            assert np.abs(out).max() <= model.kernel_row_l1 * np.abs(g).max() + 1e-12

    def test_table_kernel_shape_checked(self, space4):
        spec = mdl.KernelSpec(kind="custom-table", table=((1.0,),))
        with pytest.raises(ValueError):
            spec.matrix(space4)


class TestNonlocalInteraction:
    def _model(self, space, kind="constant", value=1.0, mass=None):
        return mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind=kind, value=value, mass=mass),
            rho0=mdl.SpatialDensity.constant(space), space=space,
        )

    def test_zero_kernel_gives_zero(self, space4, grid_small):
        model = self._model(space4, value=0.0)
        rng = np.random.default_rng(0)
        mu = random_field(grid_small, space4, rng)
        assert mdl.nonlocal_interaction(model, mu, 0, 1.3) == pytest.approx(0.0)

    def test_matched_mean_voltage_cancels(self, space4, grid_small):
        from conftest import gaussian_field

        model = self._model(space4, value=1.0)
        v0 = grid_small.v_nodes[60]  # grid point => sampled mean is exact
        mu = gaussian_field(grid_small, space4, sv=0.8, cv=v0)
        got = mdl.nonlocal_interaction(model, mu, 1, float(v0))
        assert got == pytest.approx(0.0, abs=1e-10)

    def test_linear_mean_closed_form(self, grid_small):
        # Psi = 1, rho0 = 1, V(x') = x' on [0,1], v = 1  ->  1 - 1/2
        space = ps.SpatialGrid(nx=41)
        model = self._model(space, value=1.0)
        vals = np.empty((space.nx, grid_small.nv, grid_small.nw))
        gw = np.exp(-0.5 * grid_small.w_nodes**2)
        for ix, x in enumerate(space.x_nodes):
            gv = np.exp(-0.5 * ((grid_small.v_nodes - x) / 0.5) ** 2)
            vals[ix] = gv[:, None] * gw[None, :]
        mu = ps.DensityField(values=vals, grid=grid_small, space=space).normalized()
        got = mdl.nonlocal_interaction(model, mu, 5, 1.0)
        assert got == pytest.approx(0.5, abs=2e-3)  # sampled-mean quadrature error

    def test_moment_reduction_matches_full_quadrature(self, space4, grid_small):
        rng = np.random.default_rng(42)
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="gaussian", sigma=0.25, mass=1.0),
            rho0=mdl.SpatialDensity.cosine(space4), space=space4,
        )
        mu = random_field(grid_small, space4, rng)
        V = ps.macro_moments(mu).V
        wts = space4.weights
        rho = model.rho0.values
        for ix in (0, 2):
            for v in (-1.0, 0.7):
                got = mdl.nonlocal_interaction(model, mu, ix, v)
                # full double quadrature over (x', u'): (v - v') factorizes
                full = 0.0
                for j in range(space4.nx):
                    psi = model.psi_matrix[ix, j]
                    full += psi * (v - V[j]) * rho[j] * wts[j]
                assert got == pytest.approx(full, rel=1e-10, abs=1e-12)


class TestNonlocalOperatorL:
    def test_constant_function_in_kernel(self, space4):
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="gaussian", sigma=0.3, mass=1.0),
            rho0=mdl.SpatialDensity.cosine(space4), space=space4,
        )
        out = mdl.nonlocal_operator_L(model, np.full(4, 2.5))
        assert np.abs(out).max() < 1e-13

    def test_linearity(self, space4):
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="exponential", lam=0.4, mass=None),
            rho0=mdl.SpatialDensity.cosine(space4), space=space4,
        )
        rng = np.random.default_rng(3)
        V = rng.uniform(-1, 1, 4)
        out1 = mdl.nonlocal_operator_L(model, 3.0 * V)
        out2 = 3.0 * mdl.nonlocal_operator_L(model, V)
        assert np.allclose(out1, out2, atol=1e-14)

    def test_identity_kernel_linear_voltage(self):
        # Psi = 1, rho0 = 1, V(x) = x on [0,1]: L[V](x) = x - 1/2
        space = ps.SpatialGrid(nx=51)
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(), adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(kind="constant", value=1.0, mass=None),
            rho0=mdl.SpatialDensity.constant(space), space=space,
        )
        V = space.x_nodes.copy()
        got = mdl.nonlocal_operator_L(model, V)
        assert np.allclose(got, V - 0.5, atol=1e-12)


class TestNonlinearityError:
    def test_linear_drift_exact_zero(self, grid_small):
        rng = np.random.default_rng(11)
        space = ps.SpatialGrid(nx=2)
        model = mdl.ModelConfig(
            drift=mdl.DriftSpec(coefficients=(0.0, 2.0, 0.0, -1e-12)),
            adaptation=mdl.AdaptationParams(),
            kernel=mdl.KernelSpec(), rho0=mdl.SpatialDensity.constant(space),
            space=space,
        )
        mu = random_field(grid_small, space, rng)
        err = mdl.nonlinearity_error(model, mu.values[0], grid_small.v_nodes,
                                     grid_small.cell_area)
        # cubic coefficient ~1e-12 only keeps the confinement shape valid
        assert abs(err) < 1e-9

    def test_single_cell_spike(self, default_model, grid_small):
        vals = np.zeros((1, grid_small.nv, grid_small.nw))
        vals[0, 30, 40] = 1.0
        sl = vals[0] / (vals[0].sum() * grid_small.cell_area)
        err = mdl.nonlinearity_error(default_model, sl, grid_small.v_nodes,
                                     grid_small.cell_area)
        assert abs(err) < 1e-12

    def test_gaussian_matches_moment_oracle(self, default_model):
        # E[X^3] = m^3 + 3 m s^2 for X ~ N(m, s^2), so E = -3 m s^2 for v - v^3
        grid = ps.PhaseGrid(nv=256, nw=32, L_v=8.0, L_w=8.0)
        space = ps.SpatialGrid(nx=2)
        m, s = 0.6, 0.5
        gv = np.exp(-0.5 * ((grid.v_nodes - m) / s) ** 2)
        gw = np.exp(-0.5 * grid.w_nodes**2)
        vals = np.broadcast_to(gv[:, None] * gw[None, :], (2, grid.nv, grid.nw)).copy()
        mu = ps.DensityField(values=vals, grid=grid, space=space).normalized()
        err = mdl.nonlinearity_error(default_model, mu.values[0], grid.v_nodes,
                                     grid.cell_area)
        assert err == pytest.approx(-3.0 * m * s**2, rel=1e-6)

    def test_zero_mass_slice_rejected(self, default_model, grid_small):
        with pytest.raises(ValueError):
            mdl.nonlinearity_error(default_model,
                                   np.zeros((grid_small.nv, grid_small.nw)),
                                   grid_small.v_nodes, grid_small.cell_area)

    def test_vanishes_linearly_in_variance(self, default_model):
        grid = ps.PhaseGrid(nv=384, nw=16, L_v=8.0, L_w=8.0)
        space = ps.SpatialGrid(nx=2)
        m = 0.4
        errs = []
        variances = [0.16, 0.08, 0.04, 0.02]
        for var in variances:
            gv = np.exp(-0.5 * (grid.v_nodes - m) ** 2 / var)
            gw = np.exp(-0.5 * grid.w_nodes**2)
            vals = np.broadcast_to(gv[:, None] * gw[None, :], (2, grid.nv, grid.nw)).copy()
            mu = ps.DensityField(values=vals, grid=grid, space=space).normalized()
            errs.append(abs(mdl.nonlinearity_error(default_model, mu.values[0],
                                                   grid.v_nodes, grid.cell_area)))
        ratios = [errs[i] / errs[i + 1] for i in range(3)]
        assert all(1.8 < r < 2.2 for r in ratios)  # first order in the variance


class TestSpatialDensity:
    def test_bounds_enforced(self, space4):
        with pytest.raises(ValueError):
            mdl.SpatialDensity(values=np.full(4, 3.0), m_star=0.5)

    def test_cosine_within_bounds(self, space4):
        rho = mdl.SpatialDensity.cosine(space4)
        assert rho.values.min() >= rho.m_star
        assert rho.values.max() <= 1.0 / rho.m_star
