import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate as quad
from scipy import stats

from conftest import constant_kernels, exp_density
from flocinv.domain import Grid, KernelSet, SizeDistribution, builtin_kernels, default_kernels, project
from flocinv.errors import IntegrationError, InvalidInputError
from flocinv.forward import (DiagnosticBounds, Scheme, aggregation_rhs, breakage_removal_rhs,
                             integrate, partial_moments, read_trajectory_csv, rhs, solve_batch,
                             solve_tangent, write_trajectory_csv)
from flocinv.measures import from_cdf, uniform


def zero(x):
    return np.zeros_like(np.asarray(x, float))


def decay_kernels(m):
    return KernelSet(lambda x, y: 0 * np.asarray(x) * np.asarray(y), zero,
                     lambda x: m + zero(x), 1.0)


def beta_family(a):
    return lambda dg, pg: from_cdf(lambda x, y: stats.beta.cdf(np.clip(x / y, 0, 1), a, a), dg, pg)


class TestAggregation:
    def test_zero_state(self, kernels, grid8):
        assert np.all(aggregation_rhs(SizeDistribution(grid8, np.zeros(8)), kernels) == 0)

    def test_two_cell_hand_values(self):
        kappa = 3.0
        b = SizeDistribution(Grid(2, 1.0), [1.0, 0.0])
        out = aggregation_rhs(b, constant_kernels(kappa))
        np.testing.assert_allclose(out, [-0.5 * kappa, 0.25 * kappa], rtol=1e-15)

    def test_first_has_no_gain_last_has_no_loss(self):
        g = Grid(5, 1.0)
        k = constant_kernels(1.0)
        e1 = SizeDistribution(g, [0, 0, 0, 0, 1.0])
        assert aggregation_rhs(e1, k)[-1] == 0.0  # no partner fits
        only_first = np.zeros(5)
        only_first[0] = 1.0
        out = aggregation_rhs(SizeDistribution(g, only_first), k)
        assert out[0] < 0 and out[1] > 0 and np.all(out[2:] == 0)

    def test_converges_to_continuum_operator(self):
        # b = exp(-x) with k = (x^(1/3) + y^(1/3))^3 truncated at x + y > 1
        c = 1.0
        k = builtin_kernels(c, 0, 0, 1.0)
        b = lambda x: np.exp(-x)

        def continuum(x):
            gain = quad.quad(lambda y: k.k_a(y, x - y) * b(y) * b(x - y), 0, x)[0] / 2 if x > 0 else 0.0
            loss = b(x) * quad.quad(lambda y: k.k_a(x, y) * b(y), 0, 1 - x)[0]
            return gain - loss

        errors = []
        for n in (16, 32, 64):
            g = Grid(n, 1.0)
            exact = project(np.vectorize(continuum), g, subsamples=8).alpha
            approx = aggregation_rhs(project(b, g), k)
            errors.append(g.dx * np.abs(exact - approx).sum())
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] < 0.05
        assert 1.4 < errors[1] / errors[2] < 3.0


class TestBreakageRemoval:
    def test_last_component(self):
        g = Grid(6, 1.0)
        alpha = np.zeros(6)
        alpha[-1] = 1.0
        out = breakage_removal_rhs(SizeDistribution(g, alpha), uniform(g, g),
                                   builtin_kernels(0, 0.1, 0.1, 1.0), include_diagonal=False)
        assert out[-1] == pytest.approx(-0.15, rel=1e-14)

    def test_diagonal_adds_self_daughter(self):
        g = Grid(6, 1.0)
        alpha = np.zeros(6)
        alpha[-1] = 1.0
        out = breakage_removal_rhs(SizeDistribution(g, alpha), uniform(g, g),
                                   builtin_kernels(0, 0.1, 0.1, 1.0))
        assert out[-1] == pytest.approx(-0.15 + 0.1 / 6, rel=1e-14)

    def test_no_rates_no_change(self, grid8, beta22):
        b = project(exp_density, grid8)
        out = breakage_removal_rhs(b, beta22(grid8, grid8), builtin_kernels(1e-3, 0, 0, 1.0))
        assert np.all(out == 0)

    @pytest.mark.parametrize("n", [4, 10, 33])
    def test_count_production(self, n, beta22):
        g = Grid(n, 1.0)
        k = builtin_kernels(0, 0.1, 0, 1.0)
        b = project(exp_density, g)
        out = breakage_removal_rhs(b, beta22(g, g), k)
        produced = 0.5 * g.dx * np.sum(k.matrices(g)[1] * b.alpha)
        assert g.dx * out.sum() == pytest.approx(produced, rel=1e-12)

    def test_grid_mismatch(self, kernels):
        g = Grid(4, 1.0)
        with pytest.raises(InvalidInputError):
            breakage_removal_rhs(project(exp_density, g), uniform(Grid(5, 1.0), Grid(5, 1.0)), kernels)
        with pytest.raises(InvalidInputError):
            aggregation_rhs(project(exp_density, Grid(4, 2.0)), kernels)


class TestRhs:
    @given(st.integers(2, 12), st.integers(0, 2**32 - 1))
    def test_sum_of_parts(self, n, seed):
        rng = np.random.default_rng(seed)
        g = Grid(n, 1.0)
        k = builtin_kernels(rng.uniform(0, 1e-2), rng.uniform(0, 1), rng.uniform(0, 1), 1.0)
        b = SizeDistribution(g, rng.uniform(0, 100, n))
        gamma = uniform(g, g)
        np.testing.assert_allclose(rhs(b, gamma, k),
                                   aggregation_rhs(b, k) + breakage_removal_rhs(b, gamma, k),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_state(self, kernels, grid8, beta22):
        assert np.all(rhs(SizeDistribution(grid8, np.zeros(8)), beta22(grid8, grid8), kernels) == 0)

    @given(st.integers(0, 2**32 - 1))
    def test_lipschitz_bound(self, seed):
        g = Grid(12, 1.0)
        k = default_kernels()
        gamma = from_cdf(lambda x, y: np.clip(x / y, 0, 1) ** 2, g, g)
        traj = integrate(project(exp_density, g), gamma, k, 1.0, 50)
        bounds = DiagnosticBounds.from_trajectory(traj, k, gamma)
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, bounds.c0, (2, 12))
        lhs = g.dx * np.abs(rhs(SizeDistribution(g, a), gamma, k) - rhs(SizeDistribution(g, b), gamma, k)).sum()
        assert lhs <= bounds.lipschitz_c * g.dx * np.abs(a - b).sum()

    def test_diagnostic_bounds(self, kernels, grid8, beta22):
        gamma = beta22(grid8, grid8)
        traj = integrate(project(exp_density, grid8), gamma, kernels, 1.0, 20)
        d = DiagnosticBounds.from_trajectory(traj, kernels, gamma)
        assert d.c0 == pytest.approx(np.max(traj.alphas))
        assert d.c1 == pytest.approx(3 * d.c0 * 4e-6 + 0.1)
        assert d.lipschitz_c == pytest.approx(0.1 * (0.5 + gamma.sup_density()) + d.c1)


class TestIntegrate:
    def test_linear_decay_exact(self):
        g = Grid(10, 1.0)
        m = 1.0
        b0 = project(exp_density, g)
        traj = integrate(b0, uniform(g, g), decay_kernels(m), 1.0, 100)
        exact = np.exp(-m * traj.times)[:, None] * b0.alpha
        assert np.max(np.abs(traj.alphas - exact) / exact) <= 1e-8

    def test_zero_horizon(self, kernels, grid8, beta22):
        b0 = project(exp_density, grid8)
        traj = integrate(b0, beta22(grid8, grid8), kernels, 0.0, 17)
        assert np.array_equal(traj.times, [0.0])
        assert np.array_equal(traj.final().alpha, b0.alpha)

    def test_reference_configuration(self, kernels, beta22):
        g = Grid(20, 1.0)
        b0 = project(exp_density, g)
        traj = integrate(b0, beta22(g, g), kernels, 1.0)
        assert traj.times[-1] == 1.0 and traj.times.size == 201
        assert np.array_equal(traj.alphas[0], b0.alpha)
        assert np.all(np.isfinite(traj.alphas)) and traj.is_nonnegative()

    def test_stride(self, kernels, grid8, beta22):
        b0 = project(exp_density, grid8)
        full = integrate(b0, beta22(grid8, grid8), kernels, 1.0, 10)
        thin = integrate(b0, beta22(grid8, grid8), kernels, 1.0, 10, stride=4)
        np.testing.assert_allclose(thin.times, [0, 0.4, 0.8, 1.0])
        np.testing.assert_array_equal(thin.alphas, full.alphas[[0, 4, 8, 10]])

    def test_blow_up_reports_step(self):
        g = Grid(4, 1.0)
        k = builtin_kernels(1e6, 0, 0, 1.0)
        with pytest.raises(IntegrationError) as info:
            integrate(SizeDistribution(g, [1e3] * 4), uniform(g, g), k, 1.0, 10)
        assert 1 <= info.value.step <= 10

    @pytest.mark.parametrize("t_f, n", [(-1.0, 10), (1.0, 0), (1.0, 2.5), (np.nan, 3)])
    def test_bad_time_arguments(self, kernels, grid8, t_f, n):
        with pytest.raises(InvalidInputError):
            integrate(project(exp_density, grid8), uniform(grid8, grid8), kernels, t_f, n)

    def test_rk4_step_halving(self, kernels, beta22):
        g = Grid(10, 1.0)
        k = builtin_kernels(1e-3, 1.0, 1.0, 1.0)
        b0 = project(exp_density, g)
        gamma = beta22(g, g)
        finals = [integrate(b0, gamma, k, 1.0, n).final().alpha for n in (5, 10, 20)]
        r = np.abs(finals[0] - finals[1]).sum() / np.abs(finals[1] - finals[2]).sum()
        assert 8 <= r <= 32

    def test_continuity_in_measure(self, kernels):
        g = Grid(12, 1.0)
        b0 = project(exp_density, g)
        target = integrate(b0, beta_family(2.0)(g, g), kernels, 1.0, 50).final().alpha
        gaps = [g.dx * np.abs(integrate(b0, beta_family(2 + 2.0 ** -i)(g, g), kernels, 1.0, 50).final().alpha
                              - target).sum() for i in range(6)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < gaps[0] / 20

    def test_tangent_matches_finite_differences(self, kernels, beta22):
        g = Grid(6, 1.0)
        s = Scheme(g, builtin_kernels(1e-4, 0.5, 0.1, 1.0))
        b0 = project(exp_density, g).alpha
        W = np.array(beta22(g, g).weights)
        D = np.zeros((2, 6, 6))
        D[0, 3, 1], D[0, 3, 2] = 1.0, -1.0
        D[1, 5, :] = np.linspace(-1, 1, 6)
        states, sens = solve_tangent(s, b0, W, D, 1.0, 40)
        np.testing.assert_array_equal(states, solve_batch(s, b0, W[None], 1.0, 40)[0])
        h = 1e-6
        fd = (solve_batch(s, b0, W + h * D, 1.0, 40) - solve_batch(s, b0, W - h * D, 1.0, 40)) / (2 * h)
        np.testing.assert_allclose(sens, fd, rtol=1e-6, atol=1e-8 * np.abs(states).max())


class TestObservables:
    @pytest.fixture
    def traj(self, kernels, beta22):
        g = Grid(10, 1.0)
        return integrate(project(exp_density, g), beta22(g, g), kernels, 1.0, 20)

    def test_aligned_bins(self, traj):
        obs = partial_moments(traj, traj.grid.nodes, traj.times[[0, 5, 20]])
        np.testing.assert_allclose(obs.counts, traj.grid.dx * traj.alphas[[0, 5, 20]].T, rtol=1e-14)

    def test_single_bin_is_total_count(self, traj):
        obs = partial_moments(traj, [0.0, 1.0], traj.times)
        np.testing.assert_allclose(obs.counts[0], traj.total_number(), rtol=1e-13)

    def test_against_quadrature(self, traj):
        edges = [0.0, 0.13, 0.5, 0.77, 1.0]
        times = [0.0, 0.33, 0.5, 0.999, 1.0]
        obs = partial_moments(traj, edges, times)
        for i, t in enumerate(times):
            state = np.array([np.interp(t, traj.times, traj.alphas[:, j]) for j in range(10)])
            f = lambda x: state[min(int(np.ceil(x / 0.1 - 1e-9)) - 1, 9) if x > 0 else 0]
            for j in range(4):
                ref = quad.quad(f, edges[j], edges[j + 1], points=traj.grid.nodes[1:-1], limit=200)[0]
                assert obs.counts[j, i] == pytest.approx(ref, rel=1e-12)

    def test_rejects_times_outside_span(self, traj):
        with pytest.raises(InvalidInputError):
            partial_moments(traj, traj.grid.nodes, [0.5, 1.5])
        with pytest.raises(InvalidInputError):
            partial_moments(traj, [0.0, 0.5, 1.5], [0.5])


def test_trajectory_csv_round_trip(tmp_path, kernels, beta22):
    g = Grid(5, 1.0)
    traj = integrate(project(exp_density, g), beta22(g, g), kernels, 1.0, 8)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    assert path.read_text().splitlines()[0] == "t,x_1,x_2,x_3,x_4,x_5"
    back = read_trajectory_csv(path, 1.0)
    np.testing.assert_array_equal(back.alphas, traj.alphas)
    np.testing.assert_array_equal(back.times, traj.times)
    path.write_text("time,a\n0,1\n")
    with pytest.raises(InvalidInputError):
        read_trajectory_csv(path, 1.0)
