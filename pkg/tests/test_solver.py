import numpy as np
import pytest

from msra import (
    ConstraintEstimator,
    GaussianModel,
    NonUniqueAllocationError,
    QuadratureOracle,
    ScenarioSet,
    SolverError,
    kkt_residual,
    ph1,
    quadratic_systemic,
    risk_measure,
    simulate_gaussian,
    solve_allocation,
)
from msra.loss import LossSpec
from msra.solver import InfeasibleError

from conftest import SEED, bivariate_gaussian, trivariate_gaussian

ROOT3 = np.sqrt(3.0)
T_STAR = (ROOT3 - 1.0) / 2.0  # positive root of 2t^2 + 2t - 1 = 0


def zero_scenarios(d: int = 2, n: int = 4) -> ScenarioSet:
    return ScenarioSet(np.zeros((n, d)), seed=0, model_tag="zeros")


class TestDeterministicClosedForm:
    def test_x_zero_allocation_and_risk(self):
        est = ConstraintEstimator(zero_scenarios(), quadratic_systemic(1.0, 2))
        res = solve_allocation(est, tol=1e-12, accept_nonunique=True)
        assert abs(res.risk - (1.0 - ROOT3)) <= 1e-8
        assert np.max(np.abs(res.m_star - (-T_STAR))) <= 1e-8
        assert res.uniqueness_flag == "suspect_nonunique"

    def test_x_zero_flags_without_opt_in(self):
        est = ConstraintEstimator(zero_scenarios(), quadratic_systemic(1.0, 2))
        with pytest.raises(NonUniqueAllocationError):
            solve_allocation(est, tol=1e-12)

    def test_analytic_point_has_zero_residual(self):
        # lam* = 1/sqrt(3) from lam (1 + 2 t*) = 1
        est = ConstraintEstimator(zero_scenarios(), quadratic_systemic(1.0, 2))
        res = kkt_residual(est, np.array([-T_STAR, -T_STAR]), 1.0 / ROOT3)
        assert np.max(np.abs(res)) <= 1e-12

    def test_small_lambda_residual_direction(self):
        est = ConstraintEstimator(zero_scenarios(), quadratic_systemic(1.0, 2))
        res = kkt_residual(est, np.array([-T_STAR, -T_STAR]), 1e-9)
        assert np.allclose(res[:2], -1.0, atol=1e-6)

    def test_full_allocation_identity(self):
        est = ConstraintEstimator(zero_scenarios(), quadratic_systemic(1.0, 2))
        res = solve_allocation(est, tol=1e-12, accept_nonunique=True)
        assert res.risk == res.m_star.sum()


class TestGaussianSolves:
    def test_bivariate_reference_value(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        res = solve_allocation(est)
        assert np.max(np.abs(res.m_star + 0.103)) <= 0.012  # 3 sigma at n = 2e5
        assert abs(res.constraint_value) <= 10 * res.mc_standard_error
        assert res.lambda_star > 0

    def test_residual_at_output_below_tol(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        tol = 1e-6
        res = solve_allocation(est, tol=tol)
        stacked = kkt_residual(est, res.m_star, res.lambda_star)
        assert np.max(np.abs(stacked)) <= 10 * tol

    def test_init_independence(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        tol = 1e-6
        a = solve_allocation(est, init=np.array([2.0, -1.0]), tol=tol)
        b = solve_allocation(est, init=np.array([-0.5, 0.7]), tol=tol)
        assert np.max(np.abs(a.m_star - b.m_star)) <= 100 * tol

    def test_newton_and_sqp_agree(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        tol = 1e-6
        newton = solve_allocation(est, tol=tol, method="kkt")
        sqp = solve_allocation(est, tol=tol, method="sqp")
        assert np.max(np.abs(newton.m_star - sqp.m_star)) <= 100 * tol
        assert newton.method == "kkt" and sqp.method == "sqp"

    def test_alpha_zero_invariant_in_correlation(self):
        risks = []
        for rho in (-0.9, 0.0, 0.9):
            scn = bivariate_gaussian(rho, 200_000)
            est = ConstraintEstimator(scn, quadratic_systemic(0.0, 2))
            risks.append(solve_allocation(est).risk)
        assert max(risks) - min(risks) <= 0.02
        assert abs(risks[1] / 2 + 0.173) <= 0.012

    def test_risk_increases_with_dependence(self):
        risks = []
        for rho in (-0.9, 0.0, 0.9):
            scn = bivariate_gaussian(rho, 100_000)
            est = ConstraintEstimator(scn, quadratic_systemic(1.0, 2))
            risks.append(risk_measure(est))
        assert risks[0] < risks[1] < risks[2]

    def test_quadrature_route_matches_mc(self):
        oracle = QuadratureOracle(GaussianModel(np.zeros(2), np.eye(2)),
                                  quadratic_systemic(1.0, 2))
        res = solve_allocation(oracle, tol=1e-10)
        scn = bivariate_gaussian(0.0, 2_000_000)
        mc = solve_allocation(ConstraintEstimator(scn, quadratic_systemic(1.0, 2)))
        assert np.max(np.abs(res.m_star - mc.m_star)) <= 3.5 * np.max(mc.alloc_standard_errors)


class TestInvariances:
    def test_translation_covariance(self, std_normal_2d_small):
        spec = quadratic_systemic(1.0, 2)
        tol = 1e-6
        r = np.array([0.5, -0.2])
        base = solve_allocation(ConstraintEstimator(std_normal_2d_small, spec), tol=tol)
        shifted = ScenarioSet(std_normal_2d_small.data + r, seed=0, model_tag="s")
        moved = solve_allocation(ConstraintEstimator(shifted, spec), tol=tol)
        assert np.max(np.abs(moved.m_star - base.m_star - r)) <= 2e-4
        assert abs(moved.risk - base.risk - r.sum()) <= 2e-4

    @pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
    def test_positive_homogeneity_ph1(self, std_normal_2d_small, lam):
        spec = ph1(0.5, 1.0, 2)
        base = solve_allocation(ConstraintEstimator(std_normal_2d_small, spec))
        scaled = ScenarioSet(lam * std_normal_2d_small.data, seed=0, model_tag="s")
        res = solve_allocation(ConstraintEstimator(scaled, spec))
        assert np.max(np.abs(res.m_star - lam * base.m_star)) <= 5e-4 * max(lam, 1.0)

    def test_permutation_equivariance(self):
        scn = trivariate_gaussian(0.5, 100_000)
        spec = quadratic_systemic(1.0, 3)
        tol = 1e-6
        base = solve_allocation(ConstraintEstimator(scn, spec), tol=tol)
        perm = [2, 0, 1]
        permuted = ScenarioSet(scn.data[:, perm], seed=0, model_tag="p")
        res = solve_allocation(ConstraintEstimator(permuted, spec), tol=tol)
        assert np.max(np.abs(res.m_star - base.m_star[perm])) <= 100 * tol

    def test_c2_depends_only_on_marginals(self, std_normal_2d_small):
        spec = LossSpec(family="c2", d=2, kernels=("quad", "quad"))
        tol = 1e-8
        base = solve_allocation(ConstraintEstimator(std_normal_2d_small, spec), tol=tol)
        rng = np.random.default_rng(3)
        shuffled = std_normal_2d_small.data.copy()
        shuffled[:, 1] = shuffled[rng.permutation(shuffled.shape[0]), 1]
        res = solve_allocation(
            ConstraintEstimator(ScenarioSet(shuffled, seed=0, model_tag="s"), spec), tol=tol
        )
        assert np.max(np.abs(res.m_star - base.m_star)) <= 1e-6


class TestConstraintsAndDiagnostics:
    def test_positivity_box(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        free = solve_allocation(est)
        assert np.any(free.m_star < 0.0)
        boxed = solve_allocation(est, positivity=True)
        assert np.all(boxed.m_star >= -1e-12)
        assert boxed.risk >= free.risk - 1e-9
        assert est.estimate(boxed.m_star).value <= 1e-6

    def test_infeasible_estimator_diagnosed(self):
        class AlwaysBad:
            d = 2

            def estimate(self, m):
                from msra.estimators import EstimateResult
                return EstimateResult(value=1.0, grad=np.zeros(2), hess=np.eye(2), se=0.0)

            def initial_point(self):
                return np.zeros(2)

        with pytest.raises(InfeasibleError, match="unbounded"):
            solve_allocation(AlwaysBad(), tol=1e-8)

    def test_never_active_constraint_diagnosed(self):
        # constraint slack everywhere: the program is unbounded below and the
        # solver must surface a diagnostic carrying the last iterate
        class NeverActive:
            d = 2

            def estimate(self, m):
                from msra.estimators import EstimateResult
                return EstimateResult(value=-1.0, grad=-np.ones(2), hess=np.eye(2), se=0.0)

            def initial_point(self):
                return np.zeros(2)

        with pytest.raises(SolverError) as err:
            solve_allocation(NeverActive(), tol=1e-8)
        assert err.value.m is not None
        assert err.value.residual is not None

    def test_c1_minimum_norm_selection(self, std_normal_2d_small):
        spec = LossSpec(family="c1", d=2, kernel="exp")
        est = ConstraintEstimator(std_normal_2d_small, spec)
        with pytest.raises(NonUniqueAllocationError):
            solve_allocation(est)
        res = solve_allocation(est, accept_nonunique=True,
                               init=np.array([1.5, -0.5]))
        assert res.uniqueness_flag == "suspect_nonunique"
        # minimum-norm representative of the flat zero-sum family is symmetric
        assert abs(res.m_star[0] - res.m_star[1]) <= 1e-6

    def test_lambda_positive_enforced(self, std_normal_2d_small):
        est = ConstraintEstimator(std_normal_2d_small, quadratic_systemic(1.0, 2))
        with pytest.raises(SolverError, match="positive"):
            kkt_residual(est, np.zeros(2), 0.0)
