import itertools

import numpy as np
import pytest

from msra import (
    LossSpec,
    UnsupportedOperation,
    exp_bivariate,
    loss_eval,
    loss_grad,
    loss_hess,
    ph1,
    ph2,
    quadratic_systemic,
    validate_loss,
)
from msra.loss import LossError


SMOOTH_SPECS = [
    quadratic_systemic(0.0, 2),
    quadratic_systemic(1.0, 3),
    quadratic_systemic(0.7, 2, include_linear=False),
    exp_bivariate(1.0),
    exp_bivariate(0.5),
    LossSpec(family="c1", d=3, kernel="exp"),
    LossSpec(family="c2", d=2, kernels=("quad", "exp")),
    LossSpec(family="c3", d=3, alpha=0.5, beta=0.5, kernel="exp"),
]
ALL_SPECS = SMOOTH_SPECS + [
    ph1(0.5, 1.0, 3),
    ph2(0.5, 1.0, 3),
    LossSpec(family="c1", d=2, kernel="hinge", kernel_beta=0.5),
]


class TestValues:
    def test_quadratic_at_origin(self):
        assert loss_eval(quadratic_systemic(1.0, 2), [0.0, 0.0]) == -1.0

    def test_quadratic_at_ones(self):
        # 1 + 1 + 1/2 + 1/2 + 1 - 1
        assert loss_eval(quadratic_systemic(1.0, 2), [1.0, 1.0]) == pytest.approx(3.0, abs=1e-15)

    def test_exp_bivariate_at_origin(self):
        # 1/2 + 1/2 + alpha - 1 = alpha for the un-normalized exponential loss,
        # the form consistent with the closed-form allocation sigma_i^2 + SRC/2
        assert loss_eval(exp_bivariate(1.0), [0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
        assert loss_eval(exp_bivariate(0.0), [0.0, 0.0]) == pytest.approx(0.0, abs=1e-15)

    def test_ph_values(self):
        assert loss_eval(ph1(0.5, 1.0, 2), [2.0, -1.0]) == pytest.approx(1.5)
        # pairs: (2 - 1)+ = 1 extra positive part
        assert loss_eval(ph2(0.5, 1.0, 2), [2.0, -1.0]) == pytest.approx(2.5)

    def test_dimension_mismatch(self):
        with pytest.raises(LossError, match="dimension"):
            loss_eval(quadratic_systemic(1.0, 2), [1.0, 2.0, 3.0])

    def test_non_finite_rejected(self):
        with pytest.raises(LossError, match="finite"):
            loss_eval(quadratic_systemic(1.0, 2), [np.nan, 0.0])


class TestDerivatives:
    def test_quadratic_gradient_example(self):
        g = loss_grad(quadratic_systemic(0.0, 2), [2.0, -3.0])
        assert np.allclose(g, [3.0, 1.0], atol=0.0)

    def test_quadratic_hessian_example(self):
        h = loss_hess(quadratic_systemic(1.0, 2), [1.0, 1.0])
        assert np.array_equal(h, [[1.0, 1.0], [1.0, 1.0]])

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family}-d{s.d}")
    def test_gradient_matches_finite_differences(self, spec):
        rng = np.random.default_rng(5)
        eps = 1e-6
        checked = 0
        while checked < 100:
            x = rng.uniform(-2.0, 2.0, size=spec.d)
            # keep away from kinks so central differences are clean
            if np.min(np.abs(x)) < 1e-2:
                continue
            if spec.family in ("ph2", "c1", "c3") and np.min(
                np.abs(x.sum())
            ) < 1e-2:
                continue
            if spec.family == "ph2":
                s = x[:, None] + x[None, :]
                if np.min(np.abs(s[np.triu_indices(spec.d, 1)])) < 1e-2:
                    continue
            g = loss_grad(spec, x)
            fd = np.empty(spec.d)
            for k in range(spec.d):
                e = np.zeros(spec.d)
                e[k] = eps
                fd[k] = (loss_eval(spec, x + e) - loss_eval(spec, x - e)) / (2 * eps)
            assert np.max(np.abs(g - fd)) < 1e-6
            checked += 1

    @pytest.mark.parametrize("spec", SMOOTH_SPECS, ids=lambda s: f"{s.family}-d{s.d}")
    def test_hessian_matches_gradient_differences(self, spec):
        rng = np.random.default_rng(6)
        eps = 1e-6
        checked = 0
        while checked < 25:
            x = rng.uniform(-1.5, 1.5, size=spec.d)
            if np.min(np.abs(x)) < 5e-2 or abs(x.sum()) < 5e-2:
                continue
            h = loss_hess(spec, x)
            fd = np.empty((spec.d, spec.d))
            for k in range(spec.d):
                e = np.zeros(spec.d)
                e[k] = eps
                fd[:, k] = (loss_grad(spec, x + e) - loss_grad(spec, x - e)) / (2 * eps)
            assert np.max(np.abs(h - fd)) < 1e-5
            checked += 1

    def test_ph_hessian_unsupported(self):
        for spec in (ph1(0.5, 1.0, 2), ph2(0.5, 1.0, 2)):
            with pytest.raises(UnsupportedOperation, match="SQP"):
                loss_hess(spec, [1.0, -1.0])

    def test_right_derivative_at_kink(self):
        # at 0 the positive-part subgradient selection is the right derivative
        g = loss_grad(quadratic_systemic(0.0, 1), [0.0])
        assert g[0] == 1.0
        assert loss_grad(ph1(0.5, 1.0, 1), [0.0])[0] == 1.0


class TestStructuralProperties:
    @pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
    @pytest.mark.parametrize("spec", [ph1(0.5, 1.0, 3), ph2(0.5, 1.0, 3)],
                             ids=["ph1", "ph2"])
    def test_positive_homogeneity(self, spec, lam):
        rng = np.random.default_rng(7)
        x = rng.uniform(-2.0, 2.0, size=(500, 3))
        assert np.max(np.abs(loss_eval(spec, lam * x) - lam * loss_eval(spec, x))) <= 1e-12 * lam * 4

    @pytest.mark.parametrize(
        "spec",
        [quadratic_systemic(1.0, 3), quadratic_systemic(1.0, 4),
         exp_bivariate(1.0), ph1(0.5, 1.0, 4), ph2(0.5, 1.0, 4)],
        ids=["quad3", "quad4", "exp2", "ph1-4", "ph2-4"],
    )
    def test_permutation_invariance_all_perms(self, spec):
        rng = np.random.default_rng(8)
        x = rng.uniform(-2.0, 2.0, size=(64, spec.d))
        base = loss_eval(spec, x)
        for perm in itertools.permutations(range(spec.d)):
            # summation order may differ, so exact up to the last ulp
            assert np.allclose(loss_eval(spec, x[:, perm]), base, rtol=0.0, atol=1e-13)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family}-d{s.d}")
    def test_convexity_on_random_pairs(self, spec):
        rng = np.random.default_rng(9)
        a = rng.uniform(-1.5, 1.5, size=(10_000, spec.d))
        b = rng.uniform(-1.5, 1.5, size=(10_000, spec.d))
        fa, fb = loss_eval(spec, a), loss_eval(spec, b)
        for lam in (0.25, 0.5, 0.75):
            mid = loss_eval(spec, lam * a + (1 - lam) * b)
            assert np.all(mid <= lam * fa + (1 - lam) * fb + 1e-12)

    def test_lower_bound_witness_quadratic(self):
        rng = np.random.default_rng(10)
        spec = quadratic_systemic(1.0, 3)
        x = rng.uniform(-20.0, 20.0, size=(50_000, 3))
        assert np.all(loss_eval(spec, x) - x.sum(axis=1) >= -1.0 - 1e-12)

    def test_monotone_on_samples(self):
        rng = np.random.default_rng(11)
        for spec in ALL_SPECS:
            x = rng.uniform(-2.0, 2.0, size=(2000, spec.d))
            y = x + rng.uniform(0.0, 1.0, size=x.shape)
            assert np.all(loss_eval(spec, y) - loss_eval(spec, x) >= -1e-12)


class TestValidation:
    def test_c1_flags_nonuniqueness(self):
        report = validate_loss(LossSpec(family="c1", d=2, kernel="exp"), seed=1)
        assert report.uniqueness_flag == "suspect_nonunique"
        slopes = [abs(s["slope"]) for s in report.recession_slopes]
        assert min(slopes) < 1e-6

    def test_c2_strictly_convex_unique(self):
        report = validate_loss(LossSpec(family="c2", d=2, kernels=("quad", "quad")), seed=1)
        assert report.uniqueness_flag == "unique"

    def test_quadratic_passes_all(self):
        report = validate_loss(quadratic_systemic(1.0, 2), seed=1)
        assert report.passed
        assert report.monotone and report.convex and report.lower_bound
        assert report.permutation_invariant
        assert report.uniqueness_flag == "unique"

    def test_ph1_passes(self):
        assert validate_loss(ph1(0.5, 1.0, 3), seed=1).passed

    def test_ph2_d3_lower_bound_undocumented(self):
        report = validate_loss(ph2(0.5, 1.0, 3), seed=1)
        assert report.lower_bound is None
        assert validate_loss(ph2(0.5, 1.0, 2), seed=1).lower_bound is True

    def test_report_json_shape(self):
        payload = validate_loss(quadratic_systemic(1.0, 2), seed=1).to_json()
        assert payload["checks"]["monotone"] is True
        assert payload["uniqueness_flag"] == "unique"


class TestSpecPlumbing:
    def test_json_round_trip(self):
        for spec in ALL_SPECS:
            again = LossSpec.from_json(spec.to_json())
            assert again == spec

    def test_unknown_params_rejected(self):
        with pytest.raises(LossError, match="unknown loss parameters"):
            LossSpec.from_json({"family": "ph1", "d": 2,
                                "params": {"alpha": 0.5, "beta": 1.0, "gamma": 2}})

    def test_bad_family(self):
        with pytest.raises(LossError, match="family"):
            LossSpec(family="nope", d=2)

    def test_ph_parameter_range(self):
        with pytest.raises(LossError):
            ph1(0.0, 1.0, 2)
        with pytest.raises(LossError):
            ph1(0.5, 0.9, 2)

    def test_exp_bivariate_dimension(self):
        with pytest.raises(LossError, match="d=2"):
            LossSpec(family="exp_bivariate", d=3, alpha=1.0)
