import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eoslab.errors import DomainError, InstanceError, UnsupportedOrderError
from eoslab.problem import (
    FactorisationProblem,
    c_coeff,
    c_coeff_batch,
    c_star_closed_form,
    check_on_manifold,
    deriv_tensor_contract,
    dl3_n,
    dl4_n,
    f,
    finite_diff_oracle,
    grad_f,
    grad_loss,
    hess_f,
    hess_loss,
    loss,
    normal,
    normal_quantities_batch,
    sharpness,
    third_f,
)

# Values below were produced by a symbolic oracle (exact differentiation of the
# product and the loss, brute-force contraction over all index tuples).
P3_Y1_DL3 = 6.0 * math.sqrt(3.0)
P3_Y1_DL4 = 20.0
P3_Y2_POINT = np.array([0.5, 2.0, 2.0])
P3_Y2_DL3 = 23.33452377915607
P3_Y2_DL4 = 15.416666666666666
P3_Y2_C_ETA_TENTH = 1.1043055555555557


def on_m(prob, raw):
    x = np.asarray(raw, dtype=float)
    return x * (prob.target / np.prod(x)) ** (1.0 / prob.depth)


positive_vectors = st.integers(2, 6).flatmap(
    lambda p: st.lists(st.floats(0.3, 3.0), min_size=p, max_size=p))


class TestInstance:
    def test_rejects_shallow_depth(self):
        with pytest.raises(InstanceError):
            FactorisationProblem(1, 1.0)

    @pytest.mark.parametrize("target", [0.0, -1.0, math.inf, math.nan])
    def test_rejects_bad_target(self, target):
        with pytest.raises(InstanceError):
            FactorisationProblem(3, target)

    def test_rejects_wrong_length(self):
        with pytest.raises(InstanceError):
            f(FactorisationProblem(3, 1.0), [1.0, 2.0])

    def test_balanced_point(self):
        prob = FactorisationProblem(4, 16.0)
        np.testing.assert_allclose(prob.theta_star, [2.0] * 4)
        assert prob.lambda_star == pytest.approx(4 * 16.0 ** 1.5)
        assert prob.eta_critical == pytest.approx(2.0 / prob.lambda_star)


class TestProductAndGradient:
    def test_product(self):
        assert f(FactorisationProblem(3, 1.0), [1, 2, 3]) == 6.0
        assert f(FactorisationProblem(2, 1.0), [2, 0.5]) == 1.0
        assert f(FactorisationProblem(5, 1.0), np.ones(5)) == 1.0

    def test_gradient_examples(self):
        np.testing.assert_array_equal(grad_f(FactorisationProblem(3, 1.0), [1, 2, 3]), [6, 3, 2])
        np.testing.assert_array_equal(grad_f(FactorisationProblem(2, 1.0), [2, 0.5]), [0.5, 2])
        np.testing.assert_array_equal(grad_f(FactorisationProblem(2, 1.0), [3, 0]), [0, 3])

    @given(positive_vectors)
    def test_gradient_on_manifold_is_y_over_theta(self, raw):
        prob = FactorisationProblem(len(raw), 1.7)
        th = on_m(prob, raw)
        np.testing.assert_allclose(grad_f(prob, th), prob.target / th, rtol=1e-12)

    @given(positive_vectors)
    @settings(max_examples=30)
    def test_gradient_matches_finite_differences(self, raw):
        prob = FactorisationProblem(len(raw), 1.0)
        th = np.asarray(raw)
        g = grad_f(prob, th)
        np.testing.assert_allclose(finite_diff_oracle(prob, th, 1), g, rtol=1e-6, atol=1e-9 * np.abs(g).max())


class TestDerivativeTensors:
    def test_hessian_zero_diagonal_and_symmetric(self):
        h = hess_f(FactorisationProblem(4, 1.0), [1.0, 2.0, 3.0, 4.0])
        assert np.all(np.diag(h) == 0)
        np.testing.assert_array_equal(h, h.T)
        assert h[0, 1] == 12.0

    def test_third_derivative_vanishes_for_two_factors(self):
        prob = FactorisationProblem(2, 1.0)
        assert deriv_tensor_contract(prob, [2.0, 0.5], 3, [[0.3, 0.7]]) == 0.0
        assert np.all(third_f(prob, [2.0, 0.5]) == 0)

    def test_second_order_at_balanced_p2(self):
        prob = FactorisationProblem(2, 1.0)
        n = np.ones(2) / math.sqrt(2)
        assert deriv_tensor_contract(prob, [1.0, 1.0], 2, [n, n]) == pytest.approx(1.0, rel=1e-14)

    def test_third_order_at_balanced_p3(self):
        prob = FactorisationProblem(3, 1.0)
        n = np.ones(3) / math.sqrt(3)
        assert deriv_tensor_contract(prob, np.ones(3), 3, [n]) == pytest.approx(2 / math.sqrt(3), rel=1e-14)

    def test_full_tensor_returned_without_directions(self):
        prob = FactorisationProblem(3, 1.0)
        assert deriv_tensor_contract(prob, [1.0, 2.0, 3.0], 3).shape == (3, 3, 3)

    def test_mixed_directions(self):
        prob = FactorisationProblem(3, 1.0)
        th = np.array([1.0, 2.0, 3.0])
        u, v = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
        assert deriv_tensor_contract(prob, th, 2, [u, v]) == 3.0

    @pytest.mark.parametrize("order", [1, 4])
    def test_unsupported_order(self, order):
        with pytest.raises(UnsupportedOrderError):
            deriv_tensor_contract(FactorisationProblem(3, 1.0), np.ones(3), order)

    def test_wrong_direction_count(self):
        with pytest.raises(InstanceError):
            deriv_tensor_contract(FactorisationProblem(3, 1.0), np.ones(3), 3, [np.ones(3)] * 2)

    @given(positive_vectors, st.integers(0, 2**32 - 1))
    @settings(max_examples=30)
    def test_contractions_match_finite_differences(self, raw, seed):
        prob = FactorisationProblem(len(raw), 1.0)
        th = np.asarray(raw)
        u = np.random.default_rng(seed).standard_normal(prob.depth)
        for order, tensor in ((2, hess_f(prob, th)), (3, third_f(prob, th))):
            exact = deriv_tensor_contract(prob, th, order, [u])
            scale = np.abs(tensor).max() * np.linalg.norm(u) ** order
            # the difference quotients carry a round-off floor of about eps f / h^order
            floor = 1e-6 * abs(f(prob, th))
            assert abs(finite_diff_oracle(prob, th, order, [u]) - exact) <= 1e-5 * scale + floor


class TestLoss:
    def test_on_manifold(self):
        prob = FactorisationProblem(2, 1.0)
        assert loss(prob, [1.0, 1.0]) == 0.0
        np.testing.assert_array_equal(grad_loss(prob, [1.0, 1.0]), [0.0, 0.0])

    def test_examples(self):
        prob = FactorisationProblem(2, 1.0)
        assert loss(prob, [2.0, 1.0]) == 0.5
        np.testing.assert_array_equal(grad_loss(prob, [2.0, 1.0]), [1.0, 2.0])
        prob = FactorisationProblem(3, 1.0)
        assert loss(prob, [1.0, 1.0, 2.0]) == 0.5
        np.testing.assert_array_equal(grad_loss(prob, [1.0, 1.0, 2.0]), [2.0, 2.0, 1.0])

    def test_hessian_on_manifold_is_rank_one(self):
        prob = FactorisationProblem(3, 2.0)
        h = hess_loss(prob, P3_Y2_POINT)
        ev = np.linalg.eigvalsh(h)
        np.testing.assert_allclose(ev[:2], 0.0, atol=1e-12)
        assert ev[-1] == pytest.approx(sharpness(prob, P3_Y2_POINT), rel=1e-12)


class TestManifoldQuantities:
    def test_sharpness_examples(self):
        assert sharpness(FactorisationProblem(5, 1.0), np.ones(5)) == pytest.approx(5.0)
        assert sharpness(FactorisationProblem(2, 1.0), [2.0, 0.5]) == pytest.approx(4.25)
        assert sharpness(FactorisationProblem(2, 4.0), [2.0, 2.0]) == pytest.approx(8.0)

    def test_sharpness_requires_manifold(self):
        with pytest.raises(DomainError):
            sharpness(FactorisationProblem(2, 1.0), [2.0, 2.0])
        with pytest.raises(DomainError):
            check_on_manifold(FactorisationProblem(2, 1.0), [-1.0, -1.0])

    def test_normal_examples(self):
        np.testing.assert_allclose(normal(FactorisationProblem(4, 3.0), np.full(4, 3.0 ** 0.25)), np.full(4, 0.5))
        np.testing.assert_allclose(normal(FactorisationProblem(2, 1.0), [2.0, 0.5]),
                                   np.array([0.5, 2.0]) / math.sqrt(4.25))

    @given(positive_vectors)
    def test_normal_is_unit(self, raw):
        prob = FactorisationProblem(len(raw), 0.8)
        assert abs(np.linalg.norm(normal(prob, on_m(prob, raw))) - 1.0) < 1e-14

    def test_normal_derivatives_p2(self):
        prob = FactorisationProblem(2, 1.0)
        assert dl3_n(prob, [1.0, 1.0]) == pytest.approx(3 * math.sqrt(2), rel=1e-14)
        assert dl4_n(prob, [1.0, 1.0]) == pytest.approx(3.0, rel=1e-14)

    def test_normal_derivatives_against_symbolic_oracle(self):
        prob = FactorisationProblem(3, 1.0)
        assert dl3_n(prob, np.ones(3)) == pytest.approx(P3_Y1_DL3, rel=1e-13)
        assert dl4_n(prob, np.ones(3)) == pytest.approx(P3_Y1_DL4, rel=1e-13)
        prob = FactorisationProblem(3, 2.0)
        assert dl3_n(prob, P3_Y2_POINT) == pytest.approx(P3_Y2_DL3, rel=1e-13)
        assert dl4_n(prob, P3_Y2_POINT) == pytest.approx(P3_Y2_DL4, rel=1e-13)

    def test_normal_derivatives_against_finite_differences(self):
        prob = FactorisationProblem(5, 1.0)
        n = normal(prob, np.ones(5))
        assert finite_diff_oracle(prob, np.ones(5), 3, [n], target="loss") == pytest.approx(
            dl3_n(prob, np.ones(5)), rel=1e-5)
        assert finite_diff_oracle(prob, np.ones(5), 4, [n], target="loss") == pytest.approx(
            dl4_n(prob, np.ones(5)), rel=1e-4)

    def test_batch_matches_pointwise(self, prob, rng):
        pts = np.array([on_m(prob, rng.uniform(0.5, 2.0, prob.depth)) for _ in range(10)])
        q = normal_quantities_batch(prob, pts)
        for k, th in enumerate(pts):
            assert q["sharpness"][k] == pytest.approx(sharpness(prob, th), rel=1e-13)
            np.testing.assert_allclose(q["normal"][k], normal(prob, th), atol=1e-14)
            assert q["dl3"][k] == pytest.approx(dl3_n(prob, th), rel=1e-12)
            assert q["dl4"][k] == pytest.approx(dl4_n(prob, th), rel=1e-11)
        np.testing.assert_allclose(c_coeff_batch(prob, 0.1, pts), [c_coeff(prob, 0.1, th) for th in pts], rtol=1e-11)


class TestCubicCoefficient:
    def test_critical_values(self):
        for p, expected in ((5, 22.4), (2, 4.0), (3, 88 / 9)):
            prob = FactorisationProblem(p, 1.0)
            assert c_coeff(prob, prob.eta_critical, prob.theta_star) == pytest.approx(expected, rel=1e-13)

    def test_symbolic_oracle_off_balanced(self):
        assert c_coeff(FactorisationProblem(3, 2.0), 0.1, P3_Y2_POINT) == pytest.approx(P3_Y2_C_ETA_TENTH, rel=1e-13)

    @pytest.mark.parametrize("p", range(2, 9))
    @pytest.mark.parametrize("y", [0.5, 1.0, 2.0])
    def test_closed_form(self, p, y):
        prob = FactorisationProblem(p, y)
        assert c_coeff(prob, prob.eta_critical, prob.theta_star) == pytest.approx(c_star_closed_form(prob), rel=1e-12)

    @given(positive_vectors)
    def test_positive_at_local_critical_step(self, raw):
        prob = FactorisationProblem(len(raw), 1.0)
        th = on_m(prob, raw)
        assert c_coeff(prob, 2.0 / sharpness(prob, th), th) > 0

    def test_rejects_nonpositive_eta(self):
        with pytest.raises(DomainError):
            c_coeff(FactorisationProblem(3, 1.0), 0.0, np.ones(3))


class TestFiniteDifferenceOracle:
    def test_order_bounds(self):
        with pytest.raises(UnsupportedOrderError):
            finite_diff_oracle(FactorisationProblem(3, 1.0), np.ones(3), 5, [np.ones(3)])

    def test_needs_directions_above_first_order(self):
        with pytest.raises(InstanceError):
            finite_diff_oracle(FactorisationProblem(3, 1.0), np.ones(3), 2)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            finite_diff_oracle(FactorisationProblem(3, 1.0), np.ones(3), 1, target="sharpness")

    def test_first_order_relative_error(self):
        prob = FactorisationProblem(3, 1.0)
        th = np.array([0.7, 1.3, 2.1])
        g = grad_f(prob, th)
        assert np.linalg.norm(finite_diff_oracle(prob, th, 1) - g) / np.linalg.norm(g) < 1e-6

    def test_third_order_at_balanced(self):
        prob = FactorisationProblem(4, 1.0)
        u = np.array([0.3, -0.1, 0.5, 0.2])
        exact = deriv_tensor_contract(prob, prob.theta_star, 3, [u])
        assert finite_diff_oracle(prob, prob.theta_star, 3, [u]) == pytest.approx(exact, rel=1e-5)
