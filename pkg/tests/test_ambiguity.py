import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from sinkhorn_drc.ambiguity import (
    AmbiguitySpec,
    DiscreteMeasure,
    GaussianReference,
    ball_nesting_check,
    discrete_ot,
    discrete_sinkhorn,
    feasibility_oracle,
    feasibility_threshold,
    kernel_moments,
    product_expected_cost,
    sq_euclidean_cost,
)
from sinkhorn_drc.conic import ConicProgram, solve
from sinkhorn_drc.errors import AbsoluteContinuityError, ConvergenceError, ValidationError


def std1():
    return GaussianReference(np.zeros(1), np.eye(1))


def random_reference(rng, s):
    L = rng.normal(scale=0.5, size=(s, s))
    return GaussianReference(rng.normal(scale=0.5, size=s), L @ L.T + 0.2 * np.eye(s))


def random_measure(rng, k, s, scale=1.0):
    return DiscreteMeasure.normalized(rng.normal(scale=scale, size=(k, s)), rng.uniform(0.1, 1.0, size=k))


def entropic_ot_conic(P, Q, nu_w, eps):
    """Generic conic formulation of the entropic problem (independent of the scaling iterations)."""
    C = sq_euclidean_cost(P.points, Q.points)
    k1, k2 = C.shape
    prog = ConicProgram("entropic-ot")
    g = prog.variable("g", (k1, k2))
    tau = prog.variable("tau", (k1, k2))
    prog.add_zero(g.sum(axis=1) - P.weights, "row marginal")
    prog.add_zero(g.sum(axis=0) - Q.weights, "column marginal")
    ref = np.outer(P.weights, nu_w).ravel()
    prog.add_exp(-tau.flatten(), g.flatten(), ref, "g log(g / ref) <= tau")
    prog.minimize((g * C).sum() + eps * tau.sum())
    sol = solve(prog)
    assert sol.report.status == "optimal"
    return sol.report.objective


class TestReference:
    def test_cached_factors(self, rng):
        ref = random_reference(rng, 4)
        np.testing.assert_allclose(ref.chol @ ref.chol.T, ref.cov, atol=1e-10)
        np.testing.assert_allclose(ref.cov_inv @ ref.cov, np.eye(4), atol=1e-10)
        assert ref.logdet == pytest.approx(np.linalg.slogdet(ref.cov)[1], abs=1e-10)

    def test_rejects_singular_or_asymmetric(self):
        with pytest.raises(ValidationError):
            GaussianReference(np.zeros(2), np.diag([1.0, 0.0]))
        with pytest.raises(ValidationError):
            GaussianReference(np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]))

    def test_ambiguity_spec_signs(self):
        AmbiguitySpec(0.0, 0.0)
        with pytest.raises(ValidationError):
            AmbiguitySpec(-1.0, 0.1)
        with pytest.raises(ValidationError):
            AmbiguitySpec(1.0, -0.1)


class TestFeasibilityThreshold:
    def test_zero_eps(self, rng):
        W = rng.normal(size=(5, 3))
        assert feasibility_threshold(W, random_reference(rng, 3), 0.0) == 0.0

    def test_unit_instance_by_quadrature(self):
        # -eps log E exp(-z^2/eps), z ~ N(0, 1), eps = 2
        integrand = lambda z: math.exp(-z * z / 2.0) * math.exp(-z * z / 2.0) / math.sqrt(2 * math.pi)
        quad = -2.0 * math.log(integrate.quad(integrand, -np.inf, np.inf)[0])
        assert quad == pytest.approx(math.log(2.0), abs=1e-12)
        assert feasibility_threshold(np.zeros((1, 1)), std1(), 2.0) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_large_eps_limit(self):
        assert feasibility_threshold(np.array([[3.0]]), std1(), 1e6) == pytest.approx(10.0, abs=1e-3)

    def test_expanded_expression(self, rng):
        # the expanded expression with ||w||^2 inside the average
        s, n, eps = 3, 4, 0.7
        ref = random_reference(rng, s)
        W = rng.normal(size=(n, s))
        Si = ref.cov_inv
        tilt = np.eye(s) + 0.5 * eps * Si
        b = W + 0.5 * eps * Si @ ref.mean
        expanded = (
            0.5 * eps * np.linalg.slogdet(ref.cov + 0.5 * eps * np.eye(s))[1]
            - 0.5 * eps * s * math.log(0.5 * eps)
            + 0.5 * eps * ref.mean @ Si @ ref.mean
            + np.mean(np.sum(W * W, 1) - np.sum(b * np.linalg.solve(tilt, b.T).T, 1))
        )
        assert feasibility_threshold(W, ref, eps) == pytest.approx(expanded, rel=1e-10)

    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_and_limit(self, s, n, seed):
        rng = np.random.default_rng(seed)
        ref = random_reference(rng, s)
        W = rng.normal(size=(n, s))
        grid = np.logspace(-4, 3, 30)
        vals = [feasibility_threshold(W, ref, e) for e in grid]
        assert np.all(np.diff(vals) >= -1e-12 * max(vals))
        limit = np.mean(np.sum((W - ref.mean) ** 2, 1)) + np.trace(ref.cov)
        assert feasibility_threshold(W, ref, 1e6) == pytest.approx(limit, rel=1e-3)

    def test_dimension_check(self, rng):
        with pytest.raises(ValidationError):
            feasibility_threshold(np.zeros((2, 3)), random_reference(rng, 2), 0.1)


class TestFeasibilityOracle:
    def test_monte_carlo_unit_instance(self):
        est = feasibility_oracle(np.zeros((1, 1)), std1(), 2.0, method="montecarlo", draws=1_000_000)
        assert est.value == pytest.approx(0.693147, abs=1e-3)
        assert est.stderr <= 1e-3

    def test_quadrature_unit_instance(self):
        est = feasibility_oracle(np.zeros((1, 1)), std1(), 2.0)
        assert est.method == "quadrature"
        assert est.value == pytest.approx(math.log(2.0), abs=1e-10)

    def test_translation_invariance(self):
        ref0 = GaussianReference(np.zeros(2), 0.4 * np.eye(2))
        c = np.array([1.3, -2.0])
        ref1 = GaussianReference(c, 0.4 * np.eye(2))
        a = feasibility_oracle(np.zeros((1, 2)), ref0, 0.5).value
        b = feasibility_oracle(c[None, :], ref1, 0.5).value
        assert a == pytest.approx(b, rel=1e-9)
        assert a == pytest.approx(feasibility_threshold(np.zeros((1, 2)), ref0, 0.5), rel=1e-9)

    def test_small_eps(self):
        assert feasibility_oracle(np.zeros((1, 1)), std1(), 1e-6).value <= 1e-5

    @pytest.mark.parametrize("s", [1, 2, 3, 4, 6])
    def test_agrees_with_closed_form(self, rng, s):
        ref = random_reference(rng, s)
        W = rng.normal(size=(3, s))
        eps = 0.3
        est = feasibility_oracle(W, ref, eps, draws=400_000)
        exact = feasibility_threshold(W, ref, eps)
        assert est.value == pytest.approx(exact, rel=1e-3)

    def test_qmc_is_default_above_three_dims(self, rng):
        ref = random_reference(rng, 5)
        W = rng.normal(size=(2, 5))
        est = feasibility_oracle(W, ref, 0.4, draws=200_000)
        assert est.method == "qmc" and est.stderr > 0
        assert est.value == pytest.approx(feasibility_threshold(W, ref, 0.4), rel=1e-3)

    def test_qmc_reproducible_and_seed_sensitive(self, rng):
        ref = random_reference(rng, 4)
        W = rng.normal(size=(2, 4))
        a = feasibility_oracle(W, ref, 0.3, draws=20_000, method="qmc", seed=3).value
        b = feasibility_oracle(W, ref, 0.3, draws=20_000, method="qmc", seed=3).value
        c = feasibility_oracle(W, ref, 0.3, draws=20_000, method="qmc", seed=4).value
        assert a == b and a != c

    def test_reports_insufficient_budget(self, rng):
        ref = random_reference(rng, 4)
        est = feasibility_oracle(rng.normal(size=(2, 4)), ref, 0.05, draws=50, method="montecarlo", tol=1e-6)
        assert not est.sufficient

    def test_requires_positive_eps(self):
        with pytest.raises(ValidationError):
            feasibility_oracle(np.zeros((1, 1)), std1(), 0.0)


class TestDiscreteOT:
    def test_identity(self, rng):
        P = random_measure(rng, 4, 2)
        res = discrete_ot(P, P)
        assert res.value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(res.coupling.plan, np.diag(P.weights), atol=1e-12)

    def test_diracs(self):
        assert discrete_ot(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([1.0])).value == pytest.approx(1.0)

    def test_two_point(self):
        P = DiscreteMeasure.uniform(np.array([[0.0], [2.0]]))
        Q = DiscreteMeasure.uniform(np.array([[1.0], [3.0]]))
        res = discrete_ot(P, Q)
        assert res.value == pytest.approx(1.0)
        assert res.coupling.marginal_residual(P, Q) <= 1e-9

    def test_measure_validation(self):
        with pytest.raises(ValidationError):
            DiscreteMeasure(np.zeros((2, 1)), [0.5, 0.6])
        with pytest.raises(ValidationError):
            DiscreteMeasure(np.zeros((2, 1)), [1.5, -0.5])


class TestDiscreteSinkhorn:
    def test_forced_coupling(self):
        x = DiscreteMeasure.dirac([0.5, 1.0])
        nu = DiscreteMeasure.uniform(np.array([[0.5, 1.0], [2.0, -1.0]]))
        for eps in (0.1, 1.0, 3.0):
            assert discrete_sinkhorn(x, x, nu, eps).value == pytest.approx(eps * math.log(2.0), rel=1e-10)

    def test_zero_eps_is_ot(self, rng):
        for _ in range(5):
            nu = random_measure(rng, 5, 2)
            P = random_measure(rng, 5, 2)
            Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.1, 1, size=5))
            assert discrete_sinkhorn(P, Q, nu, 0.0).value == pytest.approx(discrete_ot(P, Q).value, abs=1e-6)

    @pytest.mark.parametrize("eps", [0.05, 0.3, 1.0])
    def test_matches_generic_convex_solver(self, rng, eps):
        nu = random_measure(rng, 4, 2)
        P = random_measure(rng, 3, 2)
        Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.1, 1, size=4))
        res = discrete_sinkhorn(P, Q, nu, eps)
        assert res.value == pytest.approx(entropic_ot_conic(P, Q, nu.weights, eps), rel=1e-6, abs=1e-7)
        assert res.coupling.marginal_residual(P, Q) <= 1e-9

    def test_ordering(self, rng):
        for _ in range(10):
            nu = random_measure(rng, 6, 2)
            P = random_measure(rng, 4, 2)
            Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.1, 1, size=6))
            v1 = discrete_sinkhorn(P, Q, nu, 1.0).value
            v01 = discrete_sinkhorn(P, Q, nu, 0.1).value
            ot = discrete_ot(P, Q).value
            assert v1 >= v01 - 1e-9 and v01 >= ot - 1e-9

    def test_absolute_continuity(self):
        nu = DiscreteMeasure.uniform(np.array([[0.0], [1.0]]))
        with pytest.raises(AbsoluteContinuityError):
            discrete_sinkhorn(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([0.5]), nu, 0.1)

    def test_non_convergence(self, rng):
        nu = random_measure(rng, 5, 1, scale=3)
        P = random_measure(rng, 5, 1, scale=3)
        Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.1, 1, size=5))
        with pytest.raises(ConvergenceError) as exc:
            discrete_sinkhorn(P, Q, nu, 1e-3, max_iter=2, polish=False)
        assert exc.value.residual > 0


class TestBallNesting:
    def test_zero_eps_grid(self, rng):
        nu = random_measure(rng, 5, 1)
        P = random_measure(rng, 3, 1)
        Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.1, 1, size=5))
        ot = discrete_ot(P, Q).value
        for rho in (0.5 * ot, 2.0 * ot):
            rep = ball_nesting_check(P, Q, nu, rho, [0.0])
            assert bool(rep.members[0]) == (ot <= rho)

    def test_nu_is_member_at_product_cost(self, rng):
        nu = random_measure(rng, 6, 2)
        P = random_measure(rng, 3, 2)
        rho = product_expected_cost(P, nu)
        rep = ball_nesting_check(P, nu, nu, rho + 1e-9, np.logspace(-3, 2, 12))
        assert rep.members.all() and rep.ok

    def test_monotone_membership(self, rng):
        for _ in range(20):
            nu = random_measure(rng, 5, 2)
            P = random_measure(rng, 3, 2)
            Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.05, 1, size=5))
            ot = discrete_ot(P, Q).value
            rep = ball_nesting_check(P, Q, nu, ot * rng.uniform(1.0, 3.0), np.logspace(-3, 1, 15))
            assert rep.monotone and rep.implies_ot


def test_kernel_moments_match_gibbs_density(rng):
    ref = random_reference(rng, 2)
    w = rng.normal(size=2)
    mu, S = kernel_moments(w, ref, 0.4)
    # the kernel density is proportional to exp(-||w - z||^2 / eps) N(z; m, Sigma)
    prec = np.linalg.inv(S)
    np.testing.assert_allclose(prec, 2.0 / 0.4 * np.eye(2) + ref.cov_inv, atol=1e-10)
    np.testing.assert_allclose(prec @ mu, 2.0 / 0.4 * w + ref.cov_inv @ ref.mean, atol=1e-10)
