"""Acceptance criteria; every test prints one PASS/FAIL line per criterion.

The lines are also collected into an "acceptance criteria" section of the
pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from _helpers import random_causal_K, random_system, report, scalar_system
from sinkhorn_drc.ambiguity import (
    AmbiguitySpec,
    DiscreteMeasure,
    GaussianReference,
    discrete_ot,
    discrete_sinkhorn,
    feasibility_oracle,
    feasibility_threshold,
)
from sinkhorn_drc.cli import generate_samples, load_config, run_compare, NOMINAL_LABEL
from sinkhorn_drc.duality import QuadraticLoss, discretize_gaussian_1d, primal_oracle_1d, worst_case_risk
from sinkhorn_drc.synthesis import (
    MomentSpec,
    SynthesisRequest,
    empirical_feasibility_boundary,
    evaluate_expected_cost,
    q_swap_certificate,
    synthesize_h2,
    synthesize_sinkhorn,
    synthesize_wasserstein,
)
from sinkhorn_drc.system import (
    ControllerRealization,
    CostSpec,
    achievability_residual,
    build_stacked,
    closed_loop_from_controller,
    gaussian_sampler,
    mass_spring_damper,
    monte_carlo_cost,
    recover_controller,
)

# every closed-loop map returned by a synthesis call in this module
RETURNED = []


def keep(bundle, sys):
    RETURNED.append(achievability_residual(sys, bundle.map))
    return bundle


# criterion 1: interpolation between Wasserstein and the reference prior

INTERP_RHO = (3.5, 4.0, 5.0)
INTERP_EPS = tuple(float(e) for e in np.logspace(-4, 1, 25))


@pytest.fixture(scope="module")
def interp():
    spec = mass_spring_damper(10)
    s = spec.s
    samples = generate_samples(np.zeros(s), 0.5 * np.eye(s), 20, seed=7)
    ref = GaussianReference.isotropic(s, 0.1)
    cost = CostSpec.identity(spec)
    sys = build_stacked(spec)
    t0 = time.perf_counter()
    sweep, wass, largest = {}, {}, {}
    for rho in INTERP_RHO:
        base = SynthesisRequest(spec, cost, samples, ref, AmbiguitySpec(rho, 0.0), strategy="direct", formulation="compact")
        wass[rho] = keep(synthesize_wasserstein(base), sys).wc_cost
        feasible = [e for e in INTERP_EPS if feasibility_threshold(samples, ref, e) + 1e-9 <= rho]
        sweep[rho] = [(e, keep(synthesize_sinkhorn(base.with_amb(rho, e)), sys).wc_cost) for e in feasible]
        largest[rho] = feasible[-1]
    runtime = time.perf_counter() - t0
    h2 = synthesize_h2(spec, cost, MomentSpec.of_reference(ref))
    h2_nu = evaluate_expected_cost(h2.map, MomentSpec.of_reference(ref), cost)
    return dict(spec=spec, samples=samples, ref=ref, cost=cost, sweep=sweep, wass=wass, largest=largest, runtime=runtime, h2_nu=h2_nu)


def test_criterion_1a_monotone_in_eps(interp):
    worst = max(float(np.max(np.diff([v for _, v in interp["sweep"][r]]))) for r in INTERP_RHO)
    ok = worst <= 1e-6 and interp["runtime"] <= 600.0
    counts = ", ".join(f"rho={r:g}: {len(interp['sweep'][r])} cells" for r in INTERP_RHO)
    assert report("1(a)", ok, f"largest increase along eps {worst:.3e} (slack 1e-6); {counts}; sweep runtime {interp['runtime']:.0f} s (limit 600 s)")


def test_criterion_1b_small_eps_matches_wasserstein(interp):
    rel = {r: abs(interp["sweep"][r][0][1] - interp["wass"][r]) / interp["wass"][r] for r in INTERP_RHO}
    assert all(interp["sweep"][r][0][0] == 1e-4 for r in INTERP_RHO)
    ok = max(rel.values()) <= 1e-2
    detail = "; ".join(f"rho={r:g}: {interp['sweep'][r][0][1]:.4f} vs {interp['wass'][r]:.4f} ({rel[r]:.2e})" for r in INTERP_RHO)
    assert report("1(b)", ok, f"eps=1e-4 vs Wasserstein, tolerance 1e-2 relative: {detail}")


def test_criterion_1c_largest_eps_near_h2(interp):
    h2 = interp["h2_nu"]
    rel = {r: abs(interp["sweep"][r][-1][1] - h2) / h2 for r in INTERP_RHO}
    ok = max(rel.values()) <= 0.05
    detail = "; ".join(f"rho={r:g}: eps={interp['largest'][r]:.3g} wc={interp['sweep'][r][-1][1]:.4f} ({rel[r]:.2f})" for r in INTERP_RHO)
    limit = feasibility_threshold(interp["samples"], interp["ref"], 1e6)
    assert report(
        "1(c)",
        ok,
        f"H2-under-nu cost {h2:.4f}, tolerance 5%: {detail}; every radius is below the large-eps threshold {limit:.3f}, "
        "so no tested eps reaches the regime where the ball shrinks to nu",
    )


def test_criterion_1c_above_threshold(interp):
    """Same instance with a radius above the large-eps threshold, where the ball does shrink to nu."""
    limit = feasibility_threshold(interp["samples"], interp["ref"], 1e6)
    rho = math.ceil(limit) + 1.0
    req = SynthesisRequest(interp["spec"], interp["cost"], interp["samples"], interp["ref"], AmbiguitySpec(rho, 1e3), strategy="direct", formulation="compact")
    wc = keep(synthesize_sinkhorn(req), build_stacked(interp["spec"])).wc_cost
    rel = abs(wc - interp["h2_nu"]) / interp["h2_nu"]
    assert report("1(c) above threshold", rel <= 0.05, f"rho={rho:g} > {limit:.3f}, eps=1e3: wc={wc:.4f} vs H2-under-nu {interp['h2_nu']:.4f} ({rel:.3f})")


# criterion 2: feasibility threshold


def test_criterion_2_feasibility():
    rng = np.random.default_rng(2)
    worst, methods = 0.0, set()
    for k in range(50):
        s = int(rng.integers(1, 7))
        n = int(rng.integers(1, 6))
        eps = float(10 ** rng.uniform(-1.5, 0.5))
        L = rng.normal(scale=0.5, size=(s, s))
        ref = GaussianReference(rng.normal(scale=0.5, size=s), L @ L.T + 0.2 * np.eye(s))
        W = rng.normal(size=(n, s))
        est = feasibility_oracle(W, ref, eps, seed=k)
        methods.add(est.method)
        worst = max(worst, abs(est.value - feasibility_threshold(W, ref, eps)) / feasibility_threshold(W, ref, eps))
    oracle_ok = worst <= 1e-3

    spec = mass_spring_damper(2)
    W = rng.normal(scale=0.7, size=(3, spec.s))
    ref = GaussianReference.isotropic(spec.s, 0.3)
    boundary_err = 0.0
    for eps in (0.1, 0.5):
        rho_min = feasibility_threshold(W, ref, eps)
        req = SynthesisRequest(spec, CostSpec.identity(spec), W, ref, AmbiguitySpec(rho_min, eps), strategy="direct")
        b = empirical_feasibility_boundary(req, 0.5 * rho_min, 2.0 * rho_min, tol=1e-5)
        boundary_err = max(boundary_err, abs(b - rho_min) / rho_min)
    boundary_ok = boundary_err <= 1e-3

    zero_ok = feasibility_threshold(W, ref, 0.0) == 0.0
    limit = np.mean(np.sum((W - ref.mean) ** 2, axis=1)) + np.trace(ref.cov)
    big_rel = abs(feasibility_threshold(W, ref, 1e6) - limit) / limit
    ok = oracle_ok and boundary_ok and zero_ok and big_rel <= 1e-3
    assert report(
        "2",
        ok,
        f"oracle ({'/'.join(sorted(methods))}) worst rel error {worst:.2e} over 50 instances; "
        f"solver boundary rel error {boundary_err:.2e}; rho_min(0) == 0: {zero_ok}; eps=1e6 limit rel error {big_rel:.2e}",
    )


# criterion 3: duality against a grid primal


def test_criterion_3_duality():
    rng = np.random.default_rng(3)
    worst_gap, worst_excess, certified, methods = 0.0, -math.inf, 0, set()
    for _ in range(10):
        m, var = rng.normal(scale=0.5), rng.uniform(0.3, 1.5)
        ref = GaussianReference([m], [[var]])
        n = int(rng.integers(1, 4))
        W = rng.normal(size=(n, 1))
        loss = QuadraticLoss([[rng.uniform(0.2, 1.5)]], [rng.normal(scale=0.5)])
        eps = float(10 ** rng.uniform(-1, 0))
        rho = feasibility_threshold(W, ref, eps) + rng.uniform(0.2, 2.0)
        dual = worst_case_risk(loss, W, ref, rho, eps).value
        sd = math.sqrt(var)
        grid = discretize_gaussian_1d(ref, min(m - 12 * sd, W.min() - 6), max(m + 12 * sd, W.max() + 6), 2001)
        primal = primal_oracle_1d(loss, W, grid, rho, eps)
        methods.add(primal.method)
        worst_gap = max(worst_gap, abs(primal.value - dual) / abs(dual))

        # weak duality: members of the ball never beat the dual value
        P = DiscreteMeasure.uniform(W)
        z = grid.points[:, 0]
        for _ in range(100):
            t = rng.uniform() ** 2
            if rng.uniform() < 0.5:
                bump = np.exp(-0.5 * ((z - rng.normal(m, 2 * sd)) / rng.uniform(0.2, 2.0)) ** 2)
            else:
                bump = rng.dirichlet(np.full(z.size, 0.05)) + 0.0
            bump = bump / bump.sum()
            q = (1 - t) * primal.distribution.weights + t * bump
            Q = DiscreteMeasure.normalized(grid.points, q)
            if discrete_sinkhorn(P, Q, grid, eps).value <= rho:
                certified += 1
                worst_excess = max(worst_excess, Q.expectation(loss) - dual)
    ok = worst_gap <= 1e-2 and worst_excess <= 1e-6 and certified > 0
    assert report(
        "3",
        ok,
        f"worst rel gap primal vs dual {worst_gap:.2e} (primal via {'/'.join(sorted(methods))}); "
        f"{certified} of 1000 sampled distributions certified in the ball, max E[loss] - dual = {worst_excess:.2e}",
    )


# criterion 4: system level parametrization


def test_criterion_4_sls():
    rng = np.random.default_rng(4)
    worst_rt = 0.0
    for k in range(40):
        N = int(rng.integers(2, 7))
        d = int(rng.integers(1, 4))
        spec = random_system(rng, N, d, int(rng.integers(1, 3)), d)
        sys = build_stacked(spec)
        K = random_causal_K(rng, spec)
        cl = closed_loop_from_controller(sys, ControllerRealization(K))
        worst_rt = max(worst_rt, float(np.linalg.norm(recover_controller(cl, sys).K - K)))
    for k in range(10):
        N = int(rng.integers(2, 7))
        d = int(rng.integers(1, 3))
        spec = random_system(rng, N, d, int(rng.integers(1, 3)), d)
        W = rng.normal(scale=0.5, size=(3, spec.s))
        ref = GaussianReference.isotropic(spec.s, 0.3)
        eps = [0.0, 0.05, 0.5][k % 3]
        rho = feasibility_threshold(W, ref, eps) + 1.0
        req = SynthesisRequest(spec, CostSpec.identity(spec), W, ref, AmbiguitySpec(rho, eps), strategy="direct", formulation=("literal", "compact")[k % 2])
        keep(synthesize_sinkhorn(req), build_stacked(spec))
    worst_ach = max(RETURNED)
    ok = worst_ach <= 1e-6 and worst_rt <= 1e-9
    assert report("4", ok, f"max achievability residual {worst_ach:.2e} over {len(RETURNED)} returned maps; max K round-trip error {worst_rt:.2e} over 40 instances")


# criterion 5: brute force on the smallest instance


def _brute_force(spec, cost, W, ref, rho, eps):
    sys = build_stacked(spec)
    nx = sys.N * sys.d
    T = np.linalg.solve(np.eye(nx) - sys.Z @ sys.bigA, np.hstack([sys.bigE, sys.Z @ sys.bigB]))
    TE, TB = T[:, : sys.s], T[:, sys.s :]
    mask = sys.phi_u_mask()

    def risk(theta):
        PhiU = np.zeros(mask.shape)
        PhiU[mask] = theta
        Phi = np.vstack([TE + TB @ PhiU, PhiU])
        return worst_case_risk(QuadraticLoss(Phi.T @ cost.D @ Phi), W, ref, rho, eps).value

    k = int(mask.sum())
    center, half = np.zeros(k), 4.0
    axis = np.linspace(-1.0, 1.0, 9)
    best = math.inf
    for _ in range(16):
        pts = np.stack(np.meshgrid(*([axis] * k), indexing="ij"), axis=-1).reshape(-1, k)
        for p in center + half * pts:
            v = risk(p)
            if v < best:
                best, arg = v, p
        center, half = arg, 0.35 * half
    return best, k


def test_criterion_5_brute_force():
    spec = scalar_system(2, a=2.0)
    cost = CostSpec.identity(spec)
    W = np.array([[0.8, -0.5]])
    ref = GaussianReference(np.zeros(2), np.eye(2))
    eps = 0.5
    rho = feasibility_threshold(W, ref, eps) + 1.0
    req = SynthesisRequest(spec, cost, W, ref, AmbiguitySpec(rho, eps))
    b = keep(synthesize_sinkhorn(req), build_stacked(spec))
    grid_best, k = _brute_force(spec, cost, W, ref, rho, eps)
    rel = abs(b.wc_cost - grid_best) / grid_best
    assert report("5", rel <= 1e-3, f"synthesis {b.wc_cost:.8f} vs refined grid over {k} free causal entries {grid_best:.8f} (rel {rel:.2e})")


# criterion 6: Q-swap certificate


def test_criterion_6_certificate():
    rng = np.random.default_rng(6)
    worst_v, worst_obj, passed = 0.0, 0.0, 0
    for k in range(20):
        N = int(rng.integers(2, 5))
        d = int(rng.integers(1, 3))
        spec = random_system(rng, N, d, int(rng.integers(1, 3)), d) if k % 2 else mass_spring_damper(N)
        W = rng.normal(scale=0.6, size=(int(rng.integers(2, 5)), spec.s))
        ref = GaussianReference.isotropic(spec.s, float(rng.uniform(0.1, 0.5)))
        eps = 0.0 if k % 5 == 0 else float(10 ** rng.uniform(-2, 0))
        rho = feasibility_threshold(W, ref, eps) + float(rng.uniform(0.2, 2.0))
        req = SynthesisRequest(
            spec, CostSpec.identity(spec), W, ref, AmbiguitySpec(rho, eps), strategy=("outer", "direct")[k % 2], formulation=("literal", "compact")[(k // 2) % 2]
        )
        b = keep(synthesize_sinkhorn(req), build_stacked(spec))
        rep = q_swap_certificate(b, req)
        passed += rep.passed
        worst_v = max(worst_v, rep.worst_violation)
        worst_obj = max(worst_obj, rep.objective_change)
    ok = passed == 20 and worst_v <= 1e-6 and worst_obj <= 1e-6
    assert report("6", ok, f"{passed}/20 certificates pass; worst scaled violation {worst_v:.2e}; worst objective change {worst_obj:.2e}")


# criterion 7: discrepancy ordering


def test_criterion_7_discrepancy_ordering():
    rng = np.random.default_rng(7)
    grid = np.logspace(-3, 1, 12)
    worst_lb, worst_mono, worst_ot = -math.inf, -math.inf, 0.0
    for _ in range(50):
        s = int(rng.integers(1, 4))
        nu = DiscreteMeasure.normalized(rng.normal(size=(6, s)), rng.uniform(0.1, 1, 6))
        P = DiscreteMeasure.normalized(rng.normal(size=(4, s)), rng.uniform(0.1, 1, 4))
        Q = DiscreteMeasure.normalized(nu.points, rng.uniform(0.05, 1, 6))
        w0 = discrete_sinkhorn(P, Q, nu, 0.0).value
        worst_ot = max(worst_ot, abs(w0 - discrete_ot(P, Q).value))
        vals = np.array([discrete_sinkhorn(P, Q, nu, e).value for e in grid])
        worst_lb = max(worst_lb, float(np.max(w0 - vals)))
        worst_mono = max(worst_mono, float(np.max(-np.diff(vals))))
    ok = worst_lb <= 1e-9 and worst_mono <= 1e-9 and worst_ot <= 1e-6
    assert report(
        "7",
        ok,
        f"50 instances: max (W^0 - W^eps) = {worst_lb:.2e}; max decrease along eps {worst_mono:.2e}; |W^0 - LP OT| max {worst_ot:.2e}",
    )


# criterion 8: out-of-sample comparison


def test_criterion_8_out_of_sample():
    cfg = load_config(
        {
            "system": {"type": "mass_spring_damper", "N": 15},
            "samples": {"generator": {"n": 4, "mean": 0, "cov": 0.3}},
            "reference": {"mean": 0, "cov": 0.1},
            "true": {"mean": 0, "cov": 0.3},
            "rho": [3, 20],
            "eps": [0.001, 0.01, 0.1],
            "replications": 20,
            "strategy": "direct",
            "formulation": "compact",
            "seed": 2024,
        }
    )
    _, summary = run_compare(cfg)
    med = {(r[0], r[1]): r[4] for r in summary}
    nominal, h2 = med[(NOMINAL_LABEL, None)], med[("h2-true", None)]
    ok, parts = True, []
    for rho in (3, 20):
        wass, best = med[("wasserstein", rho)], med.get(("sinkhorn-best", rho))
        good = best is not None and nominal > wass >= best >= h2
        ok &= good
        parts.append(f"rho={rho}: Wasserstein {wass:.3f}, best Sinkhorn {best if best is None else f'{best:.3f}'}")
    assert report("8", ok, f"medians over 20 replications: nominal {nominal:.4g}; " + "; ".join(parts) + f"; H2-true {h2:.3f}")


# criterion 9: Monte Carlo consistency


def test_criterion_9_monte_carlo(interp):
    spec, cost = interp["spec"], interp["cost"]
    req = SynthesisRequest(spec, cost, interp["samples"], interp["ref"], AmbiguitySpec(4.0, 0.01), strategy="direct", formulation="compact")
    cl = keep(synthesize_sinkhorn(req), build_stacked(spec)).map
    true = MomentSpec(np.zeros(spec.s), 0.5 * np.eye(spec.s))
    mean, se = monte_carlo_cost(spec, cl, cost, gaussian_sampler(true.mean, true.cov), 100_000, seed=9)
    analytic = evaluate_expected_cost(cl, true, cost)
    z = (mean - analytic) / se
    assert report("9", abs(z) <= 3.0, f"1e5 rollouts: mean {mean:.5f} +/- {se:.5f}, analytic {analytic:.5f}, z = {z:.2f}")
