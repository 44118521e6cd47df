import json
import math

import numpy as np
import pytest

from sinkhorn_drc.conic import (
    BACKENDS,
    ConicProgram,
    bmat,
    compile_program,
    constraint_violation,
    encode_logdet_hypograph,
    get_backend,
    program_to_dict,
    smat,
    solve,
    validate,
)
from sinkhorn_drc.conic.ir import svec_expr
from sinkhorn_drc.errors import SolverError


def max_logdet(M, backend="clarabel", **settings):
    prog = ConicProgram("logdet")
    t = encode_logdet_hypograph(prog, M)
    prog.maximize(t)
    return solve(prog, backend, **settings)


def random_pd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T / k + 0.1 * np.eye(k)


def lp_example():
    prog = ConicProgram("lp")
    x = prog.variable("x")
    prog.add_nonneg(x - 3.0, "x >= 3")
    prog.minimize(x)
    return prog


def sdp_example():
    prog = ConicProgram("sdp")
    X = prog.symmetric("X", 2)
    prog.add_psd(X - np.eye(2), "X >= I")
    prog.minimize(X.trace())
    return prog


def exp_example():
    prog = ConicProgram("exp")
    t = prog.variable("t")
    prog.add_exp(t, 1.0, 5.0, "t <= log 5")
    prog.maximize(t)
    return prog


def mixed_example():
    """Small program touching every cone: a regularized log-det problem with a linear budget."""
    prog = ConicProgram("mixed")
    X = prog.symmetric("X", 3)
    y = prog.variable("y", 2)
    t = encode_logdet_hypograph(prog, X)
    prog.add_zero(y.sum() - 1.0, "y sums to 1")
    prog.add_nonneg(y, "y >= 0")
    prog.add_psd(np.diag([2.0, 3.0, 4.0]) - X - 0.1 * bmat([[y[0:1].reshape((1, 1)), np.zeros((1, 2))], [np.zeros((2, 1)), np.zeros((2, 2))]]), "X <= D")
    prog.maximize(t + y[1])
    return prog


class TestSolve:
    def test_lp(self):
        sol = solve(lp_example())
        assert sol.report.status == "optimal"
        assert sol.report.objective == pytest.approx(3.0, abs=1e-7)
        assert sol.values["x"] == pytest.approx(3.0, abs=1e-7)

    def test_sdp(self):
        sol = solve(sdp_example())
        assert sol.report.objective == pytest.approx(2.0, abs=1e-7)
        np.testing.assert_allclose(sol.values["X"], np.eye(2), atol=1e-6)

    def test_exp(self):
        assert solve(exp_example()).report.objective == pytest.approx(math.log(5.0), abs=1e-7)

    def test_infeasible_and_unbounded(self):
        prog = ConicProgram()
        x = prog.variable("x")
        prog.add_nonneg(x - 1.0, "x >= 1")
        prog.add_nonneg(-x, "x <= 0")
        prog.minimize(x)
        assert solve(prog).report.status == "infeasible"
        prog = ConicProgram()
        x = prog.variable("x")
        prog.add_nonneg(x, "x >= 0")
        prog.maximize(x)
        assert solve(prog).report.status == "unbounded"

    def test_deterministic(self):
        a, b = solve(mixed_example()), solve(mixed_example())
        np.testing.assert_array_equal(a.x, b.x)

    def test_unknown_backend(self):
        with pytest.raises(SolverError):
            get_backend("nope")

    def test_backends_declare_exp_support(self):
        assert all(be.supports_exp for be in BACKENDS.values())

    @pytest.mark.parametrize("make", [lp_example, sdp_example, exp_example, mixed_example])
    def test_round_trip_satisfies_every_constraint(self, make):
        prog = make()
        sol = solve(prog)
        for con in prog.constraints:
            assert constraint_violation(con, sol.x) <= 1e-7, con.name

    @pytest.mark.parametrize("make", [lp_example, sdp_example, exp_example, mixed_example])
    def test_two_backends_agree(self, make):
        a = solve(make(), "clarabel")
        b = solve(make(), "scs")
        assert b.report.status in ("optimal", "inaccurate")
        assert a.report.objective == pytest.approx(b.report.objective, abs=1e-6, rel=1e-6)


class TestLogdet:
    def test_identity(self):
        assert max_logdet(np.eye(2)).report.objective == pytest.approx(0.0, abs=1e-7)

    def test_scaled_identity(self):
        assert max_logdet(2.0 * np.eye(2)).report.objective == pytest.approx(2 * math.log(2.0), abs=1e-7)

    def test_singular_limit(self):
        vals = []
        for sigma in (1e-2, 1e-4, 1e-6):
            sol = max_logdet(np.diag([1.0, sigma]))
            assert sol.report.status in ("optimal", "inaccurate")
            vals.append(sol.report.objective)
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] < math.log(1e-6) + 0.5

    @pytest.mark.parametrize("k", [1, 2, 3, 5, 8, 13, 20])
    def test_random_pd(self, rng, k):
        M = random_pd(rng, k)
        sol = max_logdet(M)
        assert sol.report.objective == pytest.approx(np.linalg.slogdet(M)[1], abs=1e-6)

    def test_never_exceeds_logdet(self, rng):
        # any feasible t satisfies t <= log|M|: fix t above the bound and expect infeasibility
        M = random_pd(rng, 4)
        prog = ConicProgram()
        t = encode_logdet_hypograph(prog, M)
        prog.add_zero(t - (np.linalg.slogdet(M)[1] + 1e-3), "t pinned above log|M|")
        prog.minimize(0.0 * t)
        assert solve(prog).report.status == "infeasible"

    def test_perspective(self, rng):
        M = random_pd(rng, 3)
        prog = ConicProgram()
        y = prog.variable("y")
        prog.add_zero(y - 2.5, "y = 2.5")
        t = encode_logdet_hypograph(prog, 2.5 * M, perspective=y)
        prog.maximize(t)
        # y log|yM / y| = y log|M|
        assert solve(prog).report.objective == pytest.approx(2.5 * np.linalg.slogdet(M)[1], abs=1e-6)


class TestValidate:
    def test_sinkhorn_program_clean(self, rng):
        from sinkhorn_drc.ambiguity import AmbiguitySpec, GaussianReference
        from sinkhorn_drc.synthesis import SynthesisRequest, assemble_sinkhorn_program
        from sinkhorn_drc.system import CostSpec, mass_spring_damper

        spec = mass_spring_damper(3)
        req = SynthesisRequest(
            spec, CostSpec.identity(spec), rng.normal(size=(3, spec.s)), GaussianReference.isotropic(spec.s, 0.2), AmbiguitySpec(10.0, 0.1)
        )
        for lam in (None, 5.0):
            diag = validate(assemble_sinkhorn_program(req, lam))
            assert diag.clean, str(diag)

    def test_asymmetric_psd_flagged(self):
        prog = ConicProgram()
        x = prog.variable("x", (2, 2))
        prog.add_psd(x, "asymmetric block")
        prog.minimize(x.trace())
        diag = validate(prog)
        assert any("not symmetric" in e for e in diag.errors)

    def test_empty_objective_warns(self):
        prog = ConicProgram()
        x = prog.variable("x")
        prog.add_nonneg(x, "x >= 0")
        diag = validate(prog)
        assert any("objective" in w for w in diag.warnings)
        assert not diag.clean

    def test_unreferenced_listed(self):
        prog = lp_example()
        prog.variable("spare", 3)
        assert validate(prog).unreferenced == ["spare"]

    def test_bad_shapes_name_the_row(self):
        prog = ConicProgram()
        x = prog.variable("x", (2, 3))
        with pytest.raises(ValueError, match="rect"):
            prog.add_psd(x, "rect")


class TestIR:
    def test_svec_preserves_inner_products(self, rng):
        A, B = random_pd(rng, 4), random_pd(rng, 4)
        prog = ConicProgram()
        X = prog.symmetric("X", 4)
        v = svec_expr(X)
        x = rng.normal(size=prog.nvar)
        Xv = X.value(x)
        assert v.value(x) @ v.value(x) == pytest.approx(np.sum(Xv * Xv))
        np.testing.assert_allclose(smat(v.value(x), 4), Xv)
        pa, pb = ConicProgram(), ConicProgram()
        assert svec_expr(pa.symmetric("A", 4) + A).const @ svec_expr(pb.symmetric("B", 4) + B).const == pytest.approx(np.sum(A * B))

    def test_masked_variables_only_expose_free_entries(self):
        prog = ConicProgram()
        mask = np.tril(np.ones((3, 3), dtype=bool))
        X = prog.variable("L", (3, 3), mask=mask)
        assert prog.nvar == 6
        vals = X.value(np.arange(1.0, 7.0))
        assert not vals[~mask].any()

    def test_dump_is_json(self):
        d = program_to_dict(mixed_example())
        text = json.dumps(d)
        assert json.loads(text)["format"] == "conic-ir/1"
        assert {c["cone"] for c in d["cones"]} == {"zero", "nonneg", "psd", "exp"}

    def test_standard_form_counts(self):
        std = compile_program(mixed_example())
        counts = std.counts
        assert counts["zero"] == 1 and counts["nonneg"] == 3 and sorted(counts["psd"]) == [3, 6] and counts["exp"] == 3
        assert std.constraint_at_row(0) == "y sums to 1"
