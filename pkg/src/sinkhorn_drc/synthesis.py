"""Distributionally robust SLS synthesis over Sinkhorn and Wasserstein balls.

The worst-case expected cost of a closed-loop map ``Phi`` is the worst-case
quadratic loss with ``Q = Phi^T D Phi``.  Replacing that equality by
``Q >= Phi^T D Phi`` (a Schur LMI) and the per-sample log-partition terms by
epigraph variables yields a convex conic program in
``(lambda, Q, s_i, zeta_i, Phi)``:

    minimize    lambda rho + mean_i s_i
    subject to  M = lambda (I + eps/2 Sigma^-1) - Q >= delta I
                s_i >= zeta_i + c(lambda) - (lambda eps / 2) log|M|
                [[M, v_i], [v_i^T, zeta_i + kappa_i]] >= 0
                [[Q, (D^1/2 Phi)^T], [D^1/2 Phi, I]] >= 0
                [I - Z A, -Z B] Phi = E,  Phi causal

with ``c(lambda) = (lambda eps s / 2) log(lambda eps / 2) - (lambda eps / 2) log|Sigma|``,
``v_i = lambda (w_i + eps/2 Sigma^-1 m)`` and
``kappa_i = lambda (||w_i||^2 + eps/2 ||m||^2_{Sigma^-1})``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ambiguity import AmbiguitySpec, GaussianReference, feasibility_threshold
from .conic import ConicProgram, Solution, bmat, encode_logdet_hypograph, solve, validate
from .conic.backends import SolverReport
from .duality import QuadraticLoss, worst_case_risk
from .errors import InfeasibleError, SolverError, UnboundedError, ValidationError
from .search import bracket_minimum, golden_section
from .system import (
    ClosedLoopMap,
    CostSpec,
    SampleSet,
    StackedSystem,
    SystemSpec,
    achievability_residual,
    build_stacked,
)

DELTA = 1e-9
FORMULATIONS = ("literal", "compact")
FEASIBILITY_MARGIN = 1e-9


@dataclass(frozen=True)
class Tolerances:
    backend: str = "clarabel"
    solver: dict = field(default_factory=dict)
    lambda_xtol_rel: float = 1e-7
    value_ftol_rel: float = 1e-10
    certificate: float = 1e-6


@dataclass(frozen=True)
class SynthesisRequest:
    system: SystemSpec
    cost: CostSpec
    samples: SampleSet
    ref: GaussianReference
    amb: AmbiguitySpec
    strategy: str = "outer"
    tolerances: Tolerances = field(default_factory=Tolerances)
    formulation: str = "literal"

    def __post_init__(self):
        s = self.system.s
        if not isinstance(self.samples, SampleSet):
            object.__setattr__(self, "samples", SampleSet(self.samples))
        self.samples.check(s)
        if self.ref.s != s:
            raise ValidationError(f"reference has dimension {self.ref.s}, system expects s = {s}")
        nz = self.system.N * (self.system.d + self.system.m)
        if self.cost.D.shape != (nz, nz):
            raise ValidationError(f"D has shape {self.cost.D.shape}, expected {(nz, nz)}")
        if self.strategy not in ("outer", "direct"):
            raise ValidationError(f"strategy must be 'outer' or 'direct', got {self.strategy!r}")
        if self.formulation not in FORMULATIONS:
            raise ValidationError(f"formulation must be one of {FORMULATIONS}, got {self.formulation!r}")

    @property
    def stacked(self) -> StackedSystem:
        return build_stacked(self.system)

    def with_amb(self, rho: float, eps: float) -> "SynthesisRequest":
        return SynthesisRequest(self.system, self.cost, self.samples, self.ref, AmbiguitySpec(rho, eps), self.strategy, self.tolerances, self.formulation)


@dataclass(frozen=True)
class MomentSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(f"cov has shape {cov.shape}, expected {(mean.size, mean.size)}")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValidationError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if cov.size and np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ValidationError("cov must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def empirical(cls, samples) -> "MomentSpec":
        W = samples.trajectories if isinstance(samples, SampleSet) else np.atleast_2d(samples)
        mu = W.mean(axis=0)
        C = W - mu
        return cls(mu, C.T @ C / W.shape[0])

    @classmethod
    def of_reference(cls, ref: GaussianReference) -> "MomentSpec":
        return cls(ref.mean, ref.cov)

    @property
    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)


@dataclass
class SolutionBundle:
    map: ClosedLoopMap
    lambda_star: float
    wc_cost: float
    s: np.ndarray
    zeta: np.ndarray
    Q_star: np.ndarray
    solver_report: SolverReport | None
    rho: float = 0.0
    eps: float = 0.0
    rho_min: float = 0.0
    strategy: str = ""
    achievability: float = 0.0
    lambda_history: list = field(default_factory=list, repr=False)
    at_boundary: bool = False

    def loss(self, cost: CostSpec) -> QuadraticLoss:
        Phi = self.map.Phi
        return QuadraticLoss(Phi.T @ cost.D @ Phi)


def _c0(lam: float, eps: float, ref: GaussianReference) -> float:
    if eps == 0:
        return 0.0
    s = ref.s
    return 0.5 * lam * eps * s * math.log(0.5 * lam * eps) - 0.5 * lam * eps * ref.logdet


def assemble_sinkhorn_program(
    req: SynthesisRequest, lam: float | None = None, check_feasibility: bool = True
) -> ConicProgram:
    """Build the conic program; ``lam`` fixes the multiplier (inner problem of the outer search).

    With ``lam = None`` and ``eps > 0`` the log-partition constant is written in
    perspective form so the whole problem stays jointly convex.
    """
    rho, eps = req.amb.rho, req.amb.eps
    W = req.samples.trajectories
    rho_min = feasibility_threshold(W, req.ref, eps)
    if check_feasibility and rho < rho_min:
        raise InfeasibleError(rho, rho_min)
    sys = req.stacked
    s, n = sys.s, W.shape[0]
    ref = req.ref
    nx, nu = sys.N * sys.d, sys.N * sys.m
    if lam is not None and not lam > 0:
        raise ValidationError(f"fixed lambda must be positive, got {lam}")

    prog = ConicProgram("sinkhorn-drc" if eps > 0 else "wasserstein-drc")
    PhiX = prog.variable("Phi_x", (nx, s), mask=sys.phi_x_mask())
    PhiU = prog.variable("Phi_u", (nu, s), mask=sys.phi_u_mask())
    Q = prog.symmetric("Q", s)
    sv = prog.variable("s", (n,))
    zeta = prog.variable("zeta", (n,))
    lam_e = prog.variable("lambda") if lam is None else float(lam)

    Phi = bmat([[PhiX], [PhiU]])
    prog.add_zero(sys.achievability_operator() @ Phi - sys.bigE, "achievability: [I - ZA, -ZB] Phi = E")

    tilt = np.eye(s) + 0.5 * eps * ref.cov_inv
    M = lam_e * tilt - Q
    prog.add_psd(M - (DELTA * (1.0 + lam_e)) * np.eye(s), "M >= delta I")

    if eps > 0:
        if lam is None:
            tp = encode_logdet_hypograph(prog, M, name="logdet_persp", perspective=lam_e)
            lin = 0.5 * eps * s * math.log(0.5 * eps) - 0.5 * eps * ref.logdet
            prog.add_nonneg(sv - zeta - lin * lam_e + 0.5 * eps * tp, "epigraph: s_i >= zeta_i + c(lambda) - (lambda eps/2) log|M|")
            prog.handles["logdet"] = tp
        else:
            t = encode_logdet_hypograph(prog, M, name="logdet")
            prog.add_nonneg(sv - zeta - _c0(lam, eps, ref) + 0.5 * lam * eps * t, "epigraph: s_i >= zeta_i + c(lambda) - (lambda eps/2) log|M|")
            prog.handles["logdet"] = t
    else:
        prog.add_nonneg(sv - zeta, "epigraph: s_i >= zeta_i")

    shift = 0.5 * eps * (ref.cov_inv @ ref.mean)
    mterm = 0.5 * eps * ref.mahalanobis_mean()
    if req.formulation == "literal":
        for i in range(n):
            v = lam_e * (W[i] + shift)[:, None]
            kappa = lam_e * (float(W[i] @ W[i]) + mterm)
            corner = (zeta[i] + kappa).reshape((1, 1))
            prog.add_psd(bmat([[M, v], [v.T, corner]]), f"sample {i}: [[M, v_i], [v_i^T, zeta_i + kappa_i]] >= 0")
    else:
        # only the sum of the zeta_i reaches the objective, so the n sample LMIs
        # collapse to sum_i v_i^T M^-1 v_i <= tr Y with [[M, V], [V^T, Y]] >= 0
        C = _sample_factor(W + shift)
        Y = prog.symmetric("Y", C.shape[1])
        V = lam_e * C
        kappa_sum = lam_e * (float(np.sum(W * W)) + n * mterm)
        prog.add_psd(bmat([[M, V], [V.T, Y]]), "aggregated samples: [[M, V], [V^T, Y]] >= 0")
        prog.add_nonneg(zeta.sum() + kappa_sum - Y.trace(), "aggregated samples: sum_i zeta_i + kappa_i >= tr Y")

    if req.formulation == "literal":
        DP = req.cost.Dhalf @ Phi
        prog.add_psd(bmat([[Q, DP.T], [DP, np.eye(DP.shape[0])]]), "Schur: Q >= Phi^T D Phi")
    else:
        # on achievable maps D^1/2 Phi = F0 + G Phi_u; project onto range(G)
        # and move the constant orthogonal part of F0 into Q
        C, U0, R = reduced_schur_data(sys, req.cost)
        Yr = R @ PhiU + U0
        prog.add_psd(bmat([[Q - C, Yr.T], [Yr, np.eye(Yr.shape[0])]]), "Schur (reduced): Q >= Phi^T D Phi")

    prog.minimize(lam_e * rho + sv.sum() / n)
    prog.handles.update(Phi=Phi, M=M)
    if lam is None:
        prog.handles["lambda"] = lam_e
    return prog


def reduced_schur_data(sys: StackedSystem, cost: CostSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(C, U^T F0, U^T G)`` with ``Phi^T D Phi = C + (U^T F0 + U^T G Phi_u)^T (...)`` on achievable maps."""
    _, _, F0, G = _h2_parametrization(sys, cost)
    U, sv, _ = np.linalg.svd(G, full_matrices=False)
    r = int(np.sum(sv > 1e-12 * max(1.0, sv.max(initial=0.0))))
    U = U[:, :r]
    P0 = F0 - U @ (U.T @ F0)
    C = P0.T @ P0
    return 0.5 * (C + C.T), U.T @ F0, U.T @ G


def _sample_factor(B: np.ndarray) -> np.ndarray:
    """``C`` with ``C C^T = B^T B`` and at most ``min(n, s)`` columns."""
    n, s = B.shape
    if n <= s:
        return B.T.copy()
    vals, vecs = np.linalg.eigh(B.T @ B)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def tight_epigraphs(req: SynthesisRequest, Q: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest ``(s_i, zeta_i)`` compatible with ``(Q, lambda)``."""
    ref, eps = req.ref, req.amb.eps
    W = req.samples.trajectories
    M = lam * (np.eye(ref.s) + 0.5 * eps * ref.cov_inv) - Q
    V = lam * (W + 0.5 * eps * (ref.cov_inv @ ref.mean))
    L = np.linalg.cholesky(0.5 * (M + M.T))
    Y = np.linalg.solve(L, V.T)
    zeta = np.sum(Y * Y, axis=0) - lam * (np.sum(W * W, axis=1) + 0.5 * eps * ref.mahalanobis_mean())
    if eps == 0:
        return zeta.copy(), zeta
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return zeta + _c0(lam, eps, ref) - 0.5 * lam * eps * logdet, zeta


def _certified_epigraphs(req: SynthesisRequest, sol: Solution, lam: float):
    """Epigraphs re-derived at ``Q = Phi^T D Phi`` for a loosely solved point.

    The result is feasible by construction, so its objective is a value the
    returned map really attains.  Raises ``LinAlgError`` when ``M`` is not
    positive definite at that point.
    """
    Phi = np.vstack([sol.values["Phi_x"], sol.values["Phi_u"]])
    Q = Phi.T @ req.cost.D @ Phi
    sv, zeta = tight_epigraphs(req, Q, lam)
    return Q, sv, zeta


def _fallback_backend(name: str) -> str:
    return "scs" if name != "scs" else "clarabel"


def _bundle_from(req: SynthesisRequest, prog: ConicProgram, sol: Solution, lam: float | None, strategy: str) -> SolutionBundle:
    sys = req.stacked
    vals = sol.values
    lam_v = float(vals["lambda"]) if lam is None else float(lam)
    cl = ClosedLoopMap(vals["Phi_x"], vals["Phi_u"])
    sv = np.asarray(vals["s"], dtype=float)
    zeta = np.asarray(vals["zeta"], dtype=float)
    Q = vals["Q"]
    if sol.report.status == "inaccurate":
        Q, sv, zeta = _certified_epigraphs(req, sol, lam_v)
    elif req.formulation == "compact":
        # individual epigraphs are not pinned down by the aggregated sample LMI
        sv, zeta = tight_epigraphs(req, Q, lam_v)
    wc = lam_v * req.amb.rho + float(sv.mean())
    rho_min = feasibility_threshold(req.samples, req.ref, req.amb.eps)
    return SolutionBundle(
        map=cl,
        lambda_star=lam_v,
        wc_cost=wc,
        s=sv,
        zeta=zeta,
        Q_star=Q,
        solver_report=sol.report,
        rho=req.amb.rho,
        eps=req.amb.eps,
        rho_min=rho_min,
        strategy=strategy,
        achievability=achievability_residual(sys, cl),
    )


def _check(sol: Solution, what: str) -> None:
    st = sol.report.status
    if st == "infeasible":
        raise SolverError(f"{what}: backend reports the program infeasible", sol.report)
    if st == "unbounded":
        raise UnboundedError(f"{what}: backend reports the program unbounded")
    if st not in ("optimal", "inaccurate"):
        raise SolverError(f"{what}: backend status {sol.report.raw_status or st}", sol.report)


def _solve(req: SynthesisRequest, prog: ConicProgram) -> Solution:
    tol = req.tolerances
    return solve(prog, tol.backend, **tol.solver)


def _empirical_bundle(req: SynthesisRequest) -> SolutionBundle:
    """rho = 0 and eps = 0: the ball is the empirical distribution itself."""
    nom = synthesize_h2(req.system, req.cost, MomentSpec(np.zeros(req.system.s), req.samples.trajectories.T @ req.samples.trajectories / req.samples.n))
    Phi = nom.map.Phi
    Q = Phi.T @ req.cost.D @ Phi
    W = req.samples.trajectories
    per = np.einsum("ki,ij,kj->k", W, Q, W)
    return SolutionBundle(
        nom.map, math.inf, float(per.mean()), per, per, Q, None, 0.0, 0.0, 0.0, "empirical", nom.achievability, at_boundary=True
    )


def synthesize_wasserstein(req: SynthesisRequest) -> SolutionBundle:
    """Single conic solve with every entropic term removed."""
    if req.amb.eps != 0:
        req = req.with_amb(req.amb.rho, 0.0)
    if req.amb.rho == 0:
        return _empirical_bundle(req)
    prog = assemble_sinkhorn_program(req)
    sol = _solve(req, prog)
    _check(sol, "wasserstein synthesis")
    return _bundle_from(req, prog, sol, None, "direct")


def _initial_lambda(req: SynthesisRequest) -> float:
    nom = synthesize_nominal(req.system, req.cost, req.samples)
    loss = nom.loss(req.cost)
    try:
        ev = worst_case_risk(loss, req.samples, req.ref, req.amb.rho, req.amb.eps, xtol_rel=1e-4)
        if math.isfinite(ev.lambda_star):
            return ev.lambda_star
    except UnboundedError:
        pass
    return 1.0


def synthesize_sinkhorn(req: SynthesisRequest) -> SolutionBundle:
    """Optimal worst-case closed-loop map over the Sinkhorn ball.

    ``strategy='outer'`` solves fixed-multiplier programs and minimizes their
    value over the multiplier (convex in it) by bracketing and golden section;
    ``strategy='direct'`` solves the perspective form once.
    """
    rho, eps = req.amb.rho, req.amb.eps
    if eps == 0:
        return synthesize_wasserstein(req)
    rho_min = feasibility_threshold(req.samples, req.ref, eps)
    if rho < rho_min + FEASIBILITY_MARGIN:
        raise InfeasibleError(rho, rho_min)
    if req.strategy == "direct":
        prog = assemble_sinkhorn_program(req)
        sol = _solve(req, prog)
        _check(sol, "direct sinkhorn synthesis")
        return _bundle_from(req, prog, sol, None, "direct")

    cache: dict[float, tuple[ConicProgram, Solution]] = {}

    def value(lam: float) -> float:
        if not lam > 0:
            return math.inf
        prog = assemble_sinkhorn_program(req, lam)
        sol = _solve(req, prog)
        if sol.report.status == "failed":
            # typically numerical trouble next to the edge of the multiplier's domain
            sol = solve(prog, _fallback_backend(req.tolerances.backend))
        if sol.report.status not in ("optimal", "inaccurate"):
            return math.inf
        if sol.report.status == "inaccurate":
            try:
                _certified_epigraphs(req, sol, lam)
            except np.linalg.LinAlgError:
                return math.inf
        cache[lam] = (prog, sol)
        return _bundle_from(req, prog, sol, lam, "outer").wc_cost

    lam0 = _initial_lambda(req)
    lo, mid, hi, fmid, evaluated = bracket_minimum(value, lam0, cap=1e9, floor=0.0)
    if not math.isfinite(fmid):
        raise SolverError("no multiplier with a feasible inner program was found")
    if mid >= 1e9 / 2.0:
        raise UnboundedError(f"outer value still decreasing at lambda = {mid:.3e}")
    ftol = req.tolerances.value_ftol_rel * max(1.0, abs(fmid))
    res = golden_section(value, lo, hi, xtol_rel=req.tolerances.lambda_xtol_rel, ftol_abs=ftol)
    history = evaluated + res.history
    best_lam, best_val = min(history, key=lambda t: (t[1], t[0]))
    prog, sol = cache[best_lam]
    out = _bundle_from(req, prog, sol, best_lam, "outer")
    out.lambda_history = history
    return out


def _h2_parametrization(sys: StackedSystem, cost: CostSpec):
    """Affine map from the free causal entries of Phi_u to ``D^1/2 Phi``.

    Achievable maps are exactly ``Phi_x = (I - ZA)^{-1} (E + Z B Phi_u)`` with a
    causal ``Phi_u``, so ``D^1/2 Phi = F0 + G Phi_u``.
    """
    nx = sys.N * sys.d
    T = np.linalg.solve(np.eye(nx) - sys.Z @ sys.bigA, np.hstack([sys.bigE, sys.Z @ sys.bigB]))
    TE, TB = T[:, : sys.s], T[:, sys.s :]
    nu = sys.N * sys.m
    F0 = cost.Dhalf @ np.vstack([TE, np.zeros((nu, sys.s))])
    G = cost.Dhalf @ np.vstack([TB, np.eye(nu)])
    return TE, TB, F0, G


def synthesize_h2(system: SystemSpec, cost: CostSpec, moments: MomentSpec) -> SolutionBundle:
    """Minimize ``E ||D^1/2 Phi w||^2`` over achievable causal maps as a least-squares problem."""
    sys = build_stacked(system)
    if moments.mean.size != sys.s:
        raise ValidationError(f"moments have dimension {moments.mean.size}, system expects s = {sys.s}")
    TE, TB, F0, G = _h2_parametrization(sys, cost)
    S = moments.second_moment
    vals, vecs = np.linalg.eigh(S)
    R = vecs * np.sqrt(np.clip(vals, 0.0, None))  # S = R R^T
    mask = sys.phi_u_mask()
    # vec(G X R) = (R^T kron G) vec(X) with column-major vec
    big = np.kron(R.T, G)
    cols = np.flatnonzero(mask.ravel(order="F"))
    A = big[:, cols]
    rhs = -(F0 @ R).ravel(order="F")
    theta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    flat = np.zeros(mask.size)
    flat[cols] = theta
    PhiU = flat.reshape(mask.shape, order="F")
    PhiX = TE + TB @ PhiU
    PhiX = np.where(sys.phi_x_mask(), PhiX, 0.0)
    cl = ClosedLoopMap(PhiX, PhiU)
    Q = cl.Phi.T @ cost.D @ cl.Phi
    val = evaluate_expected_cost(cl, moments, cost)
    return SolutionBundle(cl, 0.0, val, np.zeros(0), np.zeros(0), Q, None, strategy="h2", achievability=achievability_residual(sys, cl))


def synthesize_nominal(system: SystemSpec, cost: CostSpec, samples) -> SolutionBundle:
    """H2 controller for the empirical moments of the samples."""
    return synthesize_h2(system, cost, MomentSpec.empirical(samples))


def evaluate_expected_cost(cl: ClosedLoopMap, moments: MomentSpec, cost: CostSpec | None = None) -> float:
    """``tr(Phi^T D Phi Sigma) + mu^T Phi^T D Phi mu``."""
    Phi = cl.Phi
    D = np.eye(Phi.shape[0]) if cost is None else cost.D
    if Phi.shape[1] != moments.mean.size or D.shape[0] != Phi.shape[0]:
        raise ValidationError("map, cost and moments dimensions do not match")
    P = Phi.T @ D @ Phi
    return float(np.trace(P @ moments.cov) + moments.mean @ P @ moments.mean)


@dataclass
class CertificateReport:
    passed: bool
    violations: dict
    worst: str
    worst_violation: float
    objective_before: float
    objective_after: float

    @property
    def objective_change(self) -> float:
        return abs(self.objective_after - self.objective_before)


def _min_eig(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (X + X.T))[0])


def certificate_violations(req: SynthesisRequest, cl: ClosedLoopMap, Q: np.ndarray, lam: float, sv: np.ndarray, zeta: np.ndarray) -> dict:
    """Scaled violation of each constraint group at the given point (0 when satisfied)."""
    sys = req.stacked
    ref, eps = req.ref, req.amb.eps
    W = req.samples.trajectories
    s = sys.s
    M = lam * (np.eye(s) + 0.5 * eps * ref.cov_inv) - Q
    scale = max(1.0, np.abs(M).max())
    out = {"achievability": achievability_residual(sys, cl)}
    out["M >= delta I"] = max(0.0, -(_min_eig(M) - DELTA * (1 + lam)) / scale)
    if eps > 0:
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            out["epigraph"] = math.inf
        else:
            rhs = zeta + _c0(lam, eps, ref) - 0.5 * lam * eps * logdet
            out["epigraph"] = float(max(0.0, np.max((rhs - sv) / np.maximum(1.0, np.abs(sv)))))
    else:
        out["epigraph"] = float(max(0.0, np.max((zeta - sv) / np.maximum(1.0, np.abs(sv)))))
    shift = 0.5 * eps * (ref.cov_inv @ ref.mean)
    mterm = 0.5 * eps * ref.mahalanobis_mean()
    worst = 0.0
    for i in range(W.shape[0]):
        v = lam * (W[i] + shift)
        corner = zeta[i] + lam * (W[i] @ W[i] + mterm)
        blk = np.block([[M, v[:, None]], [v[None, :], np.array([[corner]])]])
        worst = max(worst, -_min_eig(blk) / max(1.0, np.abs(blk).max()))
    out["sample LMIs"] = max(0.0, worst)
    DP = req.cost.Dhalf @ cl.Phi
    schur = np.block([[Q, DP.T], [DP, np.eye(DP.shape[0])]])
    out["Schur"] = max(0.0, -_min_eig(schur) / max(1.0, np.abs(schur).max()))
    return out


def q_swap_certificate(bundle: SolutionBundle, req: SynthesisRequest, Q: np.ndarray | None = None, lam: float | None = None) -> CertificateReport:
    """Re-check the program at ``Q = Phi*^T D Phi*`` with the returned multiplier and epigraphs.

    ``Q`` and ``lam`` override the substituted values (used for sensitivity checks).
    """
    if not math.isfinite(bundle.lambda_star):
        raise ValidationError("bundle has no finite multiplier to certify")
    Phi = bundle.map.Phi
    Qs = Phi.T @ req.cost.D @ Phi if Q is None else np.asarray(Q, dtype=float)
    lam_v = bundle.lambda_star if lam is None else float(lam)
    viol = certificate_violations(req, bundle.map, Qs, lam_v, bundle.s, bundle.zeta)
    worst = max(viol, key=viol.get)
    before = bundle.lambda_star * req.amb.rho + float(bundle.s.mean())
    after = lam_v * req.amb.rho + float(bundle.s.mean())
    tol = req.tolerances.certificate
    passed = viol[worst] <= tol and abs(after - before) <= tol * max(1.0, abs(before))
    return CertificateReport(passed, viol, worst, viol[worst], before, after)


def solver_feasible(req: SynthesisRequest, lambda_cap: float = 1e6) -> tuple[bool, float]:
    """Classify a radius by a single capped direct solve.

    Below the threshold the dual decreases without bound in the multiplier,
    so the capped optimum sits on the cap.  Returns ``(feasible, lambda)``.
    """
    prog = assemble_sinkhorn_program(req, check_feasibility=False)
    prog.add_nonneg(lambda_cap - prog.handles["lambda"], "lambda <= cap")
    sol = _solve(req, prog)
    if sol.report.status == "unbounded":
        return False, math.inf
    _check(sol, "feasibility probe")
    lam_v = float(sol.values["lambda"])
    return lam_v < 0.5 * lambda_cap, lam_v


def empirical_feasibility_boundary(
    req: SynthesisRequest,
    lo: float,
    hi: float,
    tol: float = 1e-4,
    lambda_cap: float = 1e6,
) -> float:
    """Bisect the radius at which the capped solve stops hitting the multiplier cap."""
    if solver_feasible(req.with_amb(lo, req.amb.eps), lambda_cap)[0]:
        raise ValidationError(f"lower end {lo} is already classified feasible")
    if not solver_feasible(req.with_amb(hi, req.amb.eps), lambda_cap)[0]:
        raise ValidationError(f"upper end {hi} is not classified feasible")
    while hi - lo > tol * max(1.0, abs(hi)):
        mid = 0.5 * (lo + hi)
        if solver_feasible(req.with_amb(mid, req.amb.eps), lambda_cap)[0]:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def program_summary(prog: ConicProgram) -> dict:
    diag = validate(prog)
    std = prog.compile()
    return {"variables": prog.nvar, "rows": std.A.shape[0], "cones": std.counts, "clean": diag.clean}
