"""Worst-case expected quadratic loss over a Sinkhorn ball via its scalar dual.

For ``l(z) = z^T Q z + 2 q^T z``, a Gaussian reference ``nu = N(m, Sigma)`` and
empirical samples ``w_i``, the worst case equals

    inf_{lambda} lambda * rho + mean_i lambda eps log E_nu exp((l(z) - lambda ||w_i - z||^2) / (lambda eps))

and each log-expectation is a Gaussian integral with a closed form as long as
``M = lambda (I + eps/2 Sigma^-1) - Q`` is positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import logsumexp

from .ambiguity import DiscreteMeasure, GaussianReference, feasibility_threshold, kernel_moments, sq_euclidean_cost
from .errors import DivergentIntegralError, InfeasibleError, OracleError, UnboundedError, ValidationError
from .search import bracket_minimum, golden_section
from .system import SampleSet, as_samples

LAMBDA_CAP = 1e12


@dataclass(frozen=True)
class QuadraticLoss:
    """``l(z) = z^T Q z + 2 q^T z``."""

    Q: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValidationError(f"Q must be square, got {Q.shape}")
        if not np.allclose(Q, Q.T, atol=1e-10 * max(1.0, np.abs(Q).max())):
            raise ValidationError("Q must be symmetric")
        Q = 0.5 * (Q + Q.T)
        q = np.zeros(Q.shape[0]) if self.q is None else np.asarray(self.q, dtype=float).reshape(-1)
        if q.size != Q.shape[0]:
            raise ValidationError(f"q has length {q.size}, expected {Q.shape[0]}")
        Q.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)

    @property
    def s(self) -> int:
        return self.Q.shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return float(z @ self.Q @ z + 2 * self.q @ z)
        return np.einsum("ki,ij,kj->k", z, self.Q, z) + 2 * z @ self.q

    def gaussian_expectation(self, mean: np.ndarray, cov: np.ndarray) -> float:
        return float(np.trace(self.Q @ cov) + mean @ self.Q @ mean + 2 * self.q @ mean)


@dataclass(frozen=True)
class DualEvaluation:
    lambda_star: float
    value: float
    per_sample: np.ndarray
    bracket: tuple[float, float]
    rho_min: float
    lambda_lb: float
    evaluations: int = 0
    at_limit: bool = False


def _tilt(ref: GaussianReference, eps: float) -> np.ndarray:
    """``I + eps/2 Sigma^-1``."""
    return np.eye(ref.s) + 0.5 * eps * ref.cov_inv


def lambda_lower_bound(loss: QuadraticLoss, ref: GaussianReference, eps: float) -> float:
    """Largest generalized eigenvalue of ``(Q, I + eps/2 Sigma^-1)``."""
    return float(eigh(loss.Q, _tilt(ref, eps), eigvals_only=True)[-1])


def _log_partitions(loss: QuadraticLoss, lam: float, W: np.ndarray, ref: GaussianReference, eps: float) -> np.ndarray:
    s = ref.s
    if lam <= 0:
        raise DivergentIntegralError(f"lambda must be positive, got {lam}")
    M = lam * _tilt(ref, eps) - loss.Q
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise DivergentIntegralError(
            f"lambda = {lam:.6g} is below the spectral bound; M is not positive definite"
        ) from None
    B = loss.q[None, :] + lam * (W + 0.5 * eps * (ref.cov_inv @ ref.mean)[None, :])
    Y = np.linalg.solve(L, B.T)
    quad = np.sum(Y * Y, axis=0)
    out = quad - lam * np.sum(W * W, axis=1)
    if eps > 0:
        le = lam * eps
        logdetM = 2.0 * np.log(np.diag(L)).sum()
        const = 0.5 * le * s * math.log(0.5 * le) - 0.5 * le * ref.logdet - 0.5 * le * logdetM
        out = out + const - 0.5 * le * ref.mahalanobis_mean()
    return out


def log_partition(
    loss: QuadraticLoss,
    lam: float,
    ref: GaussianReference,
    eps: float,
    sample: np.ndarray,
) -> float:
    """``lam*eps * log E_{z~nu} exp((l(z) - lam ||w - z||^2) / (lam eps))`` in closed form.

    At ``eps = 0`` the Laplace limit ``sup_z l(z) - lam ||w - z||^2`` is returned.
    """
    w = np.asarray(sample, dtype=float).reshape(1, -1)
    return float(_log_partitions(loss, lam, w, ref, eps)[0])


def dual_objective(
    loss: QuadraticLoss,
    lam: float,
    samples: SampleSet | np.ndarray,
    ref: GaussianReference,
    rho: float,
    eps: float,
) -> float:
    W = as_samples(samples)
    return float(lam * rho + _log_partitions(loss, lam, W, ref, eps).mean())


def wasserstein_dual_objective(loss: QuadraticLoss, lam: float, samples, rho: float) -> float:
    """``lam rho + mean_i [b_i^T (lam I - Q)^{-1} b_i - lam ||w_i||^2]`` with ``b_i = q + lam w_i``."""
    W = as_samples(samples)
    M = lam * np.eye(loss.s) - loss.Q
    B = loss.q[None, :] + lam * W
    X = np.linalg.solve(M, B.T)
    return float(lam * rho + np.mean(np.sum(B.T * X, axis=0) - lam * np.sum(W * W, axis=1)))


def kernel_limit(loss: QuadraticLoss, samples, ref: GaussianReference, eps: float) -> float:
    """Dual value as lambda -> infinity at rho = rho_min (expected loss under the Gibbs kernels)."""
    W = as_samples(samples)
    if eps == 0:
        return float(np.mean(loss(W)))
    vals = []
    for w in W:
        mu, S = kernel_moments(w, ref, eps)
        vals.append(loss.gaussian_expectation(mu, S))
    return float(np.mean(vals))


def worst_case_risk(
    loss: QuadraticLoss,
    samples: SampleSet | np.ndarray,
    ref: GaussianReference,
    rho: float,
    eps: float,
    xtol_rel: float = 1e-9,
) -> DualEvaluation:
    """Minimize the dual objective over the multiplier.

    The search starts just above the spectral bound, brackets the minimizer by
    doubling and refines it by golden section.  When ``rho`` equals the
    feasibility threshold the infimum is only reached as the multiplier
    diverges, and the analytic limit is returned.
    """
    W = as_samples(samples)
    if W.shape[1] != loss.s or ref.s != loss.s:
        raise ValidationError("loss, samples and reference must share the dimension s")
    if rho < 0 or eps < 0:
        raise ValidationError("rho and eps must be nonnegative")
    rho_min = feasibility_threshold(W, ref, eps)
    slack_tol = 1e-12 * max(1.0, abs(rho_min))
    if rho < rho_min - slack_tol:
        raise InfeasibleError(rho, rho_min)
    lam_lb = lambda_lower_bound(loss, ref, eps)

    if eps == 0 and rho == 0:
        per = loss(W)
        return DualEvaluation(math.inf, float(np.mean(per)), np.asarray(per), (math.inf, math.inf), 0.0, lam_lb, 0, True)

    if eps > 0 and rho - rho_min <= 1e-9 * max(1.0, abs(rho_min)):
        # the ball is the single kernel mixture; the dual infimum sits at lambda = inf
        per = np.full(W.shape[0], math.nan)
        return DualEvaluation(math.inf, kernel_limit(loss, W, ref, eps), per, (math.inf, math.inf), rho_min, lam_lb, 0, True)

    def f(lam: float) -> float:
        if lam <= lam_lb or lam <= 0:
            return math.inf
        try:
            return dual_objective(loss, lam, W, ref, rho, eps)
        except DivergentIntegralError:
            return math.inf

    floor = max(lam_lb, 0.0)
    start = 2.0 * floor if floor > 0 else 1.0
    lo, mid, hi, fmid, evaluated = bracket_minimum(f, start, cap=LAMBDA_CAP, floor=floor)
    if mid >= LAMBDA_CAP / 2.0:
        limit = kernel_limit(loss, W, ref, eps)
        if rho - rho_min <= 1e-9 * max(1.0, abs(rho_min)):
            per = np.full(W.shape[0], math.nan)
            return DualEvaluation(math.inf, limit, per, (lo, hi), rho_min, lam_lb, len(evaluated), True)
        raise UnboundedError(f"dual objective still decreasing at lambda = {mid:.3e}")
    if lo <= floor:
        lo = floor + (mid - floor) * 1e-6 if floor > 0 else mid * 1e-9
    res = golden_section(f, lo, hi, xtol_rel=xtol_rel)
    lam = res.x
    per = _log_partitions(loss, lam, W, ref, eps)
    value = float(lam * rho + per.mean())
    return DualEvaluation(lam, value, per, (res.lo, res.hi), rho_min, lam_lb, len(evaluated) + res.evaluations)


def discretize_gaussian_1d(ref: GaussianReference, lo: float, hi: float, points: int) -> DiscreteMeasure:
    """Uniform-grid discretization of a scalar Gaussian, weights proportional to the density."""
    if ref.s != 1:
        raise ValidationError("1-D discretization needs s = 1")
    z = np.linspace(lo, hi, points)
    m, var = float(ref.mean[0]), float(ref.cov[0, 0])
    logw = -0.5 * (z - m) ** 2 / var
    w = np.exp(logw - logw.max())
    return DiscreteMeasure(z[:, None], w / w.sum())


@dataclass(frozen=True)
class PrimalOracleResult:
    value: float
    distribution: DiscreteMeasure
    gap: float
    report: object
    method: str = "conic"


def primal_oracle_1d(
    loss: QuadraticLoss,
    samples,
    nu_grid: DiscreteMeasure,
    rho: float,
    eps: float,
    gap_tol: float = 1e-6,
    min_span_std: float = 8.0,
    backend: str = "clarabel",
    method: str = "auto",
) -> PrimalOracleResult:
    """Maximize the expected loss over grid-supported distributions in the Sinkhorn ball.

    ``method='conic'`` treats the coupling between the empirical samples and
    the grid as the decision variable, with one exponential cone per coupling
    entry.  ``method='tilted'`` instead builds the explicit coupling
    ``gamma_ij ~ nu_j exp((l_j - lam c_ij) / (lam eps))`` and bisects on
    ``lam`` until its discrepancy, evaluated directly, meets the radius; the
    result is a certified member of the grid ball.  ``'auto'`` runs the conic
    path and falls back to the tilted one when the backend cannot reach its
    tolerances.  Neither path uses the Gaussian closed forms, so both serve as
    independent lower bounds on :func:`worst_case_risk` that tighten as the
    grid is refined.
    """
    if method not in ("auto", "conic", "tilted"):
        raise ValidationError(f"unknown primal oracle method {method!r}")
    W = as_samples(samples)
    if W.shape[1] != 1 or nu_grid.points.shape[1] != 1:
        raise ValidationError("the primal oracle works in one dimension")
    z = nu_grid.points[:, 0]
    if not np.allclose(np.diff(z), z[1] - z[0], rtol=1e-9, atol=0):
        raise ValidationError("nu_grid must be a uniform grid")
    mu = float(nu_grid.weights @ z)
    sd = float(np.sqrt(nu_grid.weights @ (z - mu) ** 2))
    if z[-1] - z[0] < min_span_std * sd:
        raise OracleError(f"grid spans {(z[-1] - z[0]) / sd:.2f} standard deviations, need {min_span_std}")

    n = W.shape[0]
    C = sq_euclidean_cost(W, nu_grid.points)
    ell = loss(nu_grid.points)
    if method == "tilted" or (method == "auto" and eps > 0):
        try:
            if method == "tilted":
                return _tilted_primal(ell, C, nu_grid, rho, eps)
            return _conic_primal(ell, C, nu_grid, n, rho, eps, gap_tol, backend)
        except OracleError:
            if method == "tilted":
                raise
            return _tilted_primal(ell, C, nu_grid, rho, eps)
    return _conic_primal(ell, C, nu_grid, n, rho, eps, gap_tol, backend)


def _tilted_primal(ell: np.ndarray, C: np.ndarray, nu_grid: DiscreteMeasure, rho: float, eps: float) -> PrimalOracleResult:
    if eps <= 0:
        raise ValidationError("the tilted primal construction needs eps > 0")
    n = C.shape[0]
    keep = nu_grid.weights > 0
    loga = np.log(nu_grid.weights[keep])
    Ck, lk = C[:, keep], ell[keep]

    def coupling(lam: float):
        expo = (lk[None, :] - lam * Ck) / (lam * eps) + loga[None, :]
        logg = expo - logsumexp(expo, axis=1, keepdims=True) - math.log(n)
        g = np.exp(logg)
        kl = float(np.sum(g * (logg + math.log(n) - loga[None, :])))
        return g, float(np.sum(g * Ck)) + eps * kl

    # the discrepancy decreases as lam grows; find a feasible and an infeasible end
    hi = 1.0
    while coupling(hi)[1] > rho:
        hi *= 2.0
        if hi > 1e15:
            raise OracleError("the grid ball is empty at this radius")
    lo = hi
    while coupling(lo)[1] <= rho and lo > 1e-12:
        lo *= 0.5
    for _ in range(200):
        if hi - lo <= 1e-15 * hi:
            break
        mid = math.sqrt(lo * hi)
        if coupling(mid)[1] <= rho:
            hi = mid
        else:
            lo = mid
    g, disc = coupling(hi)
    q = np.zeros(nu_grid.weights.size)
    q[keep] = g.sum(axis=0)
    dist = DiscreteMeasure(nu_grid.points, q / q.sum())
    return PrimalOracleResult(float(np.sum(g * lk[None, :])), dist, math.nan, {"lambda": hi, "discrepancy": disc}, "tilted")


def _conic_primal(ell, C, nu_grid, n, rho, eps, gap_tol, backend) -> PrimalOracleResult:
    from .conic import ConicProgram, solve

    G = ell.size
    prog = ConicProgram()
    gam = prog.variable("gamma", (n, G))
    prog.add_nonneg(gam, "coupling nonnegativity")
    prog.add_zero(gam.sum(axis=1) - np.full(n, 1.0 / n), "first marginal equals the empirical measure")
    budget = rho - (gam * C).sum()
    if eps > 0:
        tau = prog.variable("tau", (n, G))
        ref_mass = np.outer(np.full(n, 1.0 / n), nu_grid.weights)
        keep = ref_mass.ravel() > 0
        prog.add_exp(-tau.flatten()[keep], gam.flatten()[keep], ref_mass.ravel()[keep], "entropy epigraph")
        if not keep.all():
            prog.add_zero(gam.flatten()[~keep], "no mass off the reference support")
        budget = budget - eps * tau.flatten()[keep].sum()
    prog.add_nonneg(budget, "Sinkhorn ball radius")
    prog.maximize((gam * ell[None, :]).sum())
    sol = solve(prog, backend=backend)
    rep = sol.report
    # near the feasibility threshold the ball is thin and the backend may stop
    # just short of its own tolerances; accept that when the point is still accurate
    usable = rep.status == "optimal" or (rep.status == "inaccurate" and rep.primal_residual <= 1e-6)
    if not usable:
        raise OracleError(f"primal oracle solve ended with status {rep.status}")
    gap = abs(sol.report.gap)
    if gap > gap_tol * max(1.0, abs(sol.report.objective)):
        raise OracleError(f"duality gap {gap:.3e} exceeds tolerance; refine the grid or tolerances")
    g = np.maximum(sol.values["gamma"], 0.0)
    q = g.sum(axis=0)
    dist = DiscreteMeasure(nu_grid.points, q / q.sum())
    return PrimalOracleResult(float(g.ravel() @ np.tile(ell, n)), dist, gap, sol.report)
