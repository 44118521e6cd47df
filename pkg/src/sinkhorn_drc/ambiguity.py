"""Gaussian reference measures, Sinkhorn-ball feasibility and discrete OT oracles.

Throughout, the transport cost is the squared Euclidean distance and the
first reference measure of the entropic term is the nominal distribution
itself, so the discrepancy between a nominal ``P`` and a candidate ``Q`` is

    W_eps(P, Q) = min_{gamma in Gamma(P, Q)} <c, gamma> + eps * KL(gamma | P x nu).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp, roots_hermite
from scipy.stats import qmc

from .errors import AbsoluteContinuityError, ConvergenceError, ValidationError
from .system import SampleSet, as_samples


@dataclass(frozen=True)
class GaussianReference:
    """Reference measure ``nu = N(mean, cov)`` with cached factorizations."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    cov_inv: np.ndarray = field(init=False, repr=False)
    logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(f"cov has shape {cov.shape}, expected {(mean.size, mean.size)}")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValidationError("reference covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("reference covariance must be positive definite") from None
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise ValidationError("reference covariance must be positive definite")
        Linv = np.linalg.inv(L)
        inv = Linv.T @ Linv
        inv = 0.5 * (inv + inv.T)
        for arr in (mean, cov, L, inv):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "cov_inv", inv)
        object.__setattr__(self, "logdet", float(2.0 * np.log(np.diag(L)).sum()))

    @classmethod
    def isotropic(cls, s: int, variance: float, mean=None) -> "GaussianReference":
        m = np.zeros(s) if mean is None else mean
        return cls(m, variance * np.eye(s))

    @property
    def s(self) -> int:
        return self.mean.size

    def mahalanobis_mean(self) -> float:
        """``||m||^2_{Sigma^-1}``."""
        return float(self.mean @ self.cov_inv @ self.mean)


@dataclass(frozen=True)
class AmbiguitySpec:
    rho: float
    eps: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValidationError(f"rho must be >= 0, got {self.rho}")
        if not self.eps >= 0:
            raise ValidationError(f"eps must be >= 0, got {self.eps}")


def feasibility_threshold(samples: SampleSet | np.ndarray, ref: GaussianReference, eps: float) -> float:
    """Smallest radius for which the Sinkhorn ball around the samples is nonempty.

    Equals ``-eps * mean_i log E_{z~nu} exp(-||w_i - z||^2 / eps)``, evaluated in
    closed form as

        eps/2 log|I + (2/eps) Sigma| + mean_i eps/2 (w_i - m)^T (Sigma + eps/2 I)^{-1} (w_i - m)

    which is algebraically identical to the expanded expression with the
    ``||w_i||^2`` term averaged over samples, but free of cancellation at
    large ``eps``.
    """
    W = as_samples(samples)
    if W.shape[1] != ref.s:
        raise ValidationError(f"samples have {W.shape[1]} columns, reference has dimension {ref.s}")
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    if eps == 0:
        return 0.0
    s = ref.s
    h = 0.5 * eps
    # eigenvalues of Sigma give log|I + Sigma/h| without forming a near-identity determinant
    sig = np.linalg.eigvalsh(ref.cov)
    logdet_term = h * float(np.log1p(sig / h).sum())
    D = W - ref.mean
    G = ref.cov + h * np.eye(s)
    quad = np.einsum("ij,ij->i", D, np.linalg.solve(G, D.T).T)
    return float(logdet_term + h * quad.mean())


def kernel_moments(sample: np.ndarray, ref: GaussianReference, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Gibbs kernel ``exp(-||w - z||^2/eps) dnu(z)`` (normalized)."""
    prec = (2.0 / eps) * np.eye(ref.s) + ref.cov_inv
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ ((2.0 / eps) * np.asarray(sample, dtype=float) + ref.cov_inv @ ref.mean)
    return mean, cov


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    stderr: float
    method: str
    draws: int
    sufficient: bool


def _gauss_hermite_grid(s: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_hermite(nodes)
    grids = np.meshgrid(*([x] * s), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(2.0)
    wts = np.ones(pts.shape[0])
    for g in np.meshgrid(*([w] * s), indexing="ij"):
        wts = wts * g.ravel()
    return pts, np.log(wts / np.pi ** (s / 2.0))


def feasibility_oracle(
    samples: SampleSet | np.ndarray,
    ref: GaussianReference,
    eps: float,
    draws: int = 1_000_000,
    seed: int = 0,
    method: str = "auto",
    nodes: int = 64,
    tol: float = 1e-3,
    replicates: int = 8,
) -> OracleEstimate:
    """Numerical evaluation of ``-eps * mean_i log E_nu exp(-c(w_i, z)/eps)``.

    The Gaussian integral is never evaluated in closed form here.  The
    integrand is written as a product of the Gibbs factor and the density of
    ``nu`` and the narrower of the two is used as the integration measure:
    either ``z ~ nu`` with weights ``exp(-c/eps)``, or ``z ~ N(w_i, eps/2 I)``
    with weights ``(pi eps)^{s/2} pdf_nu(z)``.  Tensorized Gauss-Hermite
    quadrature is used for ``s <= 3`` and randomized quasi-Monte Carlo
    (``replicates`` independently scrambled Sobol blocks, error estimated from
    their spread) otherwise; ``method='montecarlo'`` gives plain sampling.
    """
    if eps <= 0:
        raise ValidationError("the oracle needs eps > 0")
    W = as_samples(samples)
    s = ref.s
    if method == "auto":
        method = "quadrature" if s <= 3 else "qmc"
    h = 0.5 * eps
    sample_nu = h >= float(np.mean(np.linalg.eigvalsh(ref.cov)))
    if method == "quadrature":
        std, logw = _gauss_hermite_grid(s, nodes)
        ndraw = std.shape[0]
    elif method == "montecarlo":
        rng = np.random.default_rng(seed)
        std = rng.standard_normal((draws, s))
        logw = np.full(draws, -np.log(draws))
        ndraw = draws
    elif method == "qmc":
        block = 2 ** max(1, int(np.ceil(np.log2(max(draws // replicates, 2)))))
        seeds = np.random.SeedSequence(seed).spawn(replicates)
        std = np.vstack([qmc.MultivariateNormalQMC(np.zeros(s), seed=np.random.default_rng(sd)).random(block) for sd in seeds])
        logw = np.full(std.shape[0], -np.log(std.shape[0]))
        ndraw = std.shape[0]
    else:
        raise ValidationError(f"unknown oracle method {method!r}")

    Linv = np.linalg.inv(ref.chol)
    logs, var_terms = [], []
    for w in W:
        if sample_nu:
            z = ref.mean + std @ ref.chol.T
            logf = -np.sum((z - w) ** 2, axis=1) / eps
        else:
            z = w + np.sqrt(h) * std
            r = (z - ref.mean) @ Linv.T
            logpdf = -0.5 * np.sum(r**2, axis=1) - 0.5 * s * np.log(2 * np.pi) - 0.5 * ref.logdet
            logf = 0.5 * s * np.log(np.pi * eps) + logpdf
        lse = logsumexp(logf + logw)
        logs.append(lse)
        if method == "montecarlo":
            ratio = np.exp(logf - lse)
            var_terms.append(ratio.var() / ndraw)
        elif method == "qmc":
            var_terms.append(logsumexp(logf.reshape(replicates, -1), axis=1))
    value = float(-eps * np.mean(logs))
    if method == "montecarlo":
        # delta method: var(log mean) ~ var(f) / (n mean^2)
        stderr = float(eps * np.sqrt(np.sum(var_terms)) / len(logs))
    elif method == "qmc":
        per_block = -eps * np.mean(var_terms, axis=0)
        stderr = float(per_block.std(ddof=1) / np.sqrt(replicates))
    else:
        stderr = 0.0
    sufficient = stderr <= tol * max(abs(value), 1e-12)
    return OracleEstimate(value, stderr, method, ndraw, bool(sufficient))


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        wts = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != wts.size:
            raise ValidationError(f"{pts.shape[0]} points but {wts.size} weights")
        if np.any(wts < 0):
            raise ValidationError("weights must be nonnegative")
        if abs(wts.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {wts.sum():.15g}, expected 1")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        k = pts.shape[0]
        return cls(pts, np.full(k, 1.0 / k))

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), np.ones(1))

    @classmethod
    def normalized(cls, points, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(points, w / w.sum())

    def __len__(self) -> int:
        return self.weights.size

    def expectation(self, f) -> float:
        return float(self.weights @ np.asarray(f(self.points), dtype=float))


@dataclass(frozen=True)
class Coupling:
    plan: np.ndarray

    def marginal_residual(self, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
        return float(
            max(
                np.abs(self.plan.sum(axis=1) - P.weights).max(),
                np.abs(self.plan.sum(axis=0) - Q.weights).max(),
            )
        )


@dataclass(frozen=True)
class TransportResult:
    value: float
    coupling: Coupling
    iterations: int = 0


def sq_euclidean_cost(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    C = np.sum(X**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(C, 0.0)


def discrete_ot(P: DiscreteMeasure, Q: DiscreteMeasure) -> TransportResult:
    """Exact squared-Euclidean optimal transport by LP over the coupling polytope."""
    C = sq_euclidean_cost(P.points, Q.points)
    k1, k2 = C.shape
    rows = np.kron(np.eye(k1), np.ones((1, k2)))
    cols = np.kron(np.ones((1, k1)), np.eye(k2))
    res = linprog(
        C.ravel(),
        A_eq=np.vstack([rows, cols]),
        b_eq=np.concatenate([P.weights, Q.weights]),
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}", float("nan"))
    plan = np.maximum(res.x.reshape(k1, k2), 0.0)
    return TransportResult(float(C.ravel() @ res.x), Coupling(plan), int(res.nit))


def _match_support(Q: DiscreteMeasure, nu: DiscreteMeasure, atol: float = 1e-12) -> np.ndarray:
    """Weights of Q re-indexed onto the atoms of nu."""
    qw = np.zeros(len(nu))
    for k in np.flatnonzero(Q.weights > 0):
        dist = np.abs(nu.points - Q.points[k]).max(axis=1)
        j = int(np.argmin(dist))
        if dist[j] > atol or nu.weights[j] <= 0:
            raise AbsoluteContinuityError(f"atom {k} of Q at {Q.points[k]} carries mass outside the support of nu")
        qw[j] += Q.weights[k]
    return qw


def discrete_sinkhorn(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    nu: DiscreteMeasure,
    eps: float,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    polish: bool = True,
) -> TransportResult:
    """Entropic OT ``min <C, g> + eps KL(g | P x nu)`` over couplings of (P, Q).

    Solved by alternating Bregman projections onto the two marginal
    constraints, carried out in the log domain.  Small ``eps`` is reached by
    halving from the cost range with warm-started potentials, and stages that
    stall are finished by Newton steps on the semi-dual (``polish=False``
    disables them).  The returned coupling is indexed by the atoms of P and
    the atoms of nu.
    """
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    qw = _match_support(Q, nu)
    if eps == 0:
        return discrete_ot(P, DiscreteMeasure(nu.points, qw))
    cols = np.flatnonzero(qw > 0)
    rows = np.flatnonzero(P.weights > 0)
    C = sq_euclidean_cost(P.points[rows], nu.points[cols])
    logP = np.log(P.weights[rows])
    logQ = np.log(qw[cols])
    lognu = np.log(nu.weights[cols])
    # eps-scaling: for eps small against the cost range, warm-start the column
    # potential from a sequence of larger regularizations
    scale = float(C.max() - C.min())
    stages = [eps]
    while stages[-1] < 0.05 * scale:
        stages.append(2.0 * stages[-1])
    stages.reverse()
    pot = np.zeros(cols.size)
    total = 0
    for k, e in enumerate(stages):
        final = k == len(stages) - 1
        logK = logP[:, None] + lognu[None, :] - C / e
        f, g, resid, it = _scaling_iterations(logK, logP, logQ, pot / e, tol, min(200, max_iter))
        total += it
        if resid >= tol and polish:
            f, g, resid, _ = _newton_polish(logK, logP, logQ, g, tol)
        if resid >= tol and final:
            if max_iter > 200:
                f, g, resid, it = _scaling_iterations(logK, logP, logQ, g, tol, max_iter - 200)
                total += it
                if resid >= tol and polish:
                    f, g, resid, _ = _newton_polish(logK, logP, logQ, g, tol)
            if resid >= tol:
                raise ConvergenceError(f"Sinkhorn iterations did not converge in {max_iter} steps", resid)
        pot = e * g
    it = total
    logG = logK + f[:, None] + g[None, :]
    G = np.exp(logG)
    # KL against P x nu: log(G / (P nu)) = f + g - C/eps
    value = float(np.sum(G * C) + eps * np.sum(G * (f[:, None] + g[None, :] - C / eps)))
    plan = np.zeros((len(P), len(nu)))
    plan[np.ix_(rows, cols)] = G
    return TransportResult(value, Coupling(plan), it)


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp along one axis (lean version for the tight scaling loops)."""
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(a - m).sum(axis=axis))


def _scaling_iterations(logK, logP, logQ, g, tol, max_iter):
    """Log-domain alternating projections; returns ``(f, g, residual, iterations)``."""
    f = np.zeros(logP.size)
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = logP - _lse(logK + g[None, :], axis=1)
        g = logQ - _lse(logK + f[:, None], axis=0)
        if it % 5 == 0 or it == 1:
            row = np.exp(_lse(logK + f[:, None] + g[None, :], axis=1))
            resid = float(np.abs(row - np.exp(logP)).sum())
            if resid < tol:
                break
    return f, g, resid, it


def _newton_step(pi: np.ndarray, Pw: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Solve ``(diag(h) - U U^T + tau I) step = grad`` with ``h = P^T pi``, ``U = pi^T diag(sqrt P)``.

    The low-rank part has one column per row atom, so with fewer rows than
    columns the Woodbury identity reduces the solve to the row dimension.
    """
    h = Pw @ pi
    tau = 1e-14 * float(h.sum())
    U = (pi * np.sqrt(Pw)[:, None]).T
    if U.shape[1] >= U.shape[0]:
        H = np.diag(h + tau) - U @ U.T
        return np.linalg.lstsq(H, grad, rcond=None)[0]
    dinv = 1.0 / (h + tau)
    y = dinv * grad
    cap = np.eye(U.shape[1]) - U.T @ (dinv[:, None] * U)
    return y + dinv * (U @ np.linalg.lstsq(cap, U.T @ y, rcond=None)[0])


def _newton_polish(logK, logP, logQ, g, tol, max_iter: int = 200):
    """Damped Newton ascent on the semi-dual in the column scalings ``g``.

    With the row scalings eliminated, ``phi(g) = <Q, g> - sum_i P_i LSE_j(a_ij + g_j)``
    is concave with gradient ``Q - colsum(G)``; rows of ``G`` stay exact.
    """
    a = logK - logP[:, None]
    Pw, Qw = np.exp(logP), np.exp(logQ)

    def state(g):
        z = a + g[None, :]
        lse = _lse(z, axis=1)
        pi = np.exp(z - lse[:, None])
        return float(Qw @ g - Pw @ lse), pi, lse

    phi, pi, lse = state(g)
    resid = np.inf
    for _ in range(max_iter):
        grad = Qw - Pw @ pi
        resid = float(np.abs(grad).sum())
        if resid < tol:
            break
        step = _newton_step(pi, Pw, grad)
        # backtrack on the objective, or on the residual once the objective
        # differences drop below rounding
        t = 1.0
        floor = 1e-13 * max(1.0, abs(phi))
        while t > 1e-12:
            cand = g + t * step
            phi_c, pi_c, lse_c = state(cand)
            if phi_c >= phi + 1e-4 * t * float(grad @ step):
                break
            if phi_c >= phi - floor and np.abs(Qw - Pw @ pi_c).sum() < resid:
                break
            t *= 0.5
        else:
            break
        g, phi, pi, lse = cand, phi_c, pi_c, lse_c
    f = logP - _lse(logK + g[None, :], axis=1)
    return f, g, resid, resid < tol


@dataclass(frozen=True)
class NestingReport:
    eps_grid: np.ndarray
    values: np.ndarray
    members: np.ndarray
    ot_value: float
    ot_member: bool
    monotone: bool
    implies_ot: bool
    boundary: np.ndarray

    @property
    def ok(self) -> bool:
        return self.monotone and self.implies_ot


def ball_nesting_check(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    nu: DiscreteMeasure,
    rho: float,
    eps_grid,
    boundary_tol: float = 1e-9,
) -> NestingReport:
    """Membership of Q in the Sinkhorn balls around P along an eps grid.

    Checks that membership never re-appears once lost as eps grows and that
    every Sinkhorn membership implies membership in the OT ball.  Cells whose
    discrepancy lies within ``boundary_tol`` of ``rho`` are flagged.
    """
    eps_grid = np.sort(np.asarray(eps_grid, dtype=float))
    vals = np.array([discrete_sinkhorn(P, Q, nu, e).value for e in eps_grid])
    members = vals <= rho
    ot = discrete_ot(P, DiscreteMeasure(nu.points, _match_support(Q, nu))).value
    ot_member = ot <= rho
    monotone = bool(np.all(np.diff(members.astype(int)) <= 0))
    implies = bool(ot_member or not members.any())
    boundary = np.abs(vals - rho) <= boundary_tol * max(1.0, abs(rho))
    return NestingReport(eps_grid, vals, members, float(ot), bool(ot_member), monotone, implies, boundary)


def product_expected_cost(P: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """``E_{P x nu} ||x - y||^2``."""
    return float(P.weights @ sq_euclidean_cost(P.points, nu.points) @ nu.weights)
