"""Finite-horizon LTV plants, block-stacked operators and closed-loop maps.

The stacked disturbance vector is ``w = (x_0, w_0, ..., w_{N-2})`` of length
``s = d + (N-1) p`` and the stacked dynamics read

    x = Z A x + Z B u + E w

with ``A = blkdiag(A_0, ..., A_{N-2}, 0)``, ``B = blkdiag(B_0, ..., B_{N-2}, 0)``
and ``E = blkdiag(I_d, E_0, ..., E_{N-2})``.  A linear causal policy ``u = K x``
induces the closed-loop maps ``x = Phi_x w`` and ``u = Phi_u w``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import block_diag, solve_triangular

from .errors import UnsupportedRecoveryError, ValidationError

ACHIEVABILITY_TOL = 1e-9
RECOVERY_COND_LIMIT = 1e12


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemSpec:
    """Discrete-time LTV plant ``x_{t+1} = A_t x_t + B_t u_t + E_t w_t``.

    ``A``, ``B`` and ``E`` hold the ``N - 1`` transition matrices used on the
    horizon ``t = 0, ..., N-1``.  Use :meth:`time_invariant` for the LTI case.
    """

    N: int
    A: tuple
    B: tuple
    E: tuple

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValidationError(f"horizon N must be an integer >= 2, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        for name in ("A", "B", "E"):
            mats = tuple(_as_matrix(M, f"{name}[{t}]") for t, M in enumerate(getattr(self, name)))
            if len(mats) != self.N - 1:
                raise ValidationError(f"{name} must hold N-1 = {self.N - 1} matrices, got {len(mats)}")
            for M in mats:
                M.setflags(write=False)
            object.__setattr__(self, name, mats)
        d = self.A[0].shape[0]
        m = self.B[0].shape[1]
        p = self.E[0].shape[1]
        for t in range(self.N - 1):
            if self.A[t].shape != (d, d):
                raise ValidationError(f"A[{t}] has shape {self.A[t].shape}, expected {(d, d)}")
            if self.B[t].shape != (d, m):
                raise ValidationError(f"B[{t}] has shape {self.B[t].shape}, expected {(d, m)}")
            if self.E[t].shape != (d, p):
                raise ValidationError(f"E[{t}] has shape {self.E[t].shape}, expected {(d, p)}")

    @classmethod
    def time_invariant(cls, A, B, E, N: int) -> "SystemSpec":
        A, B, E = _as_matrix(A, "A"), _as_matrix(B, "B"), _as_matrix(E, "E")
        return cls(N, (A,) * (N - 1), (B,) * (N - 1), (E,) * (N - 1))

    @property
    def d(self) -> int:
        return self.A[0].shape[0]

    @property
    def m(self) -> int:
        return self.B[0].shape[1]

    @property
    def p(self) -> int:
        return self.E[0].shape[1]

    @property
    def s(self) -> int:
        return self.d + (self.N - 1) * self.p


def mass_spring_damper(N: int, Ts: float = 1.0, k: float = 1.0, c: float = 1.0, mass: float = 1.0) -> SystemSpec:
    """Euler-discretized mass-spring-damper with additive state noise (E = I)."""
    A = np.array([[1.0, Ts], [-k * Ts / mass, 1.0 - c * Ts / mass]])
    B = np.array([[0.0], [Ts / mass]])
    return SystemSpec.time_invariant(A, B, np.eye(2), N)


@dataclass(frozen=True)
class StackedSystem:
    spec: SystemSpec
    Z: np.ndarray
    bigA: np.ndarray
    bigB: np.ndarray
    bigE: np.ndarray

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def s(self) -> int:
        return self.spec.s

    def w_block_sizes(self) -> list[int]:
        return [self.d] + [self.p] * (self.N - 1)

    def phi_x_mask(self) -> np.ndarray:
        return causal_mask([self.d] * self.N, self.w_block_sizes())

    def phi_u_mask(self) -> np.ndarray:
        return causal_mask([self.m] * self.N, self.w_block_sizes())

    def phi_mask(self) -> np.ndarray:
        return np.vstack([self.phi_x_mask(), self.phi_u_mask()])

    def k_mask(self) -> np.ndarray:
        return causal_mask([self.m] * self.N, [self.d] * self.N)

    def achievability_operator(self) -> np.ndarray:
        """``[I - Z A, -Z B]`` so that achievable maps satisfy ``op @ Phi = E``."""
        Nd = self.N * self.d
        return np.hstack([np.eye(Nd) - self.Z @ self.bigA, -self.Z @ self.bigB])


def causal_mask(row_blocks: Sequence[int], col_blocks: Sequence[int]) -> np.ndarray:
    """Block lower-triangular boolean pattern (row block t sees column blocks 0..t)."""
    r = np.repeat(np.arange(len(row_blocks)), row_blocks)
    c = np.repeat(np.arange(len(col_blocks)), col_blocks)
    return c[None, :] <= r[:, None]


def build_stacked(spec: SystemSpec) -> StackedSystem:
    N, d, m = spec.N, spec.d, spec.m
    Z = np.kron(np.eye(N, k=-1), np.eye(d))
    bigA = block_diag(*spec.A, np.zeros((d, d)))
    bigB = block_diag(*spec.B, np.zeros((d, m)))
    bigE = block_diag(np.eye(d), *spec.E)
    for M in (Z, bigA, bigB, bigE):
        M.setflags(write=False)
    return StackedSystem(spec, Z, bigA, bigB, bigE)


@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage-stacked cost ``[x; u]^T D [x; u]`` with cached square root."""

    D: np.ndarray
    Dhalf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValidationError(f"D must be square, got shape {D.shape}")
        scale = max(np.abs(D).max(), 1.0)
        if not np.allclose(D, D.T, atol=1e-12 * scale):
            raise ValidationError("D must be symmetric")
        D = 0.5 * (D + D.T)
        vals, vecs = np.linalg.eigh(D)
        cutoff = 1e-10 * max(np.abs(vals).max(initial=0.0), 1e-300)
        if vals.min(initial=0.0) < -1e-8 * max(scale, 1.0):
            raise ValidationError(f"D must be PSD, smallest eigenvalue {vals.min():.3e}")
        vals = np.where(vals < cutoff, 0.0, vals)
        half = (vecs * np.sqrt(vals)) @ vecs.T
        half = 0.5 * (half + half.T)
        D.setflags(write=False)
        half.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Dhalf", half)

    @classmethod
    def identity(cls, spec: SystemSpec) -> "CostSpec":
        return cls(np.eye(spec.N * (spec.d + spec.m)))

    @classmethod
    def from_weights(cls, spec: SystemSpec, state_weight, input_weight) -> "CostSpec":
        """Block-diagonal D from per-step weights (a single matrix or a list of N)."""
        N = spec.N

        def expand(w, dim, name):
            if isinstance(w, (list, tuple)) and len(w) == N and np.ndim(w[0]) == 2:
                mats = [_as_matrix(x, name) for x in w]
            else:
                mats = [_as_matrix(w, name)] * N
            for t, M in enumerate(mats):
                if M.shape != (dim, dim):
                    raise ValidationError(f"{name}[{t}] has shape {M.shape}, expected {(dim, dim)}")
            return mats

        Qs = expand(state_weight, spec.d, "state_weight")
        Rs = expand(input_weight, spec.m, "input_weight")
        return cls(block_diag(*Qs, *Rs))


@dataclass(frozen=True)
class ClosedLoopMap:
    PhiX: np.ndarray
    PhiU: np.ndarray

    @property
    def Phi(self) -> np.ndarray:
        return np.vstack([self.PhiX, self.PhiU])

    @classmethod
    def from_stacked(cls, Phi: np.ndarray, sys: StackedSystem) -> "ClosedLoopMap":
        Nd = sys.N * sys.d
        return cls(np.array(Phi[:Nd]), np.array(Phi[Nd:]))

    def causality_violation(self, sys: StackedSystem) -> float:
        """Largest magnitude outside the causal pattern."""
        outx = np.abs(self.PhiX[~sys.phi_x_mask()])
        outu = np.abs(self.PhiU[~sys.phi_u_mask()])
        return float(max(outx.max(initial=0.0), outu.max(initial=0.0)))


@dataclass(frozen=True)
class ControllerRealization:
    K: np.ndarray
    condition: float = 1.0
    ill_conditioned: bool = False


@dataclass(frozen=True)
class SampleSet:
    """Noise trajectories, one per row, ordered ``(x_0, w_0, ..., w_{N-2})``."""

    trajectories: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.trajectories, dtype=float))
        if W.shape[0] < 1:
            raise ValidationError("a sample set needs at least one trajectory")
        W.setflags(write=False)
        object.__setattr__(self, "trajectories", W)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def s(self) -> int:
        return self.trajectories.shape[1]

    def check(self, s: int) -> None:
        if self.s != s:
            raise ValidationError(f"samples have {self.s} columns, system expects s = {s}")


def as_samples(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.trajectories
    return np.atleast_2d(np.asarray(samples, dtype=float))


def achievability_residual(sys: StackedSystem, cl: ClosedLoopMap) -> float:
    """Frobenius norm of ``[I - Z A, -Z B] Phi - E``."""
    Phi = cl.Phi
    op = sys.achievability_operator()
    if Phi.shape != (op.shape[1], sys.s):
        raise ValidationError(f"Phi has shape {Phi.shape}, expected {(op.shape[1], sys.s)}")
    return float(np.linalg.norm(op @ Phi - sys.bigE))


def open_loop_map(sys: StackedSystem) -> ClosedLoopMap:
    return closed_loop_from_controller(sys, ControllerRealization(np.zeros((sys.N * sys.m, sys.N * sys.d))))


def closed_loop_from_controller(sys: StackedSystem, ctrl: ControllerRealization | np.ndarray) -> ClosedLoopMap:
    K = ctrl.K if isinstance(ctrl, ControllerRealization) else np.asarray(ctrl, dtype=float)
    if K.shape != (sys.N * sys.m, sys.N * sys.d):
        raise ValidationError(f"K has shape {K.shape}, expected {(sys.N * sys.m, sys.N * sys.d)}")
    kmask = sys.k_mask()
    if np.any(K[~kmask] != 0):
        raise ValidationError("K violates the causal block lower-triangular pattern")
    # I - Z(A + BK) is unit lower triangular
    L = np.eye(sys.N * sys.d) - sys.Z @ (sys.bigA + sys.bigB @ K)
    PhiX = solve_triangular(L, sys.bigE, lower=True, unit_diagonal=True)
    PhiX = np.where(sys.phi_x_mask(), PhiX, 0.0)
    PhiU = np.where(sys.phi_u_mask(), K @ PhiX, 0.0)
    return ClosedLoopMap(PhiX, PhiU)


def recover_controller(cl: ClosedLoopMap, sys: StackedSystem | None = None, tol: float = 1e-8) -> ControllerRealization:
    """``K = Phi_u Phi_x^{-1}``; requires a square state map (p = d)."""
    PhiX, PhiU = cl.PhiX, cl.PhiU
    if PhiX.shape[0] != PhiX.shape[1]:
        raise UnsupportedRecoveryError(
            f"Phi_x has shape {PhiX.shape}; controller recovery needs p = d (use the map directly)"
        )
    cond = float(np.linalg.cond(PhiX))
    K = np.linalg.solve(PhiX.T, PhiU.T).T
    if sys is not None:
        kmask = sys.k_mask()
        leak = np.abs(K[~kmask]).max(initial=0.0)
        if leak > tol * max(1.0, np.abs(K).max()):
            raise ValidationError(f"recovered K is not causal (max off-pattern entry {leak:.3e})")
        K = np.where(kmask, K, 0.0)
    bad = cond > RECOVERY_COND_LIMIT
    if bad:
        warnings.warn(f"Phi_x is ill-conditioned (cond {cond:.3e}); recovered K is unreliable", stacklevel=2)
    return ControllerRealization(K, cond, bad)


@dataclass(frozen=True)
class Rollout:
    x: np.ndarray  # (batch, N, d)
    u: np.ndarray  # (batch, N, m)
    cost: np.ndarray  # (batch,)


def _split_noise(spec: SystemSpec, W: np.ndarray):
    d, p = spec.d, spec.p
    x0 = W[:, :d]
    w = W[:, d:].reshape(W.shape[0], spec.N - 1, p)
    return x0, w


def rollout_batch(
    spec: SystemSpec,
    policy: ControllerRealization | ClosedLoopMap | np.ndarray,
    noise: np.ndarray,
    cost: CostSpec,
) -> Rollout:
    """Simulate the plant row-wise for a batch of disturbance trajectories.

    A :class:`ClosedLoopMap` is applied as ``u_t = Phi_u[t] w`` with the past
    disturbances reconstructed from the measured states, so the policy only
    uses information available at time ``t``.
    """
    W = np.atleast_2d(np.asarray(noise, dtype=float))
    N, d, m = spec.N, spec.d, spec.m
    if W.shape[1] != spec.s:
        raise ValidationError(f"noise has {W.shape[1]} entries per trajectory, expected s = {spec.s}")
    nb = W.shape[0]
    x0, w = _split_noise(spec, W)
    x = np.zeros((nb, N, d))
    u = np.zeros((nb, N, m))
    x[:, 0] = x0
    if isinstance(policy, ClosedLoopMap):
        PhiU = policy.PhiU
        Epinv = [np.linalg.pinv(E) for E in spec.E]
        west = np.zeros((nb, spec.s))
        west[:, :d] = x[:, 0]
        for t in range(N):
            if t > 0:
                resid = x[:, t] - x[:, t - 1] @ spec.A[t - 1].T - u[:, t - 1] @ spec.B[t - 1].T
                lo = d + (t - 1) * spec.p
                west[:, lo : lo + spec.p] = resid @ Epinv[t - 1].T
            u[:, t] = west @ PhiU[t * m : (t + 1) * m].T
            if t < N - 1:
                x[:, t + 1] = x[:, t] @ spec.A[t].T + u[:, t] @ spec.B[t].T + w[:, t] @ spec.E[t].T
    else:
        K = policy.K if isinstance(policy, ControllerRealization) else np.asarray(policy, dtype=float)
        for t in range(N):
            Kt = K[t * m : (t + 1) * m, : (t + 1) * d]
            u[:, t] = x[:, : t + 1].reshape(nb, -1) @ Kt.T
            if t < N - 1:
                x[:, t + 1] = x[:, t] @ spec.A[t].T + u[:, t] @ spec.B[t].T + w[:, t] @ spec.E[t].T
    z = np.hstack([x.reshape(nb, -1), u.reshape(nb, -1)])
    J = np.einsum("bi,ij,bj->b", z, cost.D, z)
    return Rollout(x, u, J)


def rollout(spec: SystemSpec, policy, noise: np.ndarray, cost: CostSpec) -> Rollout:
    """Single-trajectory rollout; see :func:`rollout_batch`."""
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 1:
        raise ValidationError("rollout expects a single s-vector; use rollout_batch for batches")
    r = rollout_batch(spec, policy, noise[None, :], cost)
    return Rollout(r.x[0], r.u[0], r.cost[0])


Sampler = Callable[[np.random.Generator, int], np.ndarray]


def gaussian_sampler(mean, cov) -> Sampler:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)

    def draw(rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.multivariate_normal(mean, cov, size=count, method="eigh")

    return draw


def monte_carlo_cost(
    spec: SystemSpec,
    policy,
    cost: CostSpec,
    sampler: Sampler,
    count: int,
    seed: int = 0,
    batch: int = 20000,
) -> tuple[float, float]:
    """Sample mean and standard error of the realized cost over ``count`` rollouts."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    costs = []
    done = 0
    while done < count:
        k = min(batch, count - done)
        costs.append(rollout_batch(spec, policy, sampler(rng, k), cost).cost)
        done += k
    J = np.concatenate(costs)
    se = float(J.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return float(J.mean()), se
