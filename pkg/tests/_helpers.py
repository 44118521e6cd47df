"""Shared instance generators for the test suite."""

import numpy as np

from sinkhorn_drc.system import SystemSpec, causal_mask


def random_system(rng: np.random.Generator, N: int, d: int, m: int, p: int) -> SystemSpec:
    A = [rng.normal(scale=0.6, size=(d, d)) for _ in range(N - 1)]
    B = [rng.normal(size=(d, m)) for _ in range(N - 1)]
    E = [rng.normal(size=(d, p)) + (np.eye(d, p) if d == p else 0.0) for _ in range(N - 1)]
    return SystemSpec(N, tuple(A), tuple(B), tuple(E))


def random_causal_K(rng: np.random.Generator, spec: SystemSpec, scale: float = 0.5) -> np.ndarray:
    mask = causal_mask([spec.m] * spec.N, [spec.d] * spec.N)
    return np.where(mask, rng.normal(scale=scale, size=mask.shape), 0.0)


def scalar_system(N: int = 2, a: float = 1.0, b: float = 1.0, e: float = 1.0) -> SystemSpec:
    return SystemSpec.time_invariant([[a]], [[b]], [[e]], N)


ACCEPTANCE_LINES: list[str] = []


def report(label: str, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line; returns ``ok`` for the caller's assert."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
