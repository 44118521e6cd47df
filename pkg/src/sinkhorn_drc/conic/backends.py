"""Backend adapters translating the standard form to concrete conic solvers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from ..errors import SolverError
from .ir import ConicProgram, StandardForm, compile_program, constraint_violation

STATUSES = ("optimal", "infeasible", "unbounded", "inaccurate", "failed")


@dataclass
class SolverReport:
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    wall_time: float
    backend: str
    gap: float = float("nan")
    raw_status: str = ""
    worst_constraint: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class Solution:
    report: SolverReport
    values: dict = field(default_factory=dict)
    x: np.ndarray | None = None


@dataclass
class RawResult:
    x: np.ndarray | None
    status: str
    raw_status: str
    iterations: int
    dual_residual: float
    primal_obj: float
    dual_obj: float


class Backend(Protocol):
    name: str
    supports_exp: bool

    def run(self, std: StandardForm, settings: dict) -> RawResult: ...


def _clarabel_psd_perm(k: int) -> np.ndarray:
    """Map Clarabel's upper-triangular column-major order onto the lower-triangular IR order."""
    def lower_index(i, j):  # i >= j
        return j * k - j * (j - 1) // 2 + (i - j)

    return np.array([lower_index(c, r) for c in range(k) for r in range(c + 1)])


class ClarabelBackend:
    name = "clarabel"
    supports_exp = True
    defaults = dict(tol_gap_abs=1e-8, tol_gap_rel=1e-8, tol_feas=1e-8, max_iter=400)

    _STATUS = {
        "Solved": "optimal",
        "AlmostSolved": "inaccurate",
        "PrimalInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "unbounded",
        "AlmostDualInfeasible": "unbounded",
        "MaxIterations": "inaccurate",
        "MaxTime": "inaccurate",
        "InsufficientProgress": "inaccurate",
        "NumericalError": "failed",
    }

    def run(self, std: StandardForm, settings: dict) -> RawResult:
        import clarabel

        opts = dict(self.defaults)
        opts.update(settings)
        perm = np.arange(std.A.shape[0])
        cones = []
        for blk in std.blocks:
            if blk.cone == "zero":
                cones.append(clarabel.ZeroConeT(blk.rows))
            elif blk.cone == "nonneg":
                cones.append(clarabel.NonnegativeConeT(blk.rows))
            elif blk.cone == "psd":
                cones.append(clarabel.PSDTriangleConeT(blk.dim))
                perm[blk.start : blk.start + blk.rows] = blk.start + _clarabel_psd_perm(blk.dim)
            else:
                cones.append(clarabel.ExponentialConeT())
        A = sp.csc_matrix(std.A[perm])
        b = std.b[perm]
        n = std.A.shape[1]
        cs = clarabel.DefaultSettings()
        cs.verbose = False
        for key, val in opts.items():
            setattr(cs, key, val)
        solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), std.c, A, b, cones, cs)
        sol = solver.solve()
        raw = str(sol.status)
        status = self._STATUS.get(raw, "failed")
        x = np.asarray(sol.x, dtype=float) if status in ("optimal", "inaccurate") else None
        return RawResult(x, status, raw, int(sol.iterations), float(sol.r_dual), float(sol.obj_val), float(sol.obj_val_dual))


class SCSBackend:
    name = "scs"
    supports_exp = True
    defaults = dict(eps_abs=1e-9, eps_rel=1e-9, max_iters=200_000)

    def run(self, std: StandardForm, settings: dict) -> RawResult:
        import scs

        opts = dict(self.defaults)
        opts.update(settings)
        counts = std.counts
        cone = {"z": counts["zero"], "l": counts["nonneg"], "s": counts["psd"], "ep": counts["exp"]}
        data = {"A": sp.csc_matrix(std.A), "b": std.b, "c": std.c}
        solver = scs.SCS(data, cone, verbose=False, **opts)
        out = solver.solve()
        info = out["info"]
        raw = str(info["status"])
        low = raw.lower()
        if low == "solved":
            status = "optimal"
        elif "infeasible" in low and "inaccurate" not in low:
            status = "infeasible"
        elif "unbounded" in low and "inaccurate" not in low:
            status = "unbounded"
        elif "inaccurate" in low:
            status = "inaccurate"
        else:
            status = "failed"
        x = np.asarray(out["x"], dtype=float) if status in ("optimal", "inaccurate") else None
        return RawResult(
            x, status, raw, int(info["iter"]), float(info.get("res_dual", np.nan)), float(info["pobj"]), float(info["dobj"])
        )


BACKENDS: dict[str, Backend] = {"clarabel": ClarabelBackend(), "scs": SCSBackend()}


def register_backend(backend: Backend) -> None:
    BACKENDS[backend.name] = backend


def get_backend(name: str) -> Backend:
    try:
        return BACKENDS[name]
    except KeyError:
        raise SolverError(f"unknown backend {name!r}; available: {sorted(BACKENDS)}") from None


def solve(program: ConicProgram, backend: str | Backend = "clarabel", **settings) -> Solution:
    """Compile, solve and map values back onto the program's variables."""
    be = get_backend(backend) if isinstance(backend, str) else backend
    std = compile_program(program)
    if not be.supports_exp and std.counts["exp"]:
        raise SolverError(f"backend {be.name} does not support exponential cones")
    t0 = time.perf_counter()
    raw = be.run(std, settings)
    wall = time.perf_counter() - t0
    if raw.x is None:
        report = SolverReport(raw.status, float("nan"), float("nan"), float("nan"), raw.iterations, wall, be.name, raw_status=raw.raw_status)
        return Solution(report)
    x = raw.x
    viols = [constraint_violation(con, x) for con in program.constraints]
    worst = int(np.argmax(viols)) if viols else -1
    objective = float(program.objective.value(x)) if program.objective is not None else 0.0
    gap = std.sign * (raw.primal_obj - raw.dual_obj) if np.isfinite(raw.dual_obj) else float("nan")
    report = SolverReport(
        raw.status,
        objective,
        float(max(viols, default=0.0)),
        raw.dual_residual,
        raw.iterations,
        wall,
        be.name,
        gap=float(gap),
        raw_status=raw.raw_status,
        worst_constraint=program.constraints[worst].name if worst >= 0 else "",
    )
    return Solution(report, program.extract(x), x)
