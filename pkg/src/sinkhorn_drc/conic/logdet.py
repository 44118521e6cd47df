"""Conic encodings of the log-determinant hypograph."""

from __future__ import annotations

import numpy as np

from .ir import ConicProgram, Expr, as_expr, bmat, diag_matrix


def encode_logdet_hypograph(
    prog: ConicProgram,
    M: Expr,
    name: str = "logdet",
    perspective: Expr | float | None = None,
) -> Expr:
    """Return a scalar ``t`` constrained so that ``t <= log|M|``.

    Uses a lower-triangular auxiliary ``L`` with ``[[M, L], [L^T, diag(L)]] >= 0``
    (so ``|M| >= prod L_ii``) and one exponential-cone row ``u_i <= log L_ii``
    per diagonal entry.  With ``perspective = y`` the rows become
    ``u_i <= y log(L_ii / y)`` and ``t <= y log|M / y|``.  The bound is tight at
    any optimum that pushes ``t`` up.
    """
    M = as_expr(M)
    k = M.shape[0]
    L = prog.variable(f"{name}.L", (k, k), mask=np.tril(np.ones((k, k), dtype=bool)))
    prog.add_psd(bmat([[M, L], [L.T, diag_matrix(L.diag())]]), f"{name}: [[M, L], [L^T, diag L]] >= 0")
    u = prog.variable(f"{name}.u", (k,))
    y = 1.0 if perspective is None else perspective
    prog.add_exp(u, y, L.diag(), f"{name}: u_i <= log L_ii")
    t = prog.variable(f"{name}.t")
    prog.add_nonneg(u.sum() - t, f"{name}: t <= sum u_i")
    return t
