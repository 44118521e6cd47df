"""Solver-agnostic conic intermediate representation.

A :class:`ConicProgram` owns a flat vector of scalar decision variables.
Every modeling object is an :class:`Expr`, an affine map ``coef @ x + const``
reshaped (row-major) to a 0-, 1- or 2-D shape.  Constraints place an
expression in one of four cones:

``zero``    expression == 0 elementwise
``nonneg``  expression >= 0 elementwise
``psd``     square expression is positive semidefinite
``exp``     each row ``(x, y, z)`` of a ``(K, 3)`` expression satisfies
            ``y exp(x / y) <= z, y > 0`` (closure)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

CONES = ("zero", "nonneg", "psd", "exp")
_CONE_ORDER = {c: i for i, c in enumerate(CONES)}


def _pad(coef: sp.csr_matrix, ncols: int) -> sp.csr_matrix:
    if coef.shape[1] == ncols:
        return coef
    return sp.csr_matrix((coef.data, coef.indices, coef.indptr), shape=(coef.shape[0], ncols))


def _selector(index: np.ndarray, size: int) -> sp.csr_matrix:
    index = np.asarray(index).ravel()
    return sp.csr_matrix((np.ones(index.size), (np.arange(index.size), index)), shape=(index.size, size))


class Expr:
    """Affine expression ``coef @ x + const`` with a row-major shape."""

    __array_priority__ = 1000

    def __init__(self, coef: sp.spmatrix, const: np.ndarray, shape: tuple):
        self.coef = sp.csr_matrix(coef)
        self.const = np.asarray(const, dtype=float).ravel()
        self.shape = tuple(int(k) for k in shape)
        if self.coef.shape[0] != self.size or self.const.size != self.size:
            raise ValueError(f"inconsistent expression: shape {self.shape}, coef {self.coef.shape}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def ncols(self) -> int:
        return self.coef.shape[1]

    def __repr__(self) -> str:
        return f"Expr(shape={self.shape}, nnz={self.coef.nnz})"

    # construction helpers
    @staticmethod
    def constant(value) -> "Expr":
        arr = np.asarray(value, dtype=float)
        return Expr(sp.csr_matrix((arr.size, 0)), arr.ravel(), arr.shape)

    def _apply(self, S: sp.spmatrix, shape: tuple) -> "Expr":
        S = sp.csr_matrix(S)
        return Expr(S @ self.coef, S @ self.const, shape)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = _pad(self.coef, x.size) @ x + self.const
        return v.reshape(self.shape)

    # structural operations
    def __getitem__(self, key) -> "Expr":
        idx = np.arange(self.size).reshape(self.shape)[key]
        idx = np.asarray(idx)
        return self._apply(_selector(idx, self.size), idx.shape)

    @property
    def T(self) -> "Expr":
        if self.ndim < 2:
            return self
        idx = np.arange(self.size).reshape(self.shape).T
        return self._apply(_selector(idx, self.size), idx.shape)

    def reshape(self, shape) -> "Expr":
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        if int(np.prod(shape, dtype=int)) != self.size:
            raise ValueError(f"cannot reshape {self.shape} into {shape}")
        return Expr(self.coef, self.const, shape)

    def flatten(self) -> "Expr":
        return self.reshape((self.size,))

    def diag(self) -> "Expr":
        if self.ndim != 2 or self.shape[0] != self.shape[1]:
            raise ValueError("diag needs a square expression")
        k = self.shape[0]
        return self._apply(_selector(np.arange(k) * (k + 1), self.size), (k,))

    def sum(self, axis=None) -> "Expr":
        if axis is None:
            return self._apply(sp.csr_matrix(np.ones((1, self.size))), ())
        if self.ndim != 2:
            raise ValueError("axis sums need a 2-D expression")
        r, c = self.shape
        if axis == 1:
            return self._apply(sp.kron(sp.eye(r), np.ones((1, c))), (r,))
        if axis == 0:
            return self._apply(sp.kron(np.ones((1, r)), sp.eye(c)), (c,))
        raise ValueError(f"bad axis {axis}")

    def trace(self) -> "Expr":
        return self.diag().sum()

    # arithmetic
    def _coerce(self, other) -> "Expr":
        if isinstance(other, Expr):
            return other
        arr = np.asarray(other, dtype=float)
        if arr.shape != self.shape and arr.size == 1:
            arr = np.broadcast_to(arr, self.shape)
        return Expr.constant(arr)

    def __add__(self, other) -> "Expr":
        other = self._coerce(other)
        a, b = self, other
        if a.shape != b.shape:
            if b.size == 1:
                b = b._apply(sp.csr_matrix(np.ones((a.size, 1))), a.shape)
            elif a.size == 1:
                a = a._apply(sp.csr_matrix(np.ones((b.size, 1))), b.shape)
            else:
                raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        n = max(a.ncols, b.ncols)
        return Expr(_pad(a.coef, n) + _pad(b.coef, n), a.const + b.const, a.shape)

    __radd__ = __add__

    def __neg__(self) -> "Expr":
        return Expr(-self.coef, -self.const, self.shape)

    def __sub__(self, other) -> "Expr":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Expr":
        return (-self) + other

    def __mul__(self, other) -> "Expr":
        if isinstance(other, Expr):
            raise TypeError("products of expressions are not affine")
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0:
            return Expr(self.coef * float(arr), self.const * float(arr), self.shape)
        if self.size == 1:
            # scalar expression times constant array
            col = arr.ravel()[:, None]
            return Expr(sp.csr_matrix(col) @ self.coef, col[:, 0] * self.const[0], arr.shape)
        arr = np.broadcast_to(arr, self.shape).ravel()
        return Expr(sp.diags(arr) @ self.coef, arr * self.const, self.shape)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Expr":
        return self * (1.0 / float(other))

    def __matmul__(self, R) -> "Expr":
        if isinstance(R, Expr):
            raise TypeError("products of expressions are not affine")
        R = np.asarray(R, dtype=float)
        X = self if self.ndim == 2 else self.reshape((1, self.size))
        if R.ndim == 1:
            R = R[:, None]
            squeeze = True
        else:
            squeeze = False
        r, c = X.shape
        if R.shape[0] != c:
            raise ValueError(f"matmul shape mismatch {X.shape} @ {R.shape}")
        out = X._apply(sp.kron(sp.eye(r), sp.csr_matrix(R.T)), (r, R.shape[1]))
        return out.reshape((r,)) if squeeze else out

    def __rmatmul__(self, L) -> "Expr":
        L = np.asarray(L, dtype=float)
        X = self if self.ndim == 2 else self.reshape((self.size, 1))
        r, c = X.shape
        if L.ndim == 1:
            L = L[None, :]
        if L.shape[1] != r:
            raise ValueError(f"matmul shape mismatch {L.shape} @ {X.shape}")
        out = X._apply(sp.kron(sp.csr_matrix(L), sp.eye(c)), (L.shape[0], c))
        if self.ndim == 1:
            return out.reshape((L.shape[0],))
        return out


def constant(value) -> Expr:
    return Expr.constant(value)


def as_expr(value) -> Expr:
    return value if isinstance(value, Expr) else Expr.constant(value)


def bmat(blocks: list[list]) -> Expr:
    """Block matrix of expressions, arrays or ``None`` (zero) entries."""
    nr, nc = len(blocks), len(blocks[0])
    heights = [None] * nr
    widths = [None] * nc
    for i, row in enumerate(blocks):
        if len(row) != nc:
            raise ValueError("ragged block structure")
        for j, b in enumerate(row):
            if b is None:
                continue
            shp = b.shape if isinstance(b, Expr) else np.shape(b)
            if len(shp) != 2:
                raise ValueError(f"block ({i},{j}) must be 2-D, got shape {shp}")
            for lst, k, v in ((heights, i, shp[0]), (widths, j, shp[1])):
                if lst[k] is None:
                    lst[k] = v
                elif lst[k] != v:
                    raise ValueError(f"block ({i},{j}) has inconsistent size")
    if None in heights or None in widths:
        raise ValueError("every block row and column needs at least one sized entry")
    R, C = sum(heights), sum(widths)
    pos = np.arange(R * C).reshape(R, C)
    roff = np.concatenate([[0], np.cumsum(heights)])
    coff = np.concatenate([[0], np.cumsum(widths)])
    parts = [(i, j, as_expr(b)) for i, row in enumerate(blocks) for j, b in enumerate(row) if b is not None]
    ncols = max((e.ncols for _, _, e in parts), default=0)
    coef = sp.csr_matrix((R * C, ncols))
    const = np.zeros(R * C)
    for i, j, e in parts:
        target = pos[roff[i] : roff[i + 1], coff[j] : coff[j + 1]].ravel()
        S = sp.csr_matrix((np.ones(e.size), (target, np.arange(e.size))), shape=(R * C, e.size))
        coef = coef + S @ _pad(e.coef, ncols)
        const[target] += e.const
    return Expr(coef, const, (R, C))


def hstack(items: Iterable) -> Expr:
    return bmat([list(items)])


def vstack(items: Iterable) -> Expr:
    return bmat([[it] for it in items])


def diag_matrix(vec: Expr) -> Expr:
    k = vec.size
    idx = np.arange(k) * (k + 1)
    S = sp.csr_matrix((np.ones(k), (idx, np.arange(k))), shape=(k * k, k))
    return vec.flatten()._apply(S, (k, k))


@dataclass
class Variable:
    name: str
    shape: tuple
    offset: int
    size: int
    kind: str = "dense"
    mask: np.ndarray | None = None

    def extract(self, x: np.ndarray) -> np.ndarray:
        vals = np.asarray(x[self.offset : self.offset + self.size], dtype=float)
        if self.kind == "dense":
            return vals.reshape(self.shape) if self.shape else vals[0]
        if self.kind == "masked":
            out = np.zeros(self.shape)
            out[self.mask] = vals
            return out
        k = self.shape[0]
        out = np.zeros((k, k))
        out[np.tril_indices(k)] = vals
        return out + np.tril(out, -1).T


@dataclass
class Constraint:
    cone: str
    expr: Expr
    name: str
    meta: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        if self.cone == "psd":
            k = self.expr.shape[0]
            return k * (k + 1) // 2
        return self.expr.size


class ConicProgram:
    """Container for variables, a linear objective and cone constraints.

    Each constraint carries a human-readable ``name`` that is propagated into
    diagnostics and backend error messages.
    """

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.nvar = 0
        self.objective: Expr | None = None
        self.sense = "min"
        # named expressions kept for callers that need to read results back
        self.handles: dict[str, Expr] = {}

    def _new(self, name: str, shape: tuple, size: int, kind: str, mask=None) -> Variable:
        if any(v.name == name for v in self.variables):
            raise ValueError(f"duplicate variable name {name!r}")
        var = Variable(name, shape, self.nvar, size, kind, mask)
        self.variables.append(var)
        self.nvar += size
        return var

    def variable(self, name: str, shape=(), mask=None) -> Expr:
        """Dense variable, or a structurally sparse one when ``mask`` is given."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        total = int(np.prod(shape, dtype=int))
        if mask is None:
            var = self._new(name, shape, total, "dense")
            cols = np.arange(total) + var.offset
            coef = sp.csr_matrix((np.ones(total), (np.arange(total), cols)), shape=(total, self.nvar))
            return Expr(coef, np.zeros(total), shape)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise ValueError(f"mask shape {mask.shape} differs from variable shape {shape}")
        free = np.flatnonzero(mask.ravel())
        var = self._new(name, shape, free.size, "masked", mask.copy())
        coef = sp.csr_matrix(
            (np.ones(free.size), (free, var.offset + np.arange(free.size))), shape=(total, self.nvar)
        )
        return Expr(coef, np.zeros(total), shape)

    def symmetric(self, name: str, k: int) -> Expr:
        ntri = k * (k + 1) // 2
        var = self._new(name, (k, k), ntri, "symmetric")
        lookup = np.zeros((k, k), dtype=int)
        lookup[np.tril_indices(k)] = np.arange(ntri)
        lookup = np.tril(lookup) + np.tril(lookup, -1).T
        cols = var.offset + lookup.ravel()
        coef = sp.csr_matrix((np.ones(k * k), (np.arange(k * k), cols)), shape=(k * k, self.nvar))
        return Expr(coef, np.zeros(k * k), (k, k))

    def _add(self, cone: str, expr, name: str, **meta) -> Constraint:
        expr = as_expr(expr)
        con = Constraint(cone, expr, name, dict(meta))
        self.constraints.append(con)
        return con

    def add_zero(self, expr, name: str, **meta) -> Constraint:
        return self._add("zero", expr, name, **meta)

    def add_nonneg(self, expr, name: str, **meta) -> Constraint:
        return self._add("nonneg", expr, name, **meta)

    def add_psd(self, expr, name: str, **meta) -> Constraint:
        expr = as_expr(expr)
        if expr.ndim != 2 or expr.shape[0] != expr.shape[1]:
            raise ValueError(f"PSD constraint {name!r} needs a square expression, got {expr.shape}")
        return self._add("psd", expr, name, **meta)

    def add_exp(self, x, y, z, name: str, **meta) -> Constraint:
        """Rows ``(x_k, y_k, z_k)`` in the exponential cone; scalars broadcast."""
        parts = [as_expr(a) for a in (x, y, z)]
        K = max(p.size for p in parts)
        cols = []
        for p in parts:
            p = p.flatten()
            if p.size == 1 and K > 1:
                p = p._apply(sp.csr_matrix(np.ones((K, 1))), (K,))
            elif p.size != K:
                raise ValueError(f"exponential cone {name!r}: argument sizes differ")
            cols.append(p.reshape((K, 1)))
        return self._add("exp", hstack(cols), name, **meta)

    def minimize(self, expr) -> None:
        self.objective = as_expr(expr).reshape(())
        self.sense = "min"

    def maximize(self, expr) -> None:
        self.objective = as_expr(expr).reshape(())
        self.sense = "max"

    def variable_by_name(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def extract(self, x: np.ndarray) -> dict:
        return {v.name: v.extract(x) for v in self.variables}

    def compile(self) -> "StandardForm":
        return compile_program(self)


def svec_index(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-major flat positions and scalings for the lower-triangle, column-major svec."""
    ii, jj = [], []
    for j in range(k):
        for i in range(j, k):
            ii.append(i)
            jj.append(j)
    ii, jj = np.array(ii), np.array(jj)
    scale = np.where(ii == jj, 1.0, np.sqrt(2.0))
    return ii, jj, scale


def svec_expr(X: Expr) -> Expr:
    """Scaled lower-triangular vectorization of the symmetric part of ``X``."""
    k = X.shape[0]
    ii, jj, scale = svec_index(k)
    lo = ii * k + jj
    hi = jj * k + ii
    nrow = ii.size
    S = sp.csr_matrix(
        (np.concatenate([0.5 * scale, 0.5 * scale]), (np.tile(np.arange(nrow), 2), np.concatenate([lo, hi]))),
        shape=(nrow, k * k),
    )
    return X._apply(S, (nrow,))


def smat(v: np.ndarray, k: int) -> np.ndarray:
    ii, jj, scale = svec_index(k)
    X = np.zeros((k, k))
    X[ii, jj] = v / scale
    X[jj, ii] = v / scale
    return X


@dataclass
class ConeBlock:
    cone: str
    start: int
    rows: int
    dim: int
    constraint: int


@dataclass
class StandardForm:
    """``min c^T x`` s.t. ``b - A x`` in the product cone described by ``blocks``.

    Blocks are ordered zero, nonneg, psd, exp; PSD rows use the scaled
    lower-triangular column-major vectorization.
    """

    A: sp.csc_matrix
    b: np.ndarray
    c: np.ndarray
    c0: float
    blocks: list[ConeBlock]
    sign: float
    names: list[str]

    @property
    def counts(self) -> dict:
        out = {"zero": 0, "nonneg": 0, "psd": [], "exp": 0}
        for blk in self.blocks:
            if blk.cone == "psd":
                out["psd"].append(blk.dim)
            elif blk.cone == "exp":
                out["exp"] += blk.rows // 3
            else:
                out[blk.cone] += blk.rows
        return out

    def constraint_at_row(self, row: int) -> str:
        for blk in self.blocks:
            if blk.start <= row < blk.start + blk.rows:
                return self.names[blk.constraint]
        raise IndexError(row)


def compile_program(prog: ConicProgram) -> StandardForm:
    n = prog.nvar
    order = sorted(range(len(prog.constraints)), key=lambda k: _CONE_ORDER[prog.constraints[k].cone])
    Fs, gs, blocks = [], [], []
    row = 0
    for k in order:
        con = prog.constraints[k]
        e = con.expr
        if con.cone == "psd":
            v = svec_expr(e)
            dim = e.shape[0]
        elif con.cone == "exp":
            if e.ndim != 2 or e.shape[1] != 3:
                raise ValueError(f"exponential-cone constraint {con.name!r} must have shape (K, 3)")
            v = e.flatten()
            dim = 3
        else:
            v = e.flatten()
            dim = v.size
        if con.cone == "exp":
            for t in range(e.shape[0]):
                blocks.append(ConeBlock("exp", row + 3 * t, 3, 3, k))
        else:
            blocks.append(ConeBlock(con.cone, row, v.size, dim, k))
        Fs.append(_pad(v.coef, n))
        gs.append(v.const)
        row += v.size
    F = sp.vstack(Fs, format="csc") if Fs else sp.csc_matrix((0, n))
    g = np.concatenate(gs) if gs else np.zeros(0)
    sign = -1.0 if prog.sense == "max" else 1.0
    if prog.objective is None:
        c, c0 = np.zeros(n), 0.0
    else:
        c = sign * np.asarray(_pad(prog.objective.coef, n).todense()).ravel()
        c0 = sign * float(prog.objective.const[0])
    return StandardForm(sp.csc_matrix(-F), g, c, c0, blocks, sign, [con.name for con in prog.constraints])


def constraint_violation(con: Constraint, x: np.ndarray) -> float:
    """Distance-like violation of a single constraint at ``x`` (0 when satisfied)."""
    v = con.expr.value(x)
    if con.cone == "zero":
        return float(np.abs(v).max(initial=0.0))
    if con.cone == "nonneg":
        return float(max(0.0, -v.min(initial=0.0)))
    if con.cone == "psd":
        S = 0.5 * (v + v.T)
        return float(max(0.0, -np.linalg.eigvalsh(S)[0]))
    # exponential cone, measured along x: x <= y log(z / y) for y, z > 0
    xx, yy, zz = np.atleast_2d(v).T
    inside = (yy > 0) & (zz > 0)
    safe_y = np.where(inside, yy, 1.0)
    safe_z = np.where(inside, zz, 1.0)
    viol = np.where(inside, np.maximum(0.0, xx - safe_y * np.log(safe_z / safe_y)), 0.0)
    edge = ~inside
    viol = np.where(edge, np.maximum(0.0, -yy) + np.maximum(0.0, -zz) + np.maximum(0.0, xx), viol)
    return float(viol.max(initial=0.0))


@dataclass
class Diagnostics:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    unreferenced: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.errors and not self.warnings

    def __str__(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        if self.unreferenced:
            lines.append("unreferenced variables: " + ", ".join(self.unreferenced))
        return "\n".join(lines) or "clean"


def validate(prog: ConicProgram, sym_tol: float = 1e-12) -> Diagnostics:
    """Dimension, symmetry and cone checks; lists variables no row touches."""
    diag = Diagnostics()
    if prog.objective is None or (prog.objective.coef.nnz == 0):
        diag.warnings.append("objective is empty")
    used = np.zeros(prog.nvar, dtype=bool)
    if prog.objective is not None:
        used[_pad(prog.objective.coef, prog.nvar).indices] = True
    for k, con in enumerate(prog.constraints):
        label = f"constraint {k} ({con.name or '<unnamed>'})"
        if not con.name:
            diag.errors.append(f"{label}: missing metadata name")
        if con.cone not in CONES:
            diag.errors.append(f"{label}: unknown cone {con.cone!r}")
            continue
        e = con.expr
        if e.ncols > prog.nvar:
            diag.errors.append(f"{label}: references variables outside the program")
            continue
        coef = _pad(e.coef, prog.nvar)
        used[coef.indices] = True
        if con.cone == "psd":
            if e.ndim != 2 or e.shape[0] != e.shape[1]:
                diag.errors.append(f"{label}: PSD block is not square")
                continue
            k2 = e.shape[0]
            perm = np.arange(k2 * k2).reshape(k2, k2).T.ravel()
            dc = coef - coef[perm]
            dconst = e.const - e.const[perm]
            asym = max(abs(dc).max() if dc.nnz else 0.0, np.abs(dconst).max(initial=0.0))
            if asym > sym_tol:
                diag.errors.append(f"{label}: PSD block is not symmetric (max mismatch {asym:.3e})")
        elif con.cone == "exp":
            if e.ndim != 2 or e.shape[1] != 3:
                diag.errors.append(f"{label}: exponential-cone rows must have shape (K, 3)")
        if not np.all(np.isfinite(e.const)) or not np.all(np.isfinite(coef.data)):
            diag.errors.append(f"{label}: non-finite data")
    for v in prog.variables:
        if v.size and not used[v.offset : v.offset + v.size].any():
            diag.unreferenced.append(v.name)
    return diag


def program_to_dict(prog: ConicProgram) -> dict:
    """Compiled program as plain data (sparse triplets), for cross-solver reproduction."""
    std = compile_program(prog)
    A = std.A.tocoo()
    return {
        "format": "conic-ir/1",
        "name": prog.name,
        "convention": "minimize c^T x + c0 subject to b - A x in K; psd rows are scaled "
        "lower-triangular column-major svec; exp rows (x, y, z) mean y*exp(x/y) <= z",
        "sense": prog.sense,
        "variables": [
            {"name": v.name, "kind": v.kind, "shape": list(v.shape), "offset": v.offset, "size": v.size}
            for v in prog.variables
        ],
        "n": prog.nvar,
        "c": std.c.tolist(),
        "c0": std.c0,
        "A": {"shape": list(A.shape), "rows": A.row.tolist(), "cols": A.col.tolist(), "vals": A.data.tolist()},
        "b": std.b.tolist(),
        "cones": [
            {"cone": blk.cone, "start": blk.start, "rows": blk.rows, "dim": blk.dim, "constraint": std.names[blk.constraint]}
            for blk in std.blocks
        ],
    }
