from .backends import BACKENDS, Backend, Solution, SolverReport, get_backend, register_backend, solve
from .ir import (
    ConicProgram,
    Constraint,
    Diagnostics,
    Expr,
    StandardForm,
    as_expr,
    bmat,
    compile_program,
    constant,
    constraint_violation,
    diag_matrix,
    hstack,
    program_to_dict,
    smat,
    validate,
    vstack,
)
from .logdet import encode_logdet_hypograph

__all__ = [
    "BACKENDS",
    "Backend",
    "ConicProgram",
    "Constraint",
    "Diagnostics",
    "Expr",
    "Solution",
    "SolverReport",
    "StandardForm",
    "as_expr",
    "bmat",
    "compile_program",
    "constant",
    "constraint_violation",
    "diag_matrix",
    "encode_logdet_hypograph",
    "get_backend",
    "hstack",
    "program_to_dict",
    "register_backend",
    "smat",
    "solve",
    "validate",
    "vstack",
]
