"""Command-line front end.

Configuration is a single JSON document::

    {
      "system": {"type": "mass_spring_damper", "N": 10}            # or {"N": .., "A": .., "B": .., "E": ..}
      "cost": "identity"                                            # or {"D": ..} or {"state_weight": .., "input_weight": ..}
      "samples": {"generator": {"n": 20, "mean": 0, "cov": 0.5}}   # or {"path": "samples.csv"}
      "reference": {"mean": 0, "cov": 0.1},
      "rho": [3.5, 4, 5],
      "eps": {"logspace": [-4, 1, 25]},                             # or a list / number
      "strategy": "direct", "formulation": "compact", "backend": "clarabel",
      "true": {"mean": 0, "cov": 0.3}, "replications": 20, "monte_carlo": 0,
      "seed": 7
    }

Scalars for ``mean`` and ``cov`` expand to ``mean * 1`` and ``cov * I``; a
1-D ``cov`` is a diagonal.  Matrices are nested row-major lists.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .ambiguity import AmbiguitySpec, GaussianReference, feasibility_oracle, feasibility_threshold
from .errors import ConfigError, InfeasibleError, SinkhornDRCError, SolverError, UnboundedError, UnsupportedRecoveryError
from .synthesis import (
    FORMULATIONS,
    MomentSpec,
    SolutionBundle,
    SynthesisRequest,
    Tolerances,
    evaluate_expected_cost,
    synthesize_h2,
    synthesize_nominal,
    synthesize_sinkhorn,
    synthesize_wasserstein,
)
from .system import (
    ClosedLoopMap,
    CostSpec,
    SampleSet,
    SystemSpec,
    build_stacked,
    gaussian_sampler,
    mass_spring_damper,
    monte_carlo_cost,
    recover_controller,
)

EXIT_OK, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
RNG_NAME = "PCG64 (numpy.random.default_rng)"
DEFAULT_EPS_GRID = {"logspace": [-4.0, 1.0, 25]}
NOMINAL_LABEL = "nominal (H2 on empirical moments)"


def fmt(x) -> str:
    """Full double precision scientific notation; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.16e}"


# configuration


def _vector(value, s: int, what: str) -> np.ndarray:
    arr = np.asarray(0.0 if value is None else value, dtype=float)
    if arr.ndim == 0:
        return np.full(s, float(arr))
    if arr.shape != (s,):
        raise ConfigError(f"{what} has shape {arr.shape}, expected ({s},)")
    return arr


def _matrix(value, s: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(s)
    if arr.ndim == 1:
        if arr.size != s:
            raise ConfigError(f"{what} diagonal has length {arr.size}, expected {s}")
        return np.diag(arr)
    if arr.shape != (s, s):
        raise ConfigError(f"{what} has shape {arr.shape}, expected {(s, s)}")
    return arr


def _grid(value, what: str) -> list[float]:
    if value is None:
        raise ConfigError(f"missing {what} grid")
    if isinstance(value, dict):
        if "logspace" in value:
            lo, hi, k = value["logspace"]
            return [float(x) for x in np.logspace(float(lo), float(hi), int(k))]
        if "linspace" in value:
            lo, hi, k = value["linspace"]
            return [float(x) for x in np.linspace(float(lo), float(hi), int(k))]
        raise ConfigError(f"{what} grid must be a list, a number, or {{'logspace': [lo, hi, k]}}")
    vals = [float(v) for v in (value if isinstance(value, (list, tuple)) else [value])]
    if not vals:
        raise ConfigError(f"{what} grid is empty")
    return vals


@dataclass
class ExperimentConfig:
    raw: dict
    system: SystemSpec
    cost: CostSpec
    reference: GaussianReference
    rho: list
    eps: list
    strategy: str = "direct"
    formulation: str = "compact"
    backend: str = "clarabel"
    solver: dict = field(default_factory=dict)
    seed: int = 0
    true: MomentSpec | None = None
    replications: int = 1
    monte_carlo: int = 0
    out: str = "out"

    @property
    def s(self) -> int:
        return self.system.s

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(backend=self.backend, solver=dict(self.solver))

    def samples(self, seed: int | None = None) -> SampleSet:
        spec = self.raw.get("samples")
        if spec is None:
            raise ConfigError("config has no 'samples' section")
        if "path" in spec:
            return read_samples(spec["path"], self.s)
        gen = spec.get("generator")
        if gen is None:
            raise ConfigError("samples need either 'path' or 'generator'")
        seed = self.seed if seed is None else seed
        return generate_samples(_vector(gen.get("mean"), self.s, "samples.mean"), _matrix(gen.get("cov", 1.0), self.s, "samples.cov"), int(gen["n"]), seed)

    def request(self, samples: SampleSet, rho: float, eps: float) -> SynthesisRequest:
        return SynthesisRequest(
            self.system, self.cost, samples, self.reference, AmbiguitySpec(rho, eps), self.strategy, self.tolerances, self.formulation
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def build_system(cfg: dict) -> SystemSpec:
    if "system_path" in cfg:
        with open(cfg["system_path"]) as fh:
            cfg = {"system": json.load(fh)}
    sysc = cfg.get("system")
    if sysc is None:
        raise ConfigError("config has no 'system' section")
    N = int(sysc["N"])
    kind = sysc.get("type", "matrices")
    if kind == "mass_spring_damper":
        return mass_spring_damper(N, sysc.get("Ts", 1.0), sysc.get("k", 1.0), sysc.get("c", 1.0), sysc.get("mass", 1.0))
    try:
        A, B = sysc["A"], sysc["B"]
    except KeyError as e:
        raise ConfigError(f"system is missing {e}") from None
    E = sysc.get("E")
    A3 = np.asarray(A, dtype=float)
    if A3.ndim == 2:
        Bm = np.asarray(B, dtype=float)
        Em = np.eye(A3.shape[0]) if E is None else np.asarray(E, dtype=float)
        return SystemSpec.time_invariant(A3, Bm, Em, N)
    Es = [np.eye(np.shape(a)[0]) for a in A] if E is None else E
    return SystemSpec(N, [np.asarray(a, float) for a in A], [np.asarray(b, float) for b in B], [np.asarray(e, float) for e in Es])


def build_cost(cfg: dict, spec: SystemSpec) -> CostSpec:
    c = cfg.get("cost", "identity")
    if c == "identity":
        return CostSpec.identity(spec)
    if isinstance(c, dict) and "D" in c:
        return CostSpec(np.asarray(c["D"], dtype=float))
    if isinstance(c, dict) and "state_weight" in c:
        return CostSpec.from_weights(spec, c["state_weight"], c["input_weight"])
    raise ConfigError("cost must be 'identity', {'D': ...} or {'state_weight': ..., 'input_weight': ...}")


def load_config(source: str | dict, seed: int | None = None) -> ExperimentConfig:
    if isinstance(source, dict):
        raw = json.loads(json.dumps(source))
    else:
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {source}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {source} is not valid JSON: {e}") from None
    if seed is not None:
        raw["seed"] = int(seed)
    try:
        spec = build_system(raw)
        cost = build_cost(raw, spec)
        s = spec.s
        refc = raw.get("reference", {})
        ref = GaussianReference(_vector(refc.get("mean"), s, "reference.mean"), _matrix(refc.get("cov", 1.0), s, "reference.cov"))
        true = None
        if "true" in raw:
            true = MomentSpec(_vector(raw["true"].get("mean"), s, "true.mean"), _matrix(raw["true"]["cov"], s, "true.cov"))
        cfg = ExperimentConfig(
            raw=raw,
            system=spec,
            cost=cost,
            reference=ref,
            rho=_grid(raw.get("rho"), "rho"),
            eps=_grid(raw.get("eps", DEFAULT_EPS_GRID), "eps"),
            strategy=raw.get("strategy", "direct"),
            formulation=raw.get("formulation", "compact"),
            backend=raw.get("backend", "clarabel"),
            solver=dict(raw.get("solver", {})),
            seed=int(raw.get("seed", 0)),
            true=true,
            replications=int(raw.get("replications", 1)),
            monte_carlo=int(raw.get("monte_carlo", 0)),
            out=raw.get("out", "out"),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None
    if cfg.strategy not in ("outer", "direct"):
        raise ConfigError(f"strategy must be 'outer' or 'direct', got {cfg.strategy!r}")
    if cfg.formulation not in FORMULATIONS:
        raise ConfigError(f"formulation must be one of {FORMULATIONS}")
    if any(r < 0 for r in cfg.rho) or any(e < 0 for e in cfg.eps):
        raise ConfigError("rho and eps grids must be nonnegative")
    return cfg


# samples


def generate_samples(mean, cov, n: int, seed: int) -> SampleSet:
    """Seeded Gaussian trajectories; a zero covariance yields constant rows."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    s = mean.size
    if cov.shape != (s, s) or not np.allclose(cov, cov.T):
        raise ConfigError("sample covariance must be a symmetric s x s matrix")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.min(initial=0.0) < -1e-10 * max(1.0, np.abs(vals).max(initial=0.0)):
        raise ConfigError("sample covariance must be positive semidefinite")
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, s))
    return SampleSet(mean + Z @ root.T)


def sample_header(spec: SystemSpec) -> list[str]:
    cols = [f"x0_{j + 1}" for j in range(spec.d)]
    for t in range(spec.N - 1):
        cols += [f"w{t}_{j + 1}" for j in range(spec.p)]
    return cols


def read_samples(path: str, s: int) -> SampleSet:
    try:
        with open(path) as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    except OSError as e:
        raise ConfigError(f"cannot read samples {path}: {e}") from None
    if not rows:
        raise ConfigError(f"sample file {path} is empty")
    header, body = rows[0], rows[1:]
    if len(header) != s or not header[0].startswith("x0_"):
        raise ConfigError(f"sample file {path} needs a header with {s} columns starting at x0_1")
    return SampleSet(np.array([[float(v) for v in r] for r in body]))


# output


def manifest(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> dict:
    versions = {}
    for pkg in ("artifact", "numpy", "scipy", "clarabel", "scs"):
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = "unknown"
    out = {
        "command": command,
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "rng": RNG_NAME,
        "rho_grid": cfg.rho,
        "eps_grid": cfg.eps,
        "strategy": cfg.strategy,
        "formulation": cfg.formulation,
        "backend": cfg.backend,
        "tolerances": asdict(cfg.tolerances),
        "nominal_definition": NOMINAL_LABEL,
        "versions": versions,
        "config": cfg.raw,
    }
    if extra:
        out.update(extra)
    return out


def write_csv(path: Path, header: list[str], rows: list[list], meta: dict) -> None:
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) or v is None else v for v in r])
    path.write_text(buf.getvalue())


def write_matrix(path: Path, M: np.ndarray, meta: dict) -> None:
    write_csv(path, [f"c{j}" for j in range(M.shape[1])], [list(map(float, r)) for r in M], meta)


def read_csv_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# commands


def _solve_cell(cfg: ExperimentConfig, samples: SampleSet, rho: float, eps: float) -> SolutionBundle:
    req = cfg.request(samples, rho, eps)
    return synthesize_wasserstein(req) if eps == 0 else synthesize_sinkhorn(req)


def cmd_synthesize(cfg: ExperimentConfig, out: Path) -> int:
    samples = cfg.samples()
    rho, eps = cfg.rho[0], cfg.eps[0]
    rho_min = feasibility_threshold(samples, cfg.reference, eps)
    meta = manifest(cfg, "synthesize", {"rho": rho, "eps": eps, "rho_min": rho_min})
    out.mkdir(parents=True, exist_ok=True)
    try:
        b = _solve_cell(cfg, samples, rho, eps)
    except InfeasibleError as e:
        print(f"infeasible: rho = {rho} is below rho_min = {e.rho_min:.12e}")
        _write_json(out / "summary.json", {"status": "infeasible", "rho": rho, "eps": eps, "rho_min": e.rho_min, "manifest": meta})
        return EXIT_INFEASIBLE
    write_matrix(out / "phi_x.csv", b.map.PhiX, meta)
    write_matrix(out / "phi_u.csv", b.map.PhiU, meta)
    K_written = False
    try:
        ctrl = recover_controller(b.map, build_stacked(cfg.system), tol=1e-6)
        write_matrix(out / "K.csv", ctrl.K, meta)
        K_written = True
    except (UnsupportedRecoveryError, SinkhornDRCError):
        pass
    summary = {
        "status": b.solver_report.status if b.solver_report else "optimal",
        "rho": rho,
        "eps": eps,
        "rho_min": rho_min,
        "wc_cost": b.wc_cost,
        "lambda_star": b.lambda_star if math.isfinite(b.lambda_star) else None,
        "achievability_residual": b.achievability,
        "K_recovered": K_written,
        "solver": asdict(b.solver_report) if b.solver_report else None,
        "manifest": meta,
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", meta)
    print(f"wc_cost = {b.wc_cost:.12e}  lambda* = {b.lambda_star:.12e}  rho_min = {rho_min:.12e}")
    return EXIT_OK


SWEEP_HEADER = ["rho", "eps", "status", "wc_cost", "lambda_star", "rho_min", "solve_time", "backend", "wasserstein_wc_cost", "h2_nu_cost"]


def _sweep_cell(args) -> list:
    cfg, samples, rho, eps = args
    rho_min = feasibility_threshold(samples, cfg.reference, eps)
    t0 = time.perf_counter()
    if rho < rho_min + 1e-9 and eps > 0:
        return [rho, eps, "infeasible", None, None, rho_min, 0.0, cfg.backend]
    try:
        b = _solve_cell(cfg, samples, rho, eps)
        status = b.solver_report.status if b.solver_report else "optimal"
        lam = b.lambda_star if math.isfinite(b.lambda_star) else None
        return [rho, eps, status, b.wc_cost, lam, rho_min, time.perf_counter() - t0, cfg.backend]
    except InfeasibleError:
        return [rho, eps, "infeasible", None, None, rho_min, time.perf_counter() - t0, cfg.backend]
    except UnboundedError:
        return [rho, eps, "unbounded", None, None, rho_min, time.perf_counter() - t0, cfg.backend]
    except SolverError as e:
        status = e.report.status if getattr(e, "report", None) is not None else "failed"
        return [rho, eps, status, None, None, rho_min, time.perf_counter() - t0, cfg.backend]


def _map_cells(fn, cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[list]:
    samples = cfg.samples()
    cells = [(cfg, samples, r, e) for r in sorted(cfg.rho) for e in sorted(cfg.eps)]
    wcells = [(cfg, samples, r, 0.0) for r in sorted(cfg.rho)]
    results = _map_cells(_sweep_cell, cells + wcells, jobs)
    wass = {row[0]: row[3] for row in results[len(cells) :]}
    h2 = synthesize_h2(cfg.system, cfg.cost, MomentSpec.of_reference(cfg.reference))
    h2_nu = evaluate_expected_cost(h2.map, MomentSpec.of_reference(cfg.reference), cfg.cost)
    return [row + [wass[row[0]], h2_nu] for row in results[: len(cells)]]


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    rows = run_sweep(cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows, manifest(cfg, "sweep"))
    for r in rows:
        wc = "-" if r[3] is None else f"{r[3]:.6f}"
        print(f"rho={r[0]:<8g} eps={r[1]:<12.4e} {r[2]:<11} wc={wc}")
    return EXIT_OK


COMPARE_HEADER = ["replication", "seed", "controller", "rho", "eps", "status", "realized_cost", "wc_cost", "mc_mean", "mc_stderr"]


def _compare_replication(args) -> list[list]:
    cfg, rep, seed = args
    samples = cfg.samples(seed)
    true = cfg.true
    rows = []

    def realized(b):
        return evaluate_expected_cost(b.map, true, cfg.cost)

    def mc(b):
        if cfg.monte_carlo <= 0:
            return None, None
        m, se = monte_carlo_cost(cfg.system, b.map, cfg.cost, gaussian_sampler(true.mean, true.cov), cfg.monte_carlo, seed=seed + 1)
        return m, se

    nom = synthesize_nominal(cfg.system, cfg.cost, samples)
    rows.append([rep, seed, NOMINAL_LABEL, None, None, "optimal", realized(nom), nom.wc_cost, *mc(nom)])
    for rho in sorted(cfg.rho):
        for eps in [0.0] + sorted(cfg.eps):
            name = "wasserstein" if eps == 0 else "sinkhorn"
            try:
                b = _solve_cell(cfg, samples, rho, eps)
                rows.append([rep, seed, name, rho, eps, "optimal", realized(b), b.wc_cost, *mc(b)])
            except InfeasibleError:
                rows.append([rep, seed, name, rho, eps, "infeasible", None, None, None, None])
            except (SolverError, UnboundedError) as e:
                rows.append([rep, seed, name, rho, eps, f"failed: {e}", None, None, None, None])
    return rows


def run_compare(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[list], list[list]]:
    if cfg.true is None:
        raise ConfigError("compare needs a 'true' distribution section")
    seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(cfg.seed).spawn(cfg.replications)]
    per = _map_cells(_compare_replication, [(cfg, r, sd) for r, sd in enumerate(seeds)], jobs)
    rows = [row for block in per for row in block]
    h2 = synthesize_h2(cfg.system, cfg.cost, cfg.true)
    h2_cost = evaluate_expected_cost(h2.map, cfg.true, cfg.cost)
    for r, sd in enumerate(seeds):
        rows.append([r, sd, "h2-true", None, None, "optimal", h2_cost, h2_cost, None, None])
    # best Sinkhorn over the feasible eps grid, per replication and radius
    for r in range(cfg.replications):
        for rho in sorted(cfg.rho):
            vals = [row for row in rows if row[0] == r and row[2] == "sinkhorn" and row[3] == rho and row[6] is not None]
            if vals:
                best = min(vals, key=lambda row: row[6])
                rows.append([r, best[1], "sinkhorn-best", rho, best[4], "optimal", best[6], best[7], best[8], best[9]])
    summary = summarize(rows)
    return rows, summary


SUMMARY_HEADER = ["controller", "rho", "eps", "count", "median", "q25", "q75"]


def summarize(rows: list[list]) -> list[list]:
    groups: dict = {}
    for row in rows:
        key = (row[2], row[3], row[4] if row[2] != "sinkhorn-best" else None)
        groups.setdefault(key, []).append(row[6])
    out = []
    for (name, rho, eps), vals in groups.items():
        v = np.array([x for x in vals if x is not None], dtype=float)
        if v.size:
            out.append([name, rho, eps, int(v.size), float(np.median(v)), float(np.quantile(v, 0.25)), float(np.quantile(v, 0.75))])
        else:
            out.append([name, rho, eps, 0, None, None, None])
    order = {"sinkhorn": 0, "sinkhorn-best": 1, "wasserstein": 2, NOMINAL_LABEL: 3, "h2-true": 4}
    out.sort(key=lambda r: (order.get(r[0], 9), -1 if r[1] is None else r[1], -1 if r[2] is None else r[2]))
    return out


def cmd_compare(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    rows, summary = run_compare(cfg, jobs)
    meta = manifest(cfg, "compare", {"replications": cfg.replications})
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare_runs.csv", COMPARE_HEADER, rows, meta)
    write_csv(out / "compare_summary.csv", SUMMARY_HEADER, summary, meta)
    print(format_table(summary, cfg))
    return EXIT_OK


def format_table(summary: list[list], cfg: ExperimentConfig) -> str:
    """Median realized cost in the layout of a controller-by-radius table."""
    med = {(r[0], r[1], r[2]): r[4] for r in summary}
    cols = [f"Sinkhorn eps={e:g}" for e in sorted(cfg.eps)] + ["best Sinkhorn", "Wasserstein", NOMINAL_LABEL, "H2-true"]
    lines = [" | ".join(["radius"] + cols)]
    for rho in sorted(cfg.rho):
        cells = [med.get(("sinkhorn", rho, e)) for e in sorted(cfg.eps)]
        cells += [med.get(("sinkhorn-best", rho, None)), med.get(("wasserstein", rho, 0.0))]
        cells += [med.get((NOMINAL_LABEL, None, None)), med.get(("h2-true", None, None))]
        lines.append(" | ".join([f"rho={rho:g}"] + ["infeasible" if c is None else f"{c:.4f}" for c in cells]))
    return "\n".join(lines)


FEAS_HEADER = ["eps", "rho_min", "oracle", "oracle_stderr", "oracle_method", "agree"]


def run_feasibility(cfg: ExperimentConfig, draws: int = 200_000) -> list[list]:
    samples = cfg.samples()
    rows = []
    for k, eps in enumerate(sorted(cfg.eps)):
        closed = feasibility_threshold(samples, cfg.reference, eps)
        if eps == 0:
            # without entropy the empirical distribution itself is always in the ball
            rows.append([eps, closed, 0.0, 0.0, "exact", "yes" if closed == 0.0 else "no"])
            continue
        est = feasibility_oracle(samples, cfg.reference, eps, draws=draws, seed=cfg.seed + k)
        agree = abs(est.value - closed) <= 1e-3 * max(abs(closed), 1e-12) + 3 * est.stderr
        rows.append([eps, closed, est.value, est.stderr, est.method, "yes" if agree else "no"])
    return rows


def cmd_feasibility(cfg: ExperimentConfig, out: Path | None) -> int:
    rows = run_feasibility(cfg)
    for r in rows:
        print(f"eps={r[0]:.6e}  rho_min={r[1]:.12e}  oracle={r[2]:.12e} (+/- {r[3]:.2e}, {r[4]})  agree={r[5]}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "feasibility.csv", FEAS_HEADER, rows, manifest(cfg, "feasibility"))
    return EXIT_OK


def cmd_gen_samples(cfg: ExperimentConfig, out: Path) -> int:
    samples = cfg.samples()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "samples.csv"
    write_csv(path, sample_header(cfg.system), [list(map(float, r)) for r in samples.trajectories], manifest(cfg, "gen-samples"))
    print(f"wrote {samples.n} trajectories of length {samples.s} to {path}")
    return EXIT_OK


def cmd_rollout(cfg: ExperimentConfig, out: Path, solution: str | None, count: int) -> int:
    if cfg.true is None:
        raise ConfigError("rollout needs a 'true' distribution section")
    if solution is not None:
        PhiX = np.array([[float(v) for v in r.values()] for r in read_csv_records(Path(solution) / "phi_x.csv")])
        PhiU = np.array([[float(v) for v in r.values()] for r in read_csv_records(Path(solution) / "phi_u.csv")])
        cl = ClosedLoopMap(PhiX, PhiU)
    else:
        cl = _solve_cell(cfg, cfg.samples(), cfg.rho[0], cfg.eps[0]).map
    mean, se = monte_carlo_cost(cfg.system, cl, cfg.cost, gaussian_sampler(cfg.true.mean, cfg.true.cov), count, seed=cfg.seed)
    analytic = evaluate_expected_cost(cl, cfg.true, cfg.cost)
    z = (mean - analytic) / se if se > 0 else 0.0
    res = {"rollouts": count, "mean": mean, "stderr": se, "analytic": analytic, "z": z, "manifest": manifest(cfg, "rollout")}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "rollout.json", res)
    print(f"monte carlo {mean:.12e} +/- {se:.3e}  analytic {analytic:.12e}  z = {z:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sinkhorn-drc", description="Sinkhorn distributionally robust SLS synthesis")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synthesize", "sweep", "compare", "feasibility", "gen-samples", "rollout"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (default: config 'out' or ./out)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--strategy", choices=("outer", "direct"))
        sp.add_argument("--backend")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--rho", type=float, help="override the radius grid with one value")
        sp.add_argument("--eps", type=float, help="override the eps grid with one value (0 selects Wasserstein)")
        if name == "rollout":
            sp.add_argument("--solution", help="directory written by 'synthesize'")
            sp.add_argument("--count", type=int, default=100_000)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.strategy:
            cfg.strategy = args.strategy
        if args.backend:
            cfg.backend = args.backend
        if args.rho is not None:
            cfg.rho = [args.rho]
        if args.eps is not None:
            cfg.eps = [args.eps]
        out = Path(args.out or cfg.out)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.jobs)
        if args.command == "compare":
            return cmd_compare(cfg, out, args.jobs)
        if args.command == "feasibility":
            return cmd_feasibility(cfg, out)
        if args.command == "gen-samples":
            return cmd_gen_samples(cfg, out)
        return cmd_rollout(cfg, out, args.solution, args.count)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverError, UnboundedError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
