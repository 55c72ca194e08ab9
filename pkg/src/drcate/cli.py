"""Command-line front end: fit effect surfaces on CSVs, run weighted-bootstrap
inference at evaluation points, and replicate the simulation tables.

Three subcommands share one flat configuration model:

- ``fit``    reads a dataset CSV, runs the full pipeline, and writes the
  serialized fit plus a human-readable summary (selected dimensions,
  identity-top index coefficients, bandwidths, CV traces).
- ``infer``  refits on the input data, then writes per-point estimates with
  bootstrap standard errors and both confidence intervals, an optional
  replicate dump, and a plot-ready effect curve over the fitted index with
  confidence bands.
- ``simulate`` runs the replication study for a named data-generating model
  and writes the dimension-selection, estimate-quality, and coverage tables.

Configuration precedence: command-line flags override config-file entries,
which override defaults; the effective configuration is echoed into every
output file as ``#``-prefixed comment lines. Every command is deterministic
given its effective configuration (outputs carry no timestamps).

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass

import numpy as np

from ._nwcore import index_values
from .bootstrap import BootstrapResult, bootstrap_tau
from .data_model import (
    FLOAT_FMT,
    DataError,
    Dataset,
    basis_matrix,
    read_dataset_csv,
)
from .pipeline import (
    DEFAULT_DELTA_TAU,
    CateFit,
    PipelineError,
    fit_cate,
    save_cate_fit,
    tau_at,
)
from .simulation import (
    MODELS,
    DEFAULT_TABLE_METHODS,
    SimDesign,
    replicate_seed,
    run_replications,
    table1_from_results,
    table2_from_results,
    table3_from_results,
)
from .subspace import SearchConfig, SearchFailureError

__all__ = [
    "EXIT_OK",
    "EXIT_USAGE",
    "EXIT_NUMERIC",
    "RunConfig",
    "UsageError",
    "build_config",
    "cmd_fit",
    "cmd_infer",
    "cmd_simulate",
    "main",
]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

#: Method tags accepted on the command line; "full-x" maps to the library's
#: "full_x".
CLI_METHODS = ("regression", "matching", "ipw", "aipw", "full-x")

#: Seed stream ids for the per-point and per-curve-point bootstrap draws
#: (disjoint from the simulation harness's method/stage streams).
_POINT_BOOT_STREAM = 20
_CURVE_BOOT_STREAM = 21

#: Number of grid points in the plot-ready effect curve.
CURVE_GRID_SIZE = 41


class UsageError(ValueError):
    """Invalid flag/config-file/input combination (exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    """Effective settings of one CLI invocation.

    Field names mirror the command-line flags (``--dmax`` -> ``d_max``,
    ``--bootstrap`` -> ``n_bootstrap``, ``--reps`` -> ``n_replications``).
    ``d_max=None`` means the command's default search depth.
    """

    command: str
    input: str | None = None
    output: str | None = None
    method: str = "regression"
    seed: int = 0
    d_max: int | None = None
    delta_tau: float = DEFAULT_DELTA_TAU
    alpha: float = 0.05
    n_bootstrap: int = 200
    n_replications: int = 200
    workers: int = 1
    model: str | None = None
    n: int = 250
    points: str | None = None
    replicates_out: str | None = None

    def __post_init__(self):
        if self.command not in ("fit", "infer", "simulate"):
            raise UsageError(f"unknown command {self.command!r}")
        if self.method not in CLI_METHODS:
            raise UsageError(
                f"method must be one of {', '.join(CLI_METHODS)}, got {self.method!r}")
        if not (0.0 < self.alpha < 1.0):
            raise UsageError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.d_max is not None and self.d_max < 1:
            raise UsageError(f"dmax must be >= 1, got {self.d_max}")
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")
        if self.n_bootstrap < 0:
            raise UsageError(f"bootstrap count must be >= 0, got {self.n_bootstrap}")
        if self.n_replications < 1:
            raise UsageError(f"reps must be >= 1, got {self.n_replications}")
        if self.model is not None and self.model not in MODELS:
            raise UsageError(
                f"model must be one of {', '.join(MODELS)}, got {self.model!r}")

    def library_method(self) -> str:
        return "full_x" if self.method == "full-x" else self.method

    def config_lines(self) -> list[str]:
        """Sorted ``key=value`` lines describing the effective configuration."""
        items = dataclasses.asdict(self)
        return [f"{key}={items[key]!r}" for key in sorted(items)]


_CONVERTERS = {
    "input": str,
    "output": str,
    "method": str,
    "seed": int,
    "d_max": int,
    "delta_tau": float,
    "alpha": float,
    "n_bootstrap": int,
    "n_replications": int,
    "workers": int,
    "model": str,
    "n": int,
    "points": str,
    "replicates_out": str,
}

#: config-file key -> RunConfig field (keys mirror the flag spellings).
_FILE_KEYS = {
    "input": "input",
    "output": "output",
    "method": "method",
    "seed": "seed",
    "dmax": "d_max",
    "delta_tau": "delta_tau",
    "alpha": "alpha",
    "bootstrap": "n_bootstrap",
    "reps": "n_replications",
    "workers": "workers",
    "model": "model",
    "n": "n",
    "points": "points",
    "replicates_out": "replicates_out",
}


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file mirroring the flags."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(
                    f"{path}: line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in _FILE_KEYS:
                raise UsageError(f"{path}: line {lineno}: unknown key {key!r}")
            field = _FILE_KEYS[key]
            try:
                values[field] = _CONVERTERS[field](value)
            except ValueError:
                raise UsageError(
                    f"{path}: line {lineno}: invalid value {value!r} for {key!r}"
                ) from None
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config-file entries, and flags (that order wins last)."""
    values: dict = {"command": args.command}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for field in _CONVERTERS:
        flag_value = getattr(args, field, None)
        if flag_value is not None:
            values[field] = flag_value
    return RunConfig(**values)


def _search_config(cfg: RunConfig, default_d_max: int) -> SearchConfig:
    d_max = cfg.d_max if cfg.d_max is not None else default_d_max
    return SearchConfig(d_max=d_max, workers=cfg.workers)


def _require_input(cfg: RunConfig) -> str:
    if not cfg.input:
        raise UsageError(f"{cfg.command} requires --input")
    if not os.path.isfile(cfg.input):
        raise UsageError(f"input file not found: {cfg.input}")
    if not os.access(cfg.input, os.R_OK):
        raise UsageError(f"input file not readable: {cfg.input}")
    return cfg.input


def _require_output_dir(cfg: RunConfig) -> str:
    if not cfg.output:
        raise UsageError(f"{cfg.command} requires --output")
    try:
        os.makedirs(cfg.output, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {cfg.output}: {exc}") from None
    if not os.access(cfg.output, os.W_OK):
        raise UsageError(f"output directory not writable: {cfg.output}")
    return cfg.output


def _fmt(value) -> str:
    """Full-precision cell rendering: 17 significant digits for floats."""
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, FLOAT_FMT)
    return str(value)


def _write_csv(path, cfg: RunConfig, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in cfg.config_lines():
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


def parse_points(cfg: RunConfig, p: int) -> np.ndarray:
    """Evaluation points from ``--points``: inline or a CSV path.

    Inline form: points separated by ``;``, coordinates by ``,``. A path to
    an existing file is read as CSV (``#`` comments and blank lines skipped).
    """
    if cfg.points is None:
        raise UsageError("infer requires --points (inline or a CSV path)")
    rows: list[list[str]] = []
    if os.path.isfile(cfg.points):
        with open(cfg.points, newline="", encoding="utf-8") as fh:
            for raw in csv.reader(fh):
                if not raw or raw[0].lstrip().startswith("#"):
                    continue
                rows.append(raw)
    else:
        rows = [chunk.split(",") for chunk in cfg.points.split(";") if chunk.strip()]
    if not rows:
        raise UsageError("no evaluation points")
    points = []
    for k, row in enumerate(rows):
        try:
            points.append([float(cell) for cell in row])
        except ValueError:
            raise UsageError(f"evaluation point {k}: non-numeric coordinate in {row!r}") from None
        if len(points[-1]) != p:
            raise UsageError(
                f"evaluation point {k} has {len(points[-1])} coordinates, data have p={p}")
    return np.asarray(points, dtype=np.float64)


# ---------------------------------------------------------------------------
# fit


def _summary_text(cfg: RunConfig, data: Dataset, fit: CateFit) -> str:
    names = data.column_names()
    lines: list[str] = []
    lines.append("effect-surface fit summary")
    lines.append("==========================")
    lines.append("")
    lines.append("effective configuration:")
    for line in cfg.config_lines():
        lines.append(f"  {line}")
    lines.append("")
    n1 = int(np.sum(data.a == 1))
    lines.append(f"data: n={data.n} subjects ({n1} treated, {data.n - n1} control), "
                 f"p={data.p} covariates")
    lines.append(f"method: {fit.method}")
    lines.append("")

    lines.append("selected index subspaces:")
    for label, sub in (("control-arm outcome", fit.fit0),
                       ("treated-arm outcome", fit.fit1)):
        if sub is not None:
            lines.append(f"  {label}: d={sub.d}, kernel order {sub.kernel_order}, "
                         f"bandwidth {_fmt(sub.bandwidth)}")
    if fit.propensity_fit is not None:
        pf = fit.propensity_fit
        d_p = pf.directions.shape[1]
        lines.append(f"  propensity: d={d_p}, kernel order {pf.kernel_order}, "
                     f"bandwidth {_fmt(pf.bandwidth)}, "
                     f"clipped to [{_fmt(pf.clip_bound)}, {_fmt(1.0 - pf.clip_bound)}]")
    tau = fit.fit_tau
    lines.append(f"  effect surface: d={tau.d}, kernel order {fit.q_tau}")
    lines.append(f"    cv-optimal bandwidth: {_fmt(fit.h_tau_opt)}")
    lines.append(f"    evaluation bandwidth: {_fmt(fit.h_tau)} "
                 f"(= cv-optimal * n^-{_fmt(fit.delta_tau)})")
    lines.append("")

    lines.append("effect-surface index coefficients "
                 "(per column, scaled so the pinned coefficient is 1):")
    mat = tau.basis.matrix()
    width = max(len(name) for name in names)
    for j in range(tau.d):
        lines.append(f"  index {j + 1}:")
        for r in range(data.p):
            mark = "  (pinned)" if r == tau.basis.perm[j] else ""
            lines.append(f"    {names[r]:<{width}}  {_fmt(float(mat[r, j]))}{mark}")
    lines.append("")

    lines.append("dimension search trace (leave-one-out cv by candidate dimension):")
    trace_fits = [("effect surface", tau), ("control-arm outcome", fit.fit0),
                  ("treated-arm outcome", fit.fit1),
                  ("propensity", fit.propensity_fit.search
                   if fit.propensity_fit is not None else None)]
    for label, sub in trace_fits:
        if sub is None:
            continue
        cells = [f"d={d} cv={_fmt(sub.cv_by_dimension[d])}"
                 for d in sorted(sub.cv_by_dimension)]
        lines.append(f"  {label}: " + " | ".join(cells) + f"  -> selected d={sub.d}")
    lines.append("")

    lines.append("final-stage bandwidth profile (bandwidth -> leave-one-out cv):")
    grid = fit.diagnostics.get("tau_cv_bandwidths", [])
    values = fit.diagnostics.get("tau_cv_values", [])
    for h, v in zip(grid, values):
        chosen = "  (selected)" if h == fit.h_tau_opt else ""
        lines.append(f"  {_fmt(float(h))} -> {_fmt(float(v))}{chosen}")
    lines.append("")
    return "\n".join(lines)


def cmd_fit(cfg: RunConfig) -> int:
    """Fit the pipeline on a dataset CSV; write fit.json and summary.txt."""
    input_path = _require_input(cfg)
    out_dir = _require_output_dir(cfg)
    data = read_dataset_csv(input_path)
    search = _search_config(cfg, default_d_max=SearchConfig().d_max)
    fit = fit_cate(data, search, method=cfg.library_method(),
                   delta_tau=cfg.delta_tau, seed=cfg.seed)
    fit = dataclasses.replace(
        fit, config={**fit.config,
                     "cli": dict(sorted(dataclasses.asdict(cfg).items()))})
    fit_path = os.path.join(out_dir, "fit.json")
    summary_path = os.path.join(out_dir, "summary.txt")
    save_cate_fit(fit, fit_path)
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(_summary_text(cfg, data, fit))
    print(f"wrote {fit_path}")
    print(f"wrote {summary_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _stat_cells(res: BootstrapResult) -> list:
    return [res.point, res.se,
            res.normal_ci[0], res.normal_ci[1],
            res.quantile_ci[0], res.quantile_ci[1],
            res.n_replicates, res.n_excluded]


def _curve_rows(fit: CateFit, data: Dataset, cfg: RunConfig) -> tuple[list[str], list[list]]:
    """Effect estimates over a grid of index values with confidence bands.

    The grid spans the observed range of the first fitted index coordinate;
    any remaining index coordinates are held at their sample medians. Each
    grid point is mapped to the minimum-norm covariate point attaining those
    index values. Grid points whose bootstrap degenerates keep their point
    estimate with empty band cells.
    """
    dirs = np.asarray(basis_matrix(fit.fit_tau.directions, data.p))
    u_all = index_values(np.ascontiguousarray(data.x), dirs)
    d = dirs.shape[1]
    grid = np.linspace(float(u_all[:, 0].min()), float(u_all[:, 0].max()),
                       CURVE_GRID_SIZE)
    fixed = [float(np.median(u_all[:, k])) for k in range(1, d)]
    gram = dirs.T @ dirs
    header = ([f"index_value_{k + 1}" for k in range(d)]
              + ["tau_hat", "se", "normal_lo", "normal_hi",
                 "quantile_lo", "quantile_hi", "n_replicates", "n_excluded"])
    rows: list[list] = []
    for g, u1 in enumerate(grid):
        u_target = np.array([float(u1), *fixed])
        x_g = dirs @ np.linalg.solve(gram, u_target)
        try:
            res = bootstrap_tau(fit, data, x_g, n_replicates=cfg.n_bootstrap,
                                scheme="multinomial", alpha=cfg.alpha,
                                seed=replicate_seed(cfg.seed, g, _CURVE_BOOT_STREAM))
            rows.append([*u_target, *_stat_cells(res)])
        except RuntimeError:
            value = tau_at(fit, data, x_g)
            rows.append([*u_target, value, None, None, None, None, None, None, None])
    return header, rows


def cmd_infer(cfg: RunConfig) -> int:
    """Refit on the input data, bootstrap at each evaluation point, write CSVs."""
    input_path = _require_input(cfg)
    out_dir = _require_output_dir(cfg)
    if cfg.method != "regression":
        raise UsageError(
            "infer requires --method regression (bootstrap standard errors "
            "need the arm-regression fit)")
    if cfg.n_bootstrap < 2:
        raise UsageError(f"infer needs --bootstrap >= 2, got {cfg.n_bootstrap}")
    data = read_dataset_csv(input_path)
    points = parse_points(cfg, data.p)
    search = _search_config(cfg, default_d_max=SearchConfig().d_max)
    fit = fit_cate(data, search, method="regression",
                   delta_tau=cfg.delta_tau, seed=cfg.seed)

    results: list[BootstrapResult] = []
    for k, point in enumerate(points):
        results.append(bootstrap_tau(
            fit, data, point, n_replicates=cfg.n_bootstrap,
            scheme="multinomial", alpha=cfg.alpha,
            seed=replicate_seed(cfg.seed, k, _POINT_BOOT_STREAM)))

    names = data.column_names()
    points_path = os.path.join(out_dir, "points.csv")
    _write_csv(points_path, cfg,
               ["point_index", *names, "tau_hat", "se", "normal_lo", "normal_hi",
                "quantile_lo", "quantile_hi", "n_replicates", "n_excluded"],
               [[k, *[float(v) for v in point], *_stat_cells(res)]
                for k, (point, res) in enumerate(zip(points, results))])
    print(f"wrote {points_path}")

    if cfg.replicates_out:
        rows = [[k, j, float(value)]
                for k, res in enumerate(results)
                for j, value in enumerate(res.replicates)]
        _write_csv(cfg.replicates_out, cfg,
                   ["point_index", "replicate_index", "tau_replicate"], rows)
        print(f"wrote {cfg.replicates_out}")

    curve_path = os.path.join(out_dir, "curve.csv")
    header, rows = _curve_rows(fit, data, cfg)
    _write_csv(curve_path, cfg, header, rows)
    print(f"wrote {curve_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: RunConfig) -> int:
    """Run the replication study for one model/size cell; write the tables."""
    out_dir = _require_output_dir(cfg)
    if cfg.model is None:
        raise UsageError("simulate requires --model")
    if cfg.n_bootstrap == 1:
        raise UsageError("simulate needs --bootstrap 0 (no coverage table) or >= 2")
    design = SimDesign(model=cfg.model, n=cfg.n,
                       n_replications=cfg.n_replications,
                       n_bootstrap=cfg.n_bootstrap, base_seed=cfg.seed)
    # parallelism lives at the replicate level here, so each replicate's
    # searches stay single-threaded
    search = SearchConfig(d_max=cfg.d_max if cfg.d_max is not None else 4)
    methods = DEFAULT_TABLE_METHODS
    results = run_replications(design, methods, search,
                               delta_tau=cfg.delta_tau,
                               bootstrap_scheme="multinomial",
                               clip_bound=0.01, workers=cfg.workers)

    tables = [("selection", table1_from_results(design, methods, results)),
              ("estimates", table2_from_results(design, methods, results))]
    if cfg.n_bootstrap >= 2:
        tables.append(("coverage",
                       table3_from_results(design, results, alphas=(cfg.alpha,))))
    for stem, table in tables:
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        text_path = os.path.join(out_dir, f"{stem}.txt")
        with open(csv_path, "w", encoding="utf-8") as fh:
            for line in cfg.config_lines():
                fh.write(f"# {line}\n")
            fh.write(table.to_csv())
        with open(text_path, "w", encoding="utf-8") as fh:
            for line in cfg.config_lines():
                fh.write(f"# {line}\n")
            fh.write(table.to_text())
            fh.write("\n")
        print(f"wrote {csv_path}")
        print(f"wrote {text_path}")
        print(table.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drcate",
        description=("Dimension-reduced estimation and weighted-bootstrap "
                     "inference of conditional treatment effects."),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "fit": "fit the effect surface on a dataset CSV",
        "infer": "estimate effects with bootstrap uncertainty at given points",
        "simulate": "replicate the simulation tables for a named model",
    }
    for command, help_text in specs.items():
        p = sub.add_parser(command, help=help_text)
        p.add_argument("--config", help="flat key=value config file; flags override it")
        p.add_argument("--input", help="dataset CSV (columns A, Y, covariates)")
        p.add_argument("--output", help="output directory (created if missing)")
        p.add_argument("--method", choices=CLI_METHODS,
                       help="imputation method (default regression)")
        p.add_argument("--seed", type=int, help="base seed (default 0)")
        p.add_argument("--dmax", type=int, dest="d_max",
                       help="largest candidate index dimension")
        p.add_argument("--delta-tau", type=float, dest="delta_tau",
                       help="under-smoothing exponent in (0, 0.2]")
        p.add_argument("--alpha", type=float,
                       help="interval miscoverage level in (0, 1)")
        p.add_argument("--bootstrap", type=int, dest="n_bootstrap", metavar="N",
                       help="bootstrap replicates per point")
        p.add_argument("--reps", type=int, dest="n_replications", metavar="R",
                       help="simulation replications")
        p.add_argument("--workers", type=int, help="worker threads")
        p.add_argument("--model", choices=list(MODELS),
                       help="simulation data-generating model")
        p.add_argument("--n", type=int, help="simulated sample size")
        p.add_argument("--points", help="evaluation points: 'x1,..,xp;x1,..' or CSV path")
        p.add_argument("--replicates-out", dest="replicates_out", metavar="PATH",
                       help="also dump per-point bootstrap replicates to PATH")
    return parser


_COMMANDS = {"fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return _COMMANDS[cfg.command](cfg)
    except (UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchFailureError as exc:
        print(f"error: subspace search failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
