#!/usr/bin/env python3
"""Run the full replication study and write the three summary tables.

Each study cell (model x sample size) runs independently with a per-replicate
JSON cache, so an interrupted run resumes where it stopped. Cells that feed
the bootstrap-coverage table carry 200 weighted-bootstrap replicates; the
others skip the bootstrap stage.

Examples:
    python3 scripts/run_simulations.py                      # all four cells
    python3 scripts/run_simulations.py --cells M1:250       # one cell
    python3 scripts/run_simulations.py --reps 8             # pilot pass
"""

import argparse
import sys
import time
from pathlib import Path

from drcate.simulation import (
    DEFAULT_TABLE_METHODS,
    SimDesign,
    run_replications,
    table1_from_results,
    table2_from_results,
    table3_from_results,
    write_replicate_log,
)
from drcate.subspace import SearchConfig

# (model, n, bootstrap replicates): coverage is studied at the smaller
# sample of the one-index design and the larger sample of the two-index
# design; the other two cells only feed the selection and accuracy tables.
DEFAULT_CELLS = (("M1", 250, 200), ("M1", 500, 0),
                 ("M2", 250, 0), ("M2", 500, 200))


def study_config(d_max: int) -> SearchConfig:
    """Search budget tuned for the replication study on one core.

    A coarse low-budget simplex pass over the bandwidth window narrows to a
    refined pass in a shrunken window; two random starts per dimension.
    """
    return SearchConfig(
        d_max=d_max,
        bandwidth_grid_size=6,
        multistart=2,
        simplex_rel_tol=1e-4,
        simplex_maxiter_per_dim=120,
        simplex_max_nfev=700,
        coarse_rel_tol=3e-3,
        coarse_maxiter_per_dim=25,
        coarse_max_nfev=300,
        refine_rel_window=0.25,
    )


def parse_cells(specs, reps):
    if not specs:
        return [(m, n, b) for m, n, b in DEFAULT_CELLS]
    chosen = []
    for spec in specs:
        model, _, size = spec.partition(":")
        matches = [c for c in DEFAULT_CELLS
                   if c[0] == model and (not size or c[1] == int(size))]
        if not matches:
            raise SystemExit(f"unknown cell {spec!r}; use e.g. M1:250")
        chosen.extend(matches)
    return chosen


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=200,
                        help="replicates per cell (default 200)")
    parser.add_argument("--cells", nargs="*", default=None,
                        help="cells to run, e.g. M1:250 M2:500 (default all)")
    parser.add_argument("--results", default="results",
                        help="output root (default ./results)")
    parser.add_argument("--seed", type=int, default=0,
                        help="base seed shared by every cell (default 0)")
    parser.add_argument("--dmax", type=int, default=3,
                        help="dimension ceiling for every search (default 3)")
    parser.add_argument("--workers", type=int, default=1,
                        help="replicate worker threads (default 1)")
    args = parser.parse_args(argv)

    root = Path(args.results)
    tables_dir = root / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    cfg = study_config(args.dmax)
    cells = parse_cells(args.cells, args.reps)

    grand_start = time.time()
    for model, n, n_boot in cells:
        design = SimDesign(model=model, n=n, n_replications=args.reps,
                           n_bootstrap=n_boot, base_seed=args.seed)
        cell = f"{model}_n{n}"
        cache_dir = root / "cache" / cell
        print(f"=== {cell}: reps={args.reps} bootstrap={n_boot} "
              f"d_max={args.dmax} seed={args.seed}", flush=True)
        cell_start = time.time()
        done = {"count": 0}

        def progress(result, cached, _n=args.reps, _start=cell_start,
                     _done=done, _cell=cell):
            _done["count"] += 1
            failed = sum(1 for rec in result.methods.values() if not rec.ok)
            mark = "cache" if cached else f"{result.elapsed:6.1f}s"
            mean = (time.time() - _start) / _done["count"]
            eta = (_n - _done["count"]) * mean
            print(f"[{_cell}] rep {result.rep_index:3d} {mark} "
                  f"failed={failed} done={_done['count']}/{_n} "
                  f"eta={eta / 60.0:6.1f}min", flush=True)

        results = run_replications(
            design, DEFAULT_TABLE_METHODS, cfg, cache_dir=cache_dir,
            workers=args.workers, progress=progress)

        table1 = table1_from_results(design, DEFAULT_TABLE_METHODS, results)
        table2 = table2_from_results(design, DEFAULT_TABLE_METHODS, results)
        table1.write_csv(tables_dir / f"{cell}_selection.csv")
        table1.write_text(tables_dir / f"{cell}_selection.txt")
        table2.write_csv(tables_dir / f"{cell}_estimates.csv")
        table2.write_text(tables_dir / f"{cell}_estimates.txt")
        if n_boot >= 2:
            table3 = table3_from_results(design, results, alphas=(0.1, 0.05))
            table3.write_csv(tables_dir / f"{cell}_coverage.csv")
            table3.write_text(tables_dir / f"{cell}_coverage.txt")
        write_replicate_log(results, tables_dir / f"{cell}_replicates.csv")

        minutes = (time.time() - cell_start) / 60.0
        print(f"=== {cell} finished in {minutes:.1f} min "
              f"(failure rate {table1.failure_rate():.4f})", flush=True)
        print(table1.to_text(), flush=True)
        print(table2.to_text(), flush=True)
        if n_boot >= 2:
            print(table3.to_text(), flush=True)

    print(f"total {(time.time() - grand_start) / 3600.0:.2f} h", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
