"""Joint search over index dimension, basis, and bandwidth.

The estimator of each regression function needs (i) a structural dimension d,
(ii) a p-by-d direction matrix whose index values carry the regression, and
(iii) a smoothing bandwidth. This module minimises the leave-one-out
cross-validation criterion jointly over all three: for each candidate d a
multistart derivative-free simplex search runs over the free block of an
identity-top parametrisation of the directions, and every candidate matrix is
scored by the best CV value over a log-spaced bandwidth grid confined to a
sample-size-driven window. The dimension with the smallest optimised CV wins,
with ties broken toward the smaller (more parsimonious) dimension.

Covariates are standardised internally so the simplex moves in comparable
units; the chosen directions are mapped back by the inverse column scales, so
the recorded bandwidth applies unchanged to index values computed from the
raw covariates. The recorded CV values are recomputed through the exact
public criterion functions at the end of the search, so they can be verified
independently by recomputation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._nwcore import index_values, loo_cv_grid, loo_cv_grid_fast
from .data_model import (
    Dataset,
    DegenerateBasisError,
    ImputedOutcomes,
    IndexBasis,
    basis_matrix,
    normalize_to_identity_top,
    standardize_columns,
)
from .kernels import build_kernel, select_kernel_order
from .nelder_mead import minimize_simplex
from .regression import DEFAULT_EPS_DEN, RegressionConfig

__all__ = [
    "SearchConfig",
    "SearchFailureError",
    "SubspaceFit",
    "bandwidth_exponent",
    "bandwidth_window",
    "bandwidth_grid",
    "cv_outcome",
    "cv_tau",
    "fit_subspace",
]

OBJECTIVES = ("outcome", "tau", "propensity")

_SIMPLEX_STEP = 0.25
_PARALLEL_TOL = 0.999


class SearchFailureError(RuntimeError):
    """No candidate dimension produced a finite CV optimum."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SearchConfig:
    """Tuning knobs for the dimension/basis/bandwidth search.

    Attributes:
        d_max: Largest candidate index dimension (capped at p when the data
            have fewer covariates).
        bandwidth_grid_size: Number of log-spaced bandwidths scored per
            candidate basis.
        multistart: Number of simplex starting points per dimension.
        simplex_rel_tol: Relative stopping tolerance on the CV value.
        simplex_maxiter_per_dim: Iteration cap per free parameter.
        h_lo_mult / h_hi_mult: Window multipliers around the plug-in scale.
        eps_den: Degenerate-denominator threshold passed to the CV kernels.
        dim_tie_rel_tol: Relative CV slack within which a smaller dimension
            is preferred over the literal minimiser.
        workers: Thread count for independent (dimension, start) tasks;
            results are reduced in fixed task order, so the outcome does not
            depend on scheduling.
        coarse_rel_tol: When set, enables a two-phase schedule: every start
            first runs at this looser tolerance (and
            ``coarse_maxiter_per_dim``), then only dimensions whose coarse
            optimum lies within ``refine_rel_window`` (relative) of the best
            coarse value are re-polished at the full tolerance from their
            coarse optimum. Cuts most of the simplex evaluations on clearly
            losing dimensions without changing which optima are reachable.
        coarse_maxiter_per_dim: Iteration cap per free parameter in the
            coarse phase.
        refine_rel_window: Relative CV slack defining which dimensions get
            the polish phase.
    """

    d_max: int = 3
    bandwidth_grid_size: int = 15
    multistart: int = 5
    simplex_rel_tol: float = 1e-6
    simplex_maxiter_per_dim: int = 500
    h_lo_mult: float = 0.25
    h_hi_mult: float = 4.0
    eps_den: float = DEFAULT_EPS_DEN
    dim_tie_rel_tol: float = 1e-3
    workers: int = 1
    coarse_rel_tol: float | None = None
    coarse_maxiter_per_dim: int = 40
    refine_rel_window: float = 0.25
    coarse_max_nfev: int | None = None
    simplex_max_nfev: int | None = None

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {self.d_max}")
        if self.bandwidth_grid_size < 2:
            raise ValueError(f"bandwidth grid needs >= 2 points, got {self.bandwidth_grid_size}")
        if self.multistart < 1:
            raise ValueError(f"multistart must be >= 1, got {self.multistart}")
        if not (self.simplex_rel_tol > 0.0):
            raise ValueError("simplex_rel_tol must be positive")
        if self.simplex_maxiter_per_dim < 1:
            raise ValueError("simplex_maxiter_per_dim must be >= 1")
        if not (0.0 < self.h_lo_mult < self.h_hi_mult):
            raise ValueError(
                f"need 0 < h_lo_mult < h_hi_mult, got {self.h_lo_mult}, {self.h_hi_mult}"
            )
        if not (self.eps_den > 0.0):
            raise ValueError("eps_den must be positive")
        if self.dim_tie_rel_tol < 0.0:
            raise ValueError("dim_tie_rel_tol must be >= 0")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.coarse_rel_tol is not None and not (self.coarse_rel_tol > 0.0):
            raise ValueError("coarse_rel_tol must be positive when set")
        if self.coarse_maxiter_per_dim < 1:
            raise ValueError("coarse_maxiter_per_dim must be >= 1")
        if self.refine_rel_window < 0.0:
            raise ValueError("refine_rel_window must be >= 0")
        for name in ("coarse_max_nfev", "simplex_max_nfev"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1 when set")


@dataclass(frozen=True)
class SubspaceFit:
    """Result of one dimension/basis/bandwidth search.

    ``directions`` is the p-by-d matrix actually used for evaluation (raw
    covariate coordinates; columns scale-matched to the recorded bandwidth),
    while ``basis`` is its identity-top renormalisation for reporting and
    span comparisons. ``cv_value`` equals the exact public criterion at
    (``directions``, ``bandwidth``) bit for bit, and
    ``cv_by_dimension[d]`` records the same exact recomputation at each
    dimension's optimum.
    """

    objective: str
    group: int | None
    d: int
    basis: IndexBasis
    directions: np.ndarray
    bandwidth: float
    cv_value: float
    cv_by_dimension: dict[int, float]
    kernel_order_by_dimension: dict[int, int]
    kernel_order: int
    window: tuple[float, float]
    index_scale: float
    n_fit: int
    diagnostics: dict = field(default_factory=dict)

    def regression_config(self, eps_den: float = DEFAULT_EPS_DEN) -> RegressionConfig:
        """Kernel/bandwidth configuration matching this fit."""
        return RegressionConfig(
            kernel=build_kernel(self.kernel_order),
            bandwidth=self.bandwidth,
            eps_den=eps_den,
        )

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "group": self.group,
            "d": self.d,
            "basis": self.basis.to_dict(),
            "directions": np.asarray(self.directions).tolist(),
            "bandwidth": self.bandwidth,
            "cv_value": self.cv_value,
            "cv_by_dimension": {str(k): v for k, v in self.cv_by_dimension.items()},
            "kernel_order_by_dimension": {
                str(k): v for k, v in self.kernel_order_by_dimension.items()
            },
            "kernel_order": self.kernel_order,
            "window": list(self.window),
            "index_scale": self.index_scale,
            "n_fit": self.n_fit,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SubspaceFit":
        return cls(
            objective=payload["objective"],
            group=payload["group"],
            d=int(payload["d"]),
            basis=IndexBasis.from_dict(payload["basis"]),
            directions=np.asarray(payload["directions"], dtype=np.float64),
            bandwidth=float(payload["bandwidth"]),
            cv_value=float(payload["cv_value"]),
            cv_by_dimension={int(k): float(v) for k, v in payload["cv_by_dimension"].items()},
            kernel_order_by_dimension={
                int(k): int(v) for k, v in payload["kernel_order_by_dimension"].items()
            },
            kernel_order=int(payload["kernel_order"]),
            window=tuple(payload["window"]),
            index_scale=float(payload["index_scale"]),
            n_fit=int(payload["n_fit"]),
            diagnostics=dict(payload.get("diagnostics", {})),
        )


# ======================================================================
# cross-validation criteria (exact public versions)
# ======================================================================

def cv_outcome(data: Dataset, a: int, basis, cfg: RegressionConfig) -> float:
    """Sum of squared leave-one-out residuals of Y within group ``a``.

    Each group member's response is predicted by the group regression with
    that member removed (degenerate neighbourhoods fall back to the
    leave-one-out group mean); the criterion is the plain residual sum, not
    normalised by the group size.
    """
    if a not in (0, 1):
        raise ValueError(f"group must be 0 or 1, got {a}")
    idx = data.group_index(a)
    if len(idx) < 2:
        raise ValueError(f"group {a} needs >= 2 members for leave-one-out CV, got {len(idx)}")
    mat = basis_matrix(basis, data.p)
    u = index_values(np.ascontiguousarray(data.x[idx]), mat)
    resp = np.ascontiguousarray(data.y[idx])
    sums, _ = loo_cv_grid(u, resp, np.array([cfg.bandwidth]), _coeffs(cfg), cfg.eps_den)
    return float(sums[0])


def cv_tau(dhat, x, basis, cfg: RegressionConfig) -> float:
    """Mean squared leave-one-out residual of imputed contrasts over all rows.

    ``dhat`` may be an `ImputedOutcomes` or a plain vector; ``x`` may be a
    `Dataset` or the covariate matrix itself. Unlike the group criterion this
    one is normalised by the sample size.
    """
    if isinstance(x, Dataset):
        x = x.x
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.ndim != 2:
        raise ValueError("covariates must be a 2-d array")
    resp = dhat.values if isinstance(dhat, ImputedOutcomes) else dhat
    resp = np.ascontiguousarray(np.asarray(resp, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need >= 2 rows for leave-one-out CV, got {n}")
    if resp.shape != (n,):
        raise ValueError(f"contrast vector has shape {resp.shape}, expected ({n},)")
    mat = basis_matrix(basis, x.shape[1])
    u = index_values(x, mat)
    sums, _ = loo_cv_grid(u, resp, np.array([cfg.bandwidth]), _coeffs(cfg), cfg.eps_den)
    return float(sums[0]) / n


def _coeffs(cfg: RegressionConfig) -> np.ndarray:
    return cfg.kernel.coeffs_array()


# ======================================================================
# bandwidth window
# ======================================================================

def bandwidth_exponent(d: int, q: int) -> float:
    """Midpoint of the admissible bandwidth-rate interval (1/(4q), 1/max(2d+2, d+4)).

    Any rate in the open interval keeps the smoother within its valid
    undersmoothing/oversmoothing range for a kernel of order ``q`` in ``d``
    index dimensions; the midpoint is the symmetric choice.
    """
    if d < 1 or q < 2:
        raise ValueError(f"invalid (d, q) = ({d}, {q})")
    lo = 1.0 / (4.0 * q)
    hi = 1.0 / max(2 * d + 2, d + 4)
    if not lo < hi:
        raise ValueError(
            f"empty admissible bandwidth-exponent interval for d={d}, q={q}; "
            f"the kernel order is too low for this dimension"
        )
    return 0.5 * (lo + hi)


def bandwidth_window(n: int, d: int, q: int, scale: float,
                     cfg: SearchConfig) -> tuple[float, float]:
    """Search window [lo_mult * scale * n^(-delta), hi_mult * scale * n^(-delta)].

    ``scale`` should be the mean per-coordinate standard deviation of the
    index values at the current candidate directions, so the window tracks
    the spread of the running variable.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if not (scale > 0.0 and np.isfinite(scale)):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    delta = bandwidth_exponent(d, q)
    base = scale * float(n) ** (-delta)
    return cfg.h_lo_mult * base, cfg.h_hi_mult * base


def bandwidth_grid(n: int, d: int, q: int, scale: float, cfg: SearchConfig) -> np.ndarray:
    """Log-spaced bandwidth grid spanning the search window."""
    lo, hi = bandwidth_window(n, d, q, scale, cfg)
    return np.geomspace(lo, hi, cfg.bandwidth_grid_size)


# ======================================================================
# multistart initial directions
# ======================================================================

def _ols_slope(z: np.ndarray, resp: np.ndarray) -> np.ndarray | None:
    """Unit-normalised least-squares slope of resp on z (with intercept)."""
    if z.shape[0] < z.shape[1] + 2:
        return None
    design = np.column_stack([np.ones(z.shape[0]), z])
    coef, *_ = np.linalg.lstsq(design, resp, rcond=None)
    slope = coef[1:]
    norm = float(np.linalg.norm(slope))
    if not (norm > 1e-12 and np.isfinite(norm)):
        return None
    return slope / norm


def _direction_pool(z_rows: np.ndarray, resp: np.ndarray,
                    arm_masks: list[np.ndarray]) -> list[np.ndarray]:
    """Deduplicated cheap starting directions: overall and per-arm OLS slopes."""
    pool: list[np.ndarray] = []

    def push(vec):
        if vec is None:
            return
        for prev in pool:
            if abs(float(prev @ vec)) > _PARALLEL_TOL:
                return
        pool.append(vec)

    push(_ols_slope(z_rows, resp))
    for mask in arm_masks:
        if int(mask.sum()) >= z_rows.shape[1] + 2:
            push(_ols_slope(z_rows[mask], resp[mask]))
    return pool


def _start_matrices(pool: list[np.ndarray], p: int, d: int, count: int,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """``count`` starting p-by-d matrices mixing pool directions and random draws."""
    starts: list[np.ndarray] = []
    variants: list[list[np.ndarray]] = []
    if pool:
        variants.append(pool[:d])
        if len(pool) > 1:
            variants.append(pool[::-1][:d])
    for k in range(count):
        lead = variants[k] if k < len(variants) else []
        cols = np.empty((p, d))
        for j, vec in enumerate(lead):
            cols[:, j] = vec
        n_lead = len(lead)
        if n_lead < d:
            cols[:, n_lead:] = rng.standard_normal((p, d - n_lead))
        # orthonormalise so the identity-top renormalisation is well posed
        basis_q, _ = np.linalg.qr(cols)
        starts.append(np.ascontiguousarray(basis_q[:, :d]))
    return starts


def _identity_top_params(mat: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    basis = normalize_to_identity_top(mat)
    return basis.perm, basis.lower.reshape(-1).copy()


def _assemble(p: int, d: int, perm: tuple[int, ...], vecl: np.ndarray) -> np.ndarray:
    mat = np.empty((p, d))
    eye = np.eye(d)
    lower = vecl.reshape(p - d, d)
    for r in range(d):
        mat[perm[r]] = eye[r]
    for s in range(p - d):
        mat[perm[d + s]] = lower[s]
    return np.ascontiguousarray(mat)


# ======================================================================
# main search
# ======================================================================

def _resolve_rows_and_responses(data: Dataset, objective: str, group: int | None,
                                responses):
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "outcome":
        if group not in (0, 1):
            raise ValueError("objective='outcome' requires group 0 or 1")
        rows = data.group_index(group)
        if len(rows) < 2:
            raise ValueError(f"group {group} needs >= 2 members, got {len(rows)}")
        full = data.y if responses is None else _response_vector(responses, data.n)
        return rows, np.ascontiguousarray(full[rows]), False
    if objective == "propensity":
        if responses is None:
            resp = data.a.astype(np.float64)
        else:
            resp = _response_vector(responses, data.n)
        return np.arange(data.n), np.ascontiguousarray(resp), True
    if responses is None:
        raise ValueError("objective='tau' requires imputed contrast responses")
    return np.arange(data.n), np.ascontiguousarray(_response_vector(responses, data.n)), True


def _response_vector(responses, n: int) -> np.ndarray:
    values = responses.values if isinstance(responses, ImputedOutcomes) else responses
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n,):
        raise ValueError(f"responses have shape {values.shape}, expected ({n},)")
    return values


def _search_one_start(z_rows, resp, perm, vecl0, coeffs, n_fit, d, q, cfg,
                      norm: float, rel_tol: float, maxiter_per_dim: int,
                      max_nfev: int | None):
    """Simplex search from one starting point; returns the tracked best point."""
    p = z_rows.shape[1]
    track = {
        "fun": np.inf, "vecl": None, "h": np.nan, "scale": np.nan,
        "window": (np.nan, np.nan), "initial": np.nan,
    }

    def objective(vecl):
        mat = _assemble(p, d, perm, vecl)
        u = index_values(z_rows, mat)
        scale = float(u.std(axis=0).mean())
        if not (scale > 0.0 and np.isfinite(scale)):
            return np.inf
        try:
            grid = bandwidth_grid(n_fit, d, q, scale, cfg)
        except ValueError:
            return np.inf
        sort_order = np.argsort(u[:, 0], kind="stable")
        u0_sorted = np.ascontiguousarray(u[sort_order, 0])
        sums, _ = loo_cv_grid_fast(u, resp, sort_order, u0_sorted, grid,
                                   coeffs, cfg.eps_den)
        best = int(np.argmin(sums))
        value = float(sums[best]) * norm
        if not np.isfinite(value):
            return np.inf
        if np.isnan(track["initial"]):
            track["initial"] = value
        if value < track["fun"]:
            track["fun"] = value
            track["vecl"] = np.array(vecl, dtype=np.float64, copy=True)
            track["h"] = float(grid[best])
            track["scale"] = scale
            track["window"] = (float(grid[0]), float(grid[-1]))
        return value

    nparams = (p - d) * d
    if nparams == 0:
        result_fun = objective(np.empty(0))
        track["nfev"], track["converged"] = 1, True
    else:
        result = minimize_simplex(
            objective, vecl0,
            rel_ftol=rel_tol,
            max_iter=maxiter_per_dim * nparams,
            step=_SIMPLEX_STEP,
            max_nfev=max_nfev,
        )
        result_fun = result.fun
        track["nfev"], track["converged"] = result.nfev, result.converged
    track["result_fun"] = result_fun
    return track


def fit_subspace(responses, data: Dataset, objective: str = "outcome",
                 cfg: SearchConfig | None = None, group: int | None = None,
                 seed=0) -> SubspaceFit:
    """Minimise the leave-one-out CV criterion over (dimension, directions, bandwidth).

    Args:
        responses: Full-length response vector (or `ImputedOutcomes`). May be
            None for objective='outcome' (uses the observed response) and
            for objective='propensity' (uses the treatment indicator).
        data: Sample providing covariates and group labels.
        objective: 'outcome' (group-restricted response regression, raw
            residual sum), 'tau' (all-subject contrast regression, normalised),
            or 'propensity' (all-subject indicator regression, normalised).
        cfg: Search configuration (defaults to `SearchConfig()`).
        group: Treatment arm for objective='outcome'.
        seed: Seed or `numpy.random.SeedSequence` for the random starts.

    Returns:
        `SubspaceFit` with exact recomputed CV values per dimension.

    Raises:
        SearchFailureError: No candidate dimension produced a finite optimum.
    """
    cfg = cfg or SearchConfig()
    rows, resp, normalised = _resolve_rows_and_responses(data, objective, group, responses)
    n_fit = len(rows)
    p = data.p
    d_hi = min(cfg.d_max, p)

    z_full, _, sd = standardize_columns(data.x)
    z_rows = np.ascontiguousarray(z_full[rows])
    arm_masks = []
    if objective != "outcome":
        arm_masks = [np.asarray(data.a[rows] == arm) for arm in (1, 0)]
    pool = _direction_pool(z_rows, resp, arm_masks)

    rng = np.random.default_rng(seed)
    # Pre-generate every start in a fixed order so results are independent of
    # worker scheduling.
    tasks = []
    for d in range(1, d_hi + 1):
        q = select_kernel_order(d)
        coeffs = build_kernel(q).coeffs_array()
        for mat in _start_matrices(pool, p, d, cfg.multistart if (p - d) else 1, rng):
            try:
                perm, vecl0 = _identity_top_params(mat)
            except DegenerateBasisError:
                continue
            tasks.append((d, q, coeffs, perm, vecl0))

    norm = 1.0 / n_fit if normalised else 1.0
    two_phase = cfg.coarse_rel_tol is not None
    first_tol = cfg.coarse_rel_tol if two_phase else cfg.simplex_rel_tol
    first_cap = cfg.coarse_maxiter_per_dim if two_phase else cfg.simplex_maxiter_per_dim
    first_nfev = cfg.coarse_max_nfev if two_phase else cfg.simplex_max_nfev

    def run(task):
        d, q, coeffs, perm, vecl0, rel_tol, cap, nfev_cap, phase = task
        track = _search_one_start(z_rows, resp, perm, vecl0, coeffs, n_fit, d, q, cfg,
                                  norm, rel_tol, cap, nfev_cap)
        return d, q, perm, track, phase

    def run_all(batch):
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool_exec:
                return list(pool_exec.map(run, batch))
        return [run(task) for task in batch]

    per_dim: dict[int, dict] = {}
    kernel_orders: dict[int, int] = {}
    diag_starts: dict[int, list] = {}

    def absorb(outcomes):
        for d, q, perm, track, phase in outcomes:
            kernel_orders[d] = q
            initial = track["initial"]
            diag_starts.setdefault(d, []).append({
                "phase": phase,
                "initial_cv": None if np.isnan(initial) else float(initial),
                "final_cv": None if not np.isfinite(track["fun"]) else float(track["fun"]),
                "nfev": int(track["nfev"]),
                "converged": bool(track["converged"]),
            })
            if track["vecl"] is None or not np.isfinite(track["fun"]):
                continue
            best = per_dim.get(d)
            if best is None or track["fun"] < best["fun"]:
                per_dim[d] = {"fun": track["fun"], "perm": perm, "vecl": track["vecl"],
                              "h": track["h"], "scale": track["scale"],
                              "window": track["window"]}

    first_batch = [
        (d, q, coeffs, perm, vecl0, first_tol, first_cap, first_nfev,
         "coarse" if two_phase else "full")
        for d, q, coeffs, perm, vecl0 in tasks
    ]
    absorb(run_all(first_batch))

    if two_phase and per_dim:
        coarse_min = min(entry["fun"] for entry in per_dim.values())
        cutoff = coarse_min * (1.0 + cfg.refine_rel_window) if coarse_min >= 0.0 \
            else coarse_min * (1.0 - cfg.refine_rel_window)
        refine_batch = []
        for d in sorted(per_dim):
            entry = per_dim[d]
            if (p - d) * d == 0 or entry["fun"] > cutoff:
                continue
            q = kernel_orders[d]
            coeffs = build_kernel(q).coeffs_array()
            refine_batch.append((d, q, coeffs, entry["perm"], entry["vecl"],
                                 cfg.simplex_rel_tol, cfg.simplex_maxiter_per_dim,
                                 cfg.simplex_max_nfev, "refine"))
        if refine_batch:
            absorb(run_all(refine_batch))

    if not per_dim:
        raise SearchFailureError(
            f"all {len(tasks)} search starts failed to produce a finite CV value "
            f"(objective={objective!r}, n_fit={n_fit})",
            diagnostics={"starts": diag_starts},
        )

    # Exact recomputation at each dimension's optimum, in raw coordinates.
    x_rows = np.ascontiguousarray(data.x[rows])
    cv_by_dim: dict[int, float] = {}
    dim_details: dict[int, dict] = {}
    for d in sorted(per_dim):
        entry = per_dim[d]
        mat_z = _assemble(p, d, entry["perm"], entry["vecl"])
        directions = np.ascontiguousarray(mat_z / sd[:, None])
        reg_cfg = RegressionConfig(kernel=build_kernel(kernel_orders[d]),
                                   bandwidth=entry["h"], eps_den=cfg.eps_den)
        if objective == "outcome":
            value = cv_outcome(data, group, directions, reg_cfg)
        else:
            value = cv_tau(resp, data.x, directions, reg_cfg)
        cv_by_dim[d] = value
        dim_details[d] = {"directions": directions, "h": entry["h"],
                          "scale": entry["scale"], "window": entry["window"]}

    min_cv = min(cv_by_dim.values())
    d_hat = min(
        d for d, value in cv_by_dim.items()
        if value <= min_cv * (1.0 + cfg.dim_tie_rel_tol)
    )
    chosen = dim_details[d_hat]

    return SubspaceFit(
        objective=objective,
        group=group if objective == "outcome" else None,
        d=d_hat,
        basis=normalize_to_identity_top(chosen["directions"]),
        directions=chosen["directions"],
        bandwidth=float(chosen["h"]),
        cv_value=float(cv_by_dim[d_hat]),
        cv_by_dimension=cv_by_dim,
        kernel_order_by_dimension=kernel_orders,
        kernel_order=kernel_orders[d_hat],
        window=(float(chosen["window"][0]), float(chosen["window"][1])),
        index_scale=float(chosen["scale"]),
        n_fit=int(n_fit),
        diagnostics={
            "starts_by_dimension": {str(d): v for d, v in diag_starts.items()},
            "n_tasks": len(tasks),
            "search_cv_by_dimension": {str(d): float(per_dim[d]["fun"]) for d in per_dim},
        },
    )
