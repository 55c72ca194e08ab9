"""End-to-end fit of a conditional treatment-effect surface.

Chains the stages into one object:

1. arm-specific index-subspace searches (only for methods that smooth
   outcomes within arms) and, for weighting methods, a propensity fit;
2. per-subject contrast imputation by the chosen method;
3. an index-subspace search for the contrast regression itself;
4. final-stage kernel order and bandwidth selection, with a deliberate
   under-smoothing factor n^(-delta) applied to the CV-optimal bandwidth
   so the final smoother's bias shrinks faster than its standard error.

The result is a `CateFit` carrying everything needed to evaluate the
effect surface at new covariate points, to run weighted-bootstrap
inference downstream, and to serialize/restore the fit exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ._nwcore import index_values
from .data_model import Dataset, ImputedOutcomes, basis_matrix, plain_data
from .kernels import build_kernel, select_kernel_order
from .regression import (DEFAULT_EPS_DEN, RegressionConfig, nw_group_mean,
                         nw_tau)
from .subspace import (SearchConfig, SubspaceFit, bandwidth_grid, cv_tau,
                       fit_subspace)
from .imputation import (MAX_KERNEL_ORDER, PropensityFit, _fits_d_max,
                         _resolve_arm_settings, fit_propensity,
                         impute_aipw, impute_full_x, impute_ipw,
                         impute_matching, impute_regression)

__all__ = [
    "CATE_FIT_SCHEMA",
    "CATE_FIT_SCHEMA_VERSION",
    "DEFAULT_DELTA_TAU",
    "IMPUTATION_METHODS",
    "CateFit",
    "PipelineError",
    "fit_cate",
    "fit_cate_from_imputed",
    "load_cate_fit",
    "save_cate_fit",
    "tau_at",
    "tau_kernel_order",
    "tau_prognostic",
]

#: Methods `fit_cate` can run end to end. "oracle" contrasts (true index
#: subspaces supplied externally) enter through `fit_cate_from_imputed`.
IMPUTATION_METHODS = ("regression", "matching", "ipw", "aipw", "full_x")

DEFAULT_DELTA_TAU = 0.05
MAX_DELTA_TAU = 0.2

CATE_FIT_SCHEMA = "drcate.cate_fit"
CATE_FIT_SCHEMA_VERSION = 1

#: Fixed per-stage seed ids: SeedSequence([seed, stage_id]). Independent of
#: which stages a method actually runs, so adding a stage never shifts the
#: randomness of the others.
_STAGE_SEED_GROUP0 = 0
_STAGE_SEED_GROUP1 = 1
_STAGE_SEED_PROPENSITY = 2
_STAGE_SEED_TAU = 3


class PipelineError(RuntimeError):
    """A pipeline stage failed; `.stage` names it, the cause is chained."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class _stage:
    """Context manager labelling any escaping exception with its stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, PipelineError):
            return False
        raise PipelineError(self.name, f"stage {self.name!r} failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Final-stage kernel order


def tau_kernel_order(d_tau: int, d_max: int, cap: int = MAX_KERNEL_ORDER) -> int:
    """Kernel order for the final contrast smoother at fitted dimension ``d_tau``.

    Starts at the base order rule for ``d_tau`` and is raised (in steps of 2)
    until ``order * d`` strictly exceeds ``order_rule(d) * d_tau`` for every
    searched dimension ``d`` larger than ``d_tau``; capped at the available
    kernel family. With order rule 4 over dimensions 1..3 this yields 4 for
    any fitted dimension — the constraint only binds when much larger
    dimensions were searched.
    """
    if d_tau < 1:
        raise ValueError(f"d_tau must be >= 1, got {d_tau}")
    if d_max < 1:
        raise ValueError(f"d_max must be >= 1, got {d_max}")
    if cap < 2 or cap % 2:
        raise ValueError(f"order cap must be an even integer >= 2, got {cap}")
    larger = range(d_tau + 1, d_max + 1)
    order = select_kernel_order(d_tau)
    while order < cap and not all(
        order * d > select_kernel_order(d) * d_tau for d in larger
    ):
        order += 2
    return min(order, cap)


# ---------------------------------------------------------------------------
# Fit container


@dataclass(frozen=True)
class CateFit:
    """Complete fitted state of the effect-surface pipeline.

    Attributes:
        method: Imputation method tag (matches ``dhat.method``).
        dhat: Per-subject imputed contrasts the final smoother regresses.
        fit_tau: Index-subspace search result for the contrast regression.
        q_tau: Final-stage kernel order (see `tau_kernel_order`).
        h_tau_opt: CV-optimal final-stage bandwidth over the search window.
        h_tau: Under-smoothed evaluation bandwidth; always equals
            ``h_tau_opt * n^(-delta_tau)`` exactly (n = ``fit_tau.n_fit``),
            hence strictly below ``h_tau_opt``.
        delta_tau: Under-smoothing exponent, in (0, 0.2].
        eps_den: Degenerate-denominator threshold for evaluation.
        fit0 / fit1: Arm-specific subspace fits, or None for methods that
            do not smooth within arms (matching, IPW, full-X).
        propensity_fit: Propensity model for weighting methods, else None.
        config: Provenance snapshot (seed, method, search configuration).
        diagnostics: Final-stage CV profile and stage bookkeeping.
    """

    method: str
    dhat: ImputedOutcomes
    fit_tau: SubspaceFit
    q_tau: int
    h_tau_opt: float
    h_tau: float
    delta_tau: float
    eps_den: float = DEFAULT_EPS_DEN
    fit0: SubspaceFit | None = None
    fit1: SubspaceFit | None = None
    propensity_fit: PropensityFit | None = None
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ImputedOutcomes.METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")
        if self.dhat.method != self.method:
            raise ValueError(
                f"method tag {self.method!r} does not match contrasts built "
                f"by {self.dhat.method!r}")
        n = self.fit_tau.n_fit
        if len(self.dhat.values) != n:
            raise ValueError(
                f"contrast vector has length {len(self.dhat.values)}, "
                f"final fit used n={n}")
        if self.q_tau % 2 or not (2 <= self.q_tau <= MAX_KERNEL_ORDER):
            raise ValueError(
                f"q_tau must be an even integer in [2, {MAX_KERNEL_ORDER}], "
                f"got {self.q_tau}")
        if not (0.0 < self.delta_tau <= MAX_DELTA_TAU):
            raise ValueError(
                f"delta_tau must lie in (0, {MAX_DELTA_TAU}], got {self.delta_tau}")
        if not (np.isfinite(self.h_tau_opt) and self.h_tau_opt > 0.0):
            raise ValueError(f"h_tau_opt must be positive, got {self.h_tau_opt}")
        if not (self.eps_den > 0.0):
            raise ValueError("eps_den must be positive")
        expected = self.h_tau_opt * float(n) ** (-self.delta_tau)
        if self.h_tau != expected:
            raise ValueError(
                f"h_tau={self.h_tau!r} violates the under-smoothing identity "
                f"h_tau_opt * n^(-delta_tau) = {expected!r}")
        if not self.h_tau < self.h_tau_opt:
            raise ValueError("under-smoothed bandwidth must be strictly below "
                             "the CV-optimal one")
        for arm, fit in ((0, self.fit0), (1, self.fit1)):
            if fit is not None and fit.group != arm:
                raise ValueError(
                    f"fit{arm} was computed for group {fit.group}, expected {arm}")

    def tau_regression_config(self) -> RegressionConfig:
        """Kernel/bandwidth configuration of the final contrast smoother."""
        return RegressionConfig(kernel=build_kernel(self.q_tau),
                                bandwidth=self.h_tau, eps_den=self.eps_den)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        """Plain-type payload reconstructing the fit exactly (see `from_dict`)."""
        return {
            "schema": CATE_FIT_SCHEMA,
            "version": CATE_FIT_SCHEMA_VERSION,
            "method": self.method,
            "q_tau": int(self.q_tau),
            "h_tau_opt": float(self.h_tau_opt),
            "h_tau": float(self.h_tau),
            "delta_tau": float(self.delta_tau),
            "eps_den": float(self.eps_den),
            "dhat": self.dhat.to_dict(),
            "fit_tau": self.fit_tau.to_dict(),
            "fit0": None if self.fit0 is None else self.fit0.to_dict(),
            "fit1": None if self.fit1 is None else self.fit1.to_dict(),
            "propensity_fit": (None if self.propensity_fit is None
                               else self.propensity_fit.to_dict()),
            "config": plain_data(self.config),
            "diagnostics": plain_data(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CateFit":
        schema = payload.get("schema")
        if schema != CATE_FIT_SCHEMA:
            raise ValueError(f"unrecognized fit schema {schema!r}")
        version = payload.get("version")
        if version != CATE_FIT_SCHEMA_VERSION:
            raise ValueError(f"unsupported fit schema version {version!r}")

        def _opt(key, loader):
            value = payload.get(key)
            return None if value is None else loader(value)

        return cls(
            method=str(payload["method"]),
            dhat=ImputedOutcomes.from_dict(payload["dhat"]),
            fit_tau=SubspaceFit.from_dict(payload["fit_tau"]),
            q_tau=int(payload["q_tau"]),
            h_tau_opt=float(payload["h_tau_opt"]),
            h_tau=float(payload["h_tau"]),
            delta_tau=float(payload["delta_tau"]),
            eps_den=float(payload["eps_den"]),
            fit0=_opt("fit0", SubspaceFit.from_dict),
            fit1=_opt("fit1", SubspaceFit.from_dict),
            propensity_fit=_opt("propensity_fit", PropensityFit.from_dict),
            config=dict(payload.get("config", {})),
            diagnostics=dict(payload.get("diagnostics", {})),
        )

    def to_json(self) -> str:
        """Versioned text form; floats round-trip bit for bit."""
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CateFit":
        return cls.from_dict(json.loads(text))


def save_cate_fit(fit: CateFit, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(fit.to_json())
        handle.write("\n")


def load_cate_fit(path) -> CateFit:
    with open(path, "r", encoding="utf-8") as handle:
        return CateFit.from_json(handle.read())


# ---------------------------------------------------------------------------
# Stage 4: final-stage bandwidth selection


def _tau_bandwidth_grid(fit_tau: SubspaceFit, q_tau: int,
                        cfg: SearchConfig) -> np.ndarray:
    """Bandwidth grid for the final-stage CV re-selection.

    When ``q_tau`` equals the search's kernel order the recorded window is
    reused verbatim (geomspace endpoints are exact), so the grid reproduces
    the search's own grid bit for bit; a raised order changes the window
    exponent, so the window is then recomputed at the recorded index scale.
    """
    if q_tau == fit_tau.kernel_order:
        lo, hi = fit_tau.window
        return np.geomspace(lo, hi, cfg.bandwidth_grid_size)
    return bandwidth_grid(fit_tau.n_fit, fit_tau.d, q_tau,
                          fit_tau.index_scale, cfg)


def _select_tau_bandwidth(data: Dataset, dhat: ImputedOutcomes,
                          fit_tau: SubspaceFit, q_tau: int,
                          cfg: SearchConfig):
    """CV-optimal final-stage bandwidth over the search window.

    Scores the exact leave-one-out criterion at the fitted directions for
    every grid bandwidth; first minimum wins.
    """
    grid = _tau_bandwidth_grid(fit_tau, q_tau, cfg)
    kernel = build_kernel(q_tau)
    values = np.array([
        cv_tau(dhat, data.x, fit_tau.directions,
               RegressionConfig(kernel=kernel, bandwidth=float(h),
                                eps_den=cfg.eps_den))
        for h in grid
    ])
    if not np.any(np.isfinite(values)):
        raise RuntimeError("final-stage CV profile is entirely non-finite")
    best = int(np.nanargmin(values))
    return float(grid[best]), grid, values


# ---------------------------------------------------------------------------
# Pipeline entry points


def _validate_delta(delta_tau: float) -> float:
    delta_tau = float(delta_tau)
    if not (0.0 < delta_tau <= MAX_DELTA_TAU):
        raise ValueError(
            f"delta_tau must lie in (0, {MAX_DELTA_TAU}], got {delta_tau}")
    return delta_tau


def _stage_seed(seed: int, stage_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(stage_id)])


def fit_cate_from_imputed(data: Dataset, dhat: ImputedOutcomes,
                          cfg: SearchConfig | None = None, *,
                          delta_tau: float = DEFAULT_DELTA_TAU, seed: int = 0,
                          fit0: SubspaceFit | None = None,
                          fit1: SubspaceFit | None = None,
                          propensity_fit: PropensityFit | None = None,
                          provenance: dict | None = None) -> CateFit:
    """Stages 3-4 only: fit the effect surface to already-imputed contrasts.

    Deterministic given (``dhat``, ``cfg``, ``delta_tau``, ``seed``): the
    contrast-subspace search, the final-stage order/bandwidth selection and
    the under-smoothing identity do not depend on how ``dhat`` was built.
    """
    cfg = cfg or SearchConfig()
    delta_tau = _validate_delta(delta_tau)
    if not isinstance(dhat, ImputedOutcomes):
        raise TypeError("dhat must be an ImputedOutcomes instance")

    with _stage("cate-search"):
        fit_tau = fit_subspace(dhat, data, objective="tau", cfg=cfg,
                               seed=_stage_seed(seed, _STAGE_SEED_TAU))

    with _stage("bandwidth-selection"):
        d_max_eff = min(cfg.d_max, data.p)
        q_tau = tau_kernel_order(fit_tau.d, d_max_eff)
        h_opt, grid, cv_values = _select_tau_bandwidth(
            data, dhat, fit_tau, q_tau, cfg)
        h_tau = float(h_opt * float(fit_tau.n_fit) ** (-delta_tau))

    config = {
        "method": dhat.method,
        "seed": int(seed),
        "delta_tau": delta_tau,
        "d_max": d_max_eff,
        "n": data.n,
        "p": data.p,
        "search": dataclasses.asdict(cfg),
    }
    if provenance:
        config.update(plain_data(provenance))
    diagnostics = {
        "tau_cv_bandwidths": [float(h) for h in grid],
        "tau_cv_values": [float(v) for v in cv_values],
    }
    return CateFit(
        method=dhat.method,
        dhat=dhat,
        fit_tau=fit_tau,
        q_tau=q_tau,
        h_tau_opt=h_opt,
        h_tau=h_tau,
        delta_tau=delta_tau,
        eps_den=cfg.eps_den,
        fit0=fit0,
        fit1=fit1,
        propensity_fit=propensity_fit,
        config=config,
        diagnostics=diagnostics,
    )


def fit_cate(data: Dataset, cfg: SearchConfig | None = None, *,
             method: str = "regression", delta_tau: float = DEFAULT_DELTA_TAU,
             seed: int = 0, clip_bound: float = 0.01) -> CateFit:
    """Full pipeline: impute per-subject contrasts, then fit their surface.

    Args:
        data: Observational sample.
        cfg: Search configuration shared by every subspace search
            (defaults to `SearchConfig()`).
        method: One of `IMPUTATION_METHODS`. "regression" and "aipw" run
            the arm-specific subspace searches; "ipw" and "aipw" fit a
            propensity model; "matching" and "full_x" need neither.
        delta_tau: Under-smoothing exponent in (0, 0.2].
        seed: Base seed; stage seeds derive from it deterministically.
        clip_bound: Propensity clipping bound for weighting methods.

    Returns:
        `CateFit` with absent stages recorded as None.

    Raises:
        PipelineError: A stage failed; `.stage` names it and the original
            exception is chained.
    """
    cfg = cfg or SearchConfig()
    delta_tau = _validate_delta(delta_tau)
    if method not in IMPUTATION_METHODS:
        raise ValueError(
            f"method must be one of {IMPUTATION_METHODS}, got {method!r}")

    fit0 = fit1 = pfit = None
    if method in ("regression", "aipw"):
        with _stage("outcome-search-0"):
            fit0 = fit_subspace(None, data, objective="outcome", cfg=cfg,
                                group=0,
                                seed=_stage_seed(seed, _STAGE_SEED_GROUP0))
        with _stage("outcome-search-1"):
            fit1 = fit_subspace(None, data, objective="outcome", cfg=cfg,
                                group=1,
                                seed=_stage_seed(seed, _STAGE_SEED_GROUP1))
    if method in ("ipw", "aipw"):
        with _stage("propensity-search"):
            pfit = fit_propensity(data, cfg, clip_bound=clip_bound,
                                  seed=_stage_seed(seed, _STAGE_SEED_PROPENSITY))

    with _stage("imputation"):
        if method == "regression":
            dhat = impute_regression(data, fit0, fit1, eps_den=cfg.eps_den)
        elif method == "matching":
            dhat = impute_matching(data)
        elif method == "full_x":
            dhat = impute_full_x(data, eps_den=cfg.eps_den)
        elif method == "ipw":
            dhat = impute_ipw(data, pfit)
        else:  # aipw
            dhat = impute_aipw(data, pfit, fit0, fit1, eps_den=cfg.eps_den)

    return fit_cate_from_imputed(
        data, dhat, cfg, delta_tau=delta_tau, seed=seed,
        fit0=fit0, fit1=fit1, propensity_fit=pfit,
        provenance={"clip_bound": float(clip_bound)} if pfit is not None else None,
    )


# ---------------------------------------------------------------------------
# Evaluation


def _eval_points(x, p: int) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != p:
        raise ValueError(
            f"evaluation points must have {p} coordinates, got shape {pts.shape}")
    return np.ascontiguousarray(pts), single


def tau_at(fit: CateFit, data: Dataset, x, return_flag: bool = False):
    """Effect estimate at covariate point(s) ``x``.

    Smooths the fitted contrasts over the fitted index directions with the
    under-smoothed bandwidth. ``x`` may be a single p-vector (scalar result)
    or an (m, p) array (vector result). With ``return_flag`` also reports
    whether the degenerate-denominator fallback (the mean contrast) was
    used at each point.
    """
    pts, single = _eval_points(x, data.p)
    cfg = fit.tau_regression_config()
    mat = basis_matrix(fit.fit_tau.directions, data.p)
    queries = index_values(pts, mat)
    values = np.empty(len(queries))
    flags = np.empty(len(queries), dtype=bool)
    for k, u in enumerate(queries):
        values[k], flags[k] = nw_tau(data, fit.dhat, mat, cfg, u,
                                     return_flag=True)
    if single:
        return (float(values[0]), bool(flags[0])) if return_flag else float(values[0])
    return (values, flags) if return_flag else values


def tau_prognostic(fit0: SubspaceFit, fit1: SubspaceFit, data: Dataset, x,
                   *, d_max: int | None = None,
                   eps_den: float = DEFAULT_EPS_DEN,
                   return_flag: bool = False):
    """Effect estimate as a difference of the two arm regressions at ``x``.

    Evaluates the treated-arm minus control-arm regression on their own
    fitted index subspaces, using the same kernel-order rule and rule-of-
    thumb bandwidths as regression imputation. ``x`` may be a single
    p-vector or an (m, p) array.
    """
    for arm, fit in ((0, fit0), (1, fit1)):
        if fit.group != arm:
            raise ValueError(
                f"fit{arm} was computed for group {fit.group}, expected {arm}")
    pts, single = _eval_points(x, data.p)
    if d_max is None:
        d_max = _fits_d_max(fit0, fit1)
    mats = (basis_matrix(fit0.directions, data.p),
            basis_matrix(fit1.directions, data.p))
    settings, _ = _resolve_arm_settings(data, mats, d_max, None, None, eps_den)
    (cfg0, _, _), (cfg1, _, _) = settings
    u0 = index_values(pts, mats[0])
    u1 = index_values(pts, mats[1])
    values = np.empty(len(pts))
    flags = np.empty(len(pts), dtype=bool)
    for k in range(len(pts)):
        m1, f1 = nw_group_mean(data, 1, mats[1], cfg1, u1[k], return_flag=True)
        m0, f0 = nw_group_mean(data, 0, mats[0], cfg0, u0[k], return_flag=True)
        values[k] = m1 - m0
        flags[k] = f1 or f0
    if single:
        return (float(values[0]), bool(flags[0])) if return_flag else float(values[0])
    return (values, flags) if return_flag else values
