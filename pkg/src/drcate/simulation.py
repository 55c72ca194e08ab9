"""Replication harness for the two synthetic designs used in the study suite.

Generates datasets from two benchmark data-generating processes (a linear
one-index design and a bilinear two-index design), runs every contrast
imputation method through the full estimation pipeline replicate by
replicate, and aggregates three summary tables:

* dimension selection and subspace accuracy per method,
* point-estimate accuracy at a fixed covariate point per method,
* weighted-bootstrap standard errors and interval coverage for the
  regression-imputation estimator.

Replicates are independently seeded, every method within a replicate sees
the same dataset (common random numbers), and per-replicate results can be
cached as JSON so long studies resume after interruption. Aggregation is
deterministic: the same design and base seed reproduce every table
byte-for-byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .bootstrap import confidence_intervals, bootstrap_tau
from .data_model import (
    Dataset,
    ImputedOutcomes,
    IndexBasis,
    normalize_to_identity_top,
    plain_data,
    projection_matrix,
    span_projector,
)
from .imputation import (
    fit_propensity,
    impute_aipw,
    impute_full_x,
    impute_ipw,
    impute_matching,
    impute_regression,
)
from .pipeline import (
    DEFAULT_DELTA_TAU,
    PipelineError,
    fit_cate_from_imputed,
    tau_at,
)
from .subspace import SearchConfig, fit_subspace

__all__ = [
    "MODELS",
    "DEFAULT_TABLE_METHODS",
    "METHOD_SEED_IDS",
    "SimDesign",
    "SimTruth",
    "MethodReplicate",
    "BootstrapReplicate",
    "ReplicateResult",
    "SimTable",
    "default_sim_config",
    "model_bases",
    "true_dimension",
    "tau_function",
    "propensity_function",
    "projector_mse",
    "replicate_seed",
    "generate",
    "run_replicate",
    "run_replications",
    "table1_from_results",
    "table2_from_results",
    "table3_from_results",
    "run_table1",
    "run_table2",
    "run_table3",
    "write_replicate_log",
]

MODELS = ("M1", "M2")

#: Methods reported in the study tables, in presentation order: the
#: reference estimator smoothing the true unit-level contrasts, then the
#: four feasible imputation strategies.
DEFAULT_TABLE_METHODS = ("true", "regression", "matching", "ipw", "aipw")

#: Seed-stream identifier per method; combined with (base seed, replicate
#: index) so each method's dimension search draws an independent stream
#: while all methods share the replicate's dataset.
METHOD_SEED_IDS = {
    "regression": 0,
    "matching": 1,
    "ipw": 2,
    "aipw": 3,
    "full_x": 4,
    "oracle": 5,
    "true": 6,
}

# Seed-stream identifiers for the stages shared across methods within a
# replicate (arm-mean searches, propensity search) and for the bootstrap.
_ARM0_SEED_ID = 10
_ARM1_SEED_ID = 11
_PROPENSITY_SEED_ID = 12
_BOOTSTRAP_SEED_ID = 13

#: Dimension ceiling used by the study harness when no search configuration
#: is supplied: one above the largest true dimension, so the selection
#: histogram's top bin can receive mass.
DEFAULT_SIM_D_MAX = 4

_HALF_WIDTH = math.sqrt(3.0)

REPLICATE_SCHEMA = "drcate.sim_replicate"
REPLICATE_SCHEMA_VERSION = 1

#: Failures caught per method within a replicate; anything else is a bug
#: and propagates.
_REPLICATE_ERRORS = (RuntimeError, ValueError, FloatingPointError,
                     np.linalg.LinAlgError)


def default_sim_config() -> SearchConfig:
    """Search configuration used by the harness when none is given."""
    return SearchConfig(d_max=DEFAULT_SIM_D_MAX)


# ---------------------------------------------------------------------------
# Design and data generation


@dataclass(frozen=True)
class SimDesign:
    """One cell of the replication study.

    Attributes:
        model: Data-generating process, ``"M1"`` (linear contrasts, one
            index direction) or ``"M2"`` (bilinear contrasts, two index
            directions).
        n: Subjects per replicate (at least 50).
        p: Covariate dimension (at least 3; the mean and treatment models
            use only the first three coordinates).
        noise_sd: Standard deviation of the independent Gaussian noise
            added to each potential outcome.
        propensity_coeffs: Logistic coefficients (intercept and the first
            three covariates) of the treatment-assignment model.
        eval_point: Covariate point at which the effect curve is evaluated
            (defaults to the origin, where the true effect is 0 in both
            models).
        n_replications: Number of independent replicates.
        n_bootstrap: Weighted-bootstrap replicates per replicate; 0 skips
            the bootstrap stage.
        base_seed: Root seed; every replicate and stage derives its own
            stream from it.
    """

    model: str
    n: int
    p: int = 10
    noise_sd: float = 0.02
    propensity_coeffs: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)
    eval_point: tuple[float, ...] | None = None
    n_replications: int = 200
    n_bootstrap: int = 0
    base_seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if int(self.n) != self.n or self.n < 50:
            raise ValueError(f"need n >= 50 subjects per replicate, got {self.n}")
        if int(self.p) != self.p or self.p < 3:
            raise ValueError(f"need p >= 3 covariates, got {self.p}")
        if not (self.noise_sd >= 0.0 and np.isfinite(self.noise_sd)):
            raise ValueError(f"noise sd must be finite and >= 0, got {self.noise_sd}")
        coeffs = tuple(float(c) for c in self.propensity_coeffs)
        if len(coeffs) != 4 or not all(np.isfinite(c) for c in coeffs):
            raise ValueError(
                "propensity coefficients must be 4 finite numbers "
                f"(intercept and first three slopes), got {self.propensity_coeffs!r}")
        object.__setattr__(self, "propensity_coeffs", coeffs)
        if self.eval_point is None:
            point = (0.0,) * self.p
        else:
            point = tuple(float(v) for v in self.eval_point)
            if len(point) != self.p or not all(np.isfinite(v) for v in point):
                raise ValueError(
                    f"evaluation point must be {self.p} finite numbers, "
                    f"got {self.eval_point!r}")
        object.__setattr__(self, "eval_point", point)
        if int(self.n_replications) != self.n_replications or self.n_replications < 1:
            raise ValueError(f"need at least 1 replication, got {self.n_replications}")
        if int(self.n_bootstrap) != self.n_bootstrap or self.n_bootstrap < 0:
            raise ValueError(f"bootstrap count must be >= 0, got {self.n_bootstrap}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "n_replications", int(self.n_replications))
        object.__setattr__(self, "n_bootstrap", int(self.n_bootstrap))
        object.__setattr__(self, "base_seed", int(self.base_seed))

    def eval_array(self) -> np.ndarray:
        return np.asarray(self.eval_point, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n": self.n,
            "p": self.p,
            "noise_sd": float(self.noise_sd),
            "propensity_coeffs": list(self.propensity_coeffs),
            "eval_point": list(self.eval_point),
            "n_replications": self.n_replications,
            "n_bootstrap": self.n_bootstrap,
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SimDesign":
        return cls(
            model=str(payload["model"]),
            n=int(payload["n"]),
            p=int(payload.get("p", 10)),
            noise_sd=float(payload.get("noise_sd", 0.02)),
            propensity_coeffs=tuple(payload.get("propensity_coeffs",
                                                (0.5, 0.5, 0.5, 0.5))),
            eval_point=tuple(payload["eval_point"]) if payload.get("eval_point")
            is not None else None,
            n_replications=int(payload.get("n_replications", 200)),
            n_bootstrap=int(payload.get("n_bootstrap", 0)),
            base_seed=int(payload.get("base_seed", 0)),
        )


def _mean_outcomes(model: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free control and treated mean outcomes at each covariate row."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if model == "M1":
        return x1 - x2, 2.0 * x1 + x3
    return (x1 + x3) * (x2 - 1.0), 2.0 * x2 * (x1 + x3)


def tau_function(model: str, x) -> np.ndarray:
    """True treatment-effect curve evaluated at covariate rows.

    Defined as the difference of the two noise-free mean outcomes; for the
    bilinear design this simplifies to (x1 + x3)(x2 + 1). Both curves are
    exactly 0 at the origin.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if x.shape[1] < 3:
        raise ValueError(f"need at least 3 covariates, got {x.shape[1]}")
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if model == "M1":
        return x1 + x2 + x3
    return (x1 + x3) * (x2 + 1.0)


def propensity_function(coeffs, x) -> np.ndarray:
    """Treatment probability: logistic in the first three covariates."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c0, c1, c2, c3 = (float(c) for c in coeffs)
    return expit(c0 + c1 * x[:, 0] + c2 * x[:, 1] + c3 * x[:, 2])


def model_bases(model: str, p: int) -> tuple[IndexBasis, IndexBasis, IndexBasis]:
    """True index bases (control arm, treated arm, effect) for a model."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if p < 3:
        raise ValueError(f"need p >= 3, got {p}")
    if model == "M1":
        b0 = np.zeros((p, 1))
        b0[0, 0], b0[1, 0] = 1.0, -1.0
        b1 = np.zeros((p, 1))
        b1[0, 0], b1[2, 0] = 2.0, 1.0
        btau = np.zeros((p, 1))
        btau[0, 0] = btau[1, 0] = btau[2, 0] = 1.0
        mats = (b0, b1, btau)
    else:
        span = np.zeros((p, 2))
        span[0, 0] = span[2, 0] = 1.0
        span[1, 1] = 1.0
        mats = (span, span, span)
    return tuple(normalize_to_identity_top(m) for m in mats)


def true_dimension(model: str) -> int:
    """Dimension of the true effect subspace (1 for M1, 2 for M2)."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    return 1 if model == "M1" else 2


@dataclass
class SimTruth:
    """Everything the generator knows that an estimator must not see.

    Attributes:
        model: Data-generating process tag.
        y0, y1: Both potential outcomes for every subject (noise included).
        d_i: Unit-level contrasts ``y1 - y0``.
        tau_values: Noise-free effect curve at the sampled covariates.
        pi_values: True treatment probabilities at the sampled covariates.
        b0, b1, b_tau: True index bases of the two arm-mean regressions and
            of the effect curve.
        d_tau: Dimension of the true effect subspace.
        propensity_coeffs: Logistic coefficients of the assignment model.
    """

    model: str
    y0: np.ndarray
    y1: np.ndarray
    d_i: np.ndarray
    tau_values: np.ndarray
    pi_values: np.ndarray
    b0: IndexBasis
    b1: IndexBasis
    b_tau: IndexBasis
    d_tau: int
    propensity_coeffs: tuple[float, float, float, float]

    def tau(self, x) -> np.ndarray:
        """True effect curve at arbitrary covariate rows."""
        return tau_function(self.model, x)

    def propensity(self, x) -> np.ndarray:
        """True treatment probability at arbitrary covariate rows."""
        return propensity_function(self.propensity_coeffs, x)


def generate(design: SimDesign, replicate_index: int) -> tuple[Dataset, SimTruth]:
    """Draw one replicate dataset together with its generating truth.

    Covariates are iid uniform on (-sqrt(3), sqrt(3)) (unit variance),
    treatment is Bernoulli with logistic probability in the first three
    covariates, each potential outcome adds independent Gaussian noise to
    its model mean, and only the assigned arm's outcome is observed.

    The draw order (covariates, control noise, treated noise, assignment
    uniforms) is part of the reproducibility contract: the stream is seeded
    by (base seed, replicate index) only, so every method sees the same
    dataset within a replicate.
    """
    if int(replicate_index) != replicate_index or replicate_index < 0:
        raise ValueError(f"replicate index must be a non-negative integer, "
                         f"got {replicate_index}")
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([design.base_seed, int(replicate_index)])))
    n, p = design.n, design.p
    x = rng.uniform(-_HALF_WIDTH, _HALF_WIDTH, size=(n, p))
    eps0 = rng.normal(0.0, design.noise_sd, size=n)
    eps1 = rng.normal(0.0, design.noise_sd, size=n)
    u = rng.random(n)

    mean0, mean1 = _mean_outcomes(design.model, x)
    y0 = mean0 + eps0
    y1 = mean1 + eps1
    pi = propensity_function(design.propensity_coeffs, x)
    a = (u < pi).astype(np.int64)
    y = np.where(a == 1, y1, y0)

    data = Dataset(x=x, a=a, y=y)
    b0, b1, btau = model_bases(design.model, p)
    truth = SimTruth(
        model=design.model,
        y0=y0,
        y1=y1,
        d_i=y1 - y0,
        tau_values=tau_function(design.model, x),
        pi_values=pi,
        b0=b0,
        b1=b1,
        b_tau=btau,
        d_tau=true_dimension(design.model),
        propensity_coeffs=design.propensity_coeffs,
    )
    return data, truth


# ---------------------------------------------------------------------------
# Subspace accuracy


def projector_mse(directions, basis: IndexBasis) -> float:
    """Squared Frobenius distance between estimated and true span projectors.

    Unlike `subspace_mse` this accepts an estimated span whose dimension
    differs from the true one (a wrong selected dimension contributes its
    projector mismatch instead of being undefined); for equal dimensions the
    two agree exactly.
    """
    directions = np.asarray(directions, dtype=np.float64)
    if directions.ndim == 1:
        directions = directions[:, None]
    if directions.shape[0] != basis.p:
        raise ValueError(
            f"covariate dimensions differ: {directions.shape[0]} vs {basis.p}")
    diff = span_projector(directions) - projection_matrix(basis)
    return float(np.sum(diff * diff))


# ---------------------------------------------------------------------------
# Seeding


def replicate_seed(base_seed: int, replicate_index: int, stream_id: int) -> int:
    """Derive an integer seed for one stream of one replicate.

    Mixes (base seed, replicate index, stream id) through a seed sequence,
    so streams are statistically independent across replicates, across
    methods, and across shared stages, while remaining reproducible.
    """
    ss = np.random.SeedSequence(
        [int(base_seed), int(replicate_index), int(stream_id)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Per-replicate results


@dataclass
class MethodReplicate:
    """One method's outcome on one replicate."""

    method: str
    ok: bool
    d_hat: int | None = None
    subspace_mse: float | None = None
    tau_hat: float | None = None
    smoothing_fallback: bool | None = None
    elapsed: float = 0.0
    error: str | None = None
    stage: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ok": bool(self.ok),
            "d_hat": None if self.d_hat is None else int(self.d_hat),
            "subspace_mse": None if self.subspace_mse is None else float(self.subspace_mse),
            "tau_hat": None if self.tau_hat is None else float(self.tau_hat),
            "smoothing_fallback": self.smoothing_fallback,
            "elapsed": float(self.elapsed),
            "error": self.error,
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MethodReplicate":
        return cls(
            method=str(payload["method"]),
            ok=bool(payload["ok"]),
            d_hat=None if payload.get("d_hat") is None else int(payload["d_hat"]),
            subspace_mse=payload.get("subspace_mse"),
            tau_hat=payload.get("tau_hat"),
            smoothing_fallback=payload.get("smoothing_fallback"),
            elapsed=float(payload.get("elapsed", 0.0)),
            error=payload.get("error"),
            stage=payload.get("stage"),
        )


@dataclass
class BootstrapReplicate:
    """Weighted-bootstrap inference for one replicate's regression estimate."""

    ok: bool
    point: float | None = None
    se: float | None = None
    replicates: tuple[float, ...] = ()
    n_excluded: int = 0
    elapsed: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None
    stage: str | None = None

    def to_dict(self) -> dict:
        return {
            "ok": bool(self.ok),
            "point": None if self.point is None else float(self.point),
            "se": None if self.se is None else float(self.se),
            "replicates": [float(v) for v in self.replicates],
            "n_excluded": int(self.n_excluded),
            "elapsed": float(self.elapsed),
            "diagnostics": plain_data(self.diagnostics),
            "error": self.error,
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BootstrapReplicate":
        return cls(
            ok=bool(payload["ok"]),
            point=payload.get("point"),
            se=payload.get("se"),
            replicates=tuple(float(v) for v in payload.get("replicates", ())),
            n_excluded=int(payload.get("n_excluded", 0)),
            elapsed=float(payload.get("elapsed", 0.0)),
            diagnostics=dict(payload.get("diagnostics", {})),
            error=payload.get("error"),
            stage=payload.get("stage"),
        )


@dataclass
class ReplicateResult:
    """All requested methods' outcomes on one replicate."""

    rep_index: int
    n_treated: int
    methods: dict[str, MethodReplicate]
    bootstrap: BootstrapReplicate | None = None
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return {
            "schema": REPLICATE_SCHEMA,
            "version": REPLICATE_SCHEMA_VERSION,
            "rep_index": int(self.rep_index),
            "n_treated": int(self.n_treated),
            "methods": {name: rec.to_dict() for name, rec in self.methods.items()},
            "bootstrap": None if self.bootstrap is None else self.bootstrap.to_dict(),
            "elapsed": float(self.elapsed),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ReplicateResult":
        if payload.get("schema") != REPLICATE_SCHEMA:
            raise ValueError(f"unexpected schema {payload.get('schema')!r}")
        if payload.get("version") != REPLICATE_SCHEMA_VERSION:
            raise ValueError(f"unsupported version {payload.get('version')!r}")
        bootstrap = payload.get("bootstrap")
        return cls(
            rep_index=int(payload["rep_index"]),
            n_treated=int(payload["n_treated"]),
            methods={name: MethodReplicate.from_dict(rec)
                     for name, rec in payload["methods"].items()},
            bootstrap=None if bootstrap is None
            else BootstrapReplicate.from_dict(bootstrap),
            elapsed=float(payload.get("elapsed", 0.0)),
        )


# ---------------------------------------------------------------------------
# Running one replicate


def _validated_methods(methods) -> tuple[str, ...]:
    methods = tuple(methods)
    if not methods:
        raise ValueError("need at least one method")
    unknown = [m for m in methods if m not in METHOD_SEED_IDS]
    if unknown:
        raise ValueError(f"unknown methods {unknown!r}; "
                         f"expected among {sorted(METHOD_SEED_IDS)}")
    if len(set(methods)) != len(methods):
        raise ValueError(f"duplicate methods in {methods!r}")
    return methods


class _SharedStages:
    """Lazily computed per-replicate stages shared across methods.

    A stage that fails keeps its exception and re-raises it for every
    method that depends on it, so shared failures are charged to each
    dependent method without recomputing the stage.
    """

    def __init__(self, design: SimDesign, rep_index: int, data: Dataset,
                 cfg: SearchConfig, clip_bound: float):
        self._design = design
        self._rep = rep_index
        self._data = data
        self._cfg = cfg
        self._clip = clip_bound
        self._memo: dict[str, tuple[str, object]] = {}

    def _get(self, key: str, builder):
        if key not in self._memo:
            try:
                self._memo[key] = ("ok", builder())
            except _REPLICATE_ERRORS as exc:
                self._memo[key] = ("error", exc)
        status, value = self._memo[key]
        if status == "error":
            raise value
        return value

    def arm_fit(self, arm: int):
        stream = _ARM0_SEED_ID if arm == 0 else _ARM1_SEED_ID
        seed = replicate_seed(self._design.base_seed, self._rep, stream)
        return self._get(
            f"arm{arm}",
            lambda: fit_subspace(None, self._data, "outcome", self._cfg,
                                 group=arm, seed=seed))

    def propensity_fit(self):
        seed = replicate_seed(self._design.base_seed, self._rep,
                              _PROPENSITY_SEED_ID)
        return self._get(
            "propensity",
            lambda: fit_propensity(self._data, self._cfg,
                                   clip_bound=self._clip, seed=seed))


def _method_inputs(method: str, data: Dataset, truth: SimTruth,
                   shared: _SharedStages, cfg: SearchConfig):
    """Imputed contrasts plus the component fits recorded on the result."""
    if method == "true":
        return ImputedOutcomes(values=truth.d_i, method="true", info={}), {}
    if method == "oracle":
        return ImputedOutcomes(values=truth.tau_values, method="oracle",
                               info={}), {}
    if method == "full_x":
        return impute_full_x(data, eps_den=cfg.eps_den), {}
    if method == "matching":
        return impute_matching(data), {}
    if method == "regression":
        fit0, fit1 = shared.arm_fit(0), shared.arm_fit(1)
        dhat = impute_regression(data, fit0, fit1, eps_den=cfg.eps_den)
        return dhat, {"fit0": fit0, "fit1": fit1}
    if method == "ipw":
        pfit = shared.propensity_fit()
        return impute_ipw(data, pfit), {"propensity_fit": pfit}
    if method == "aipw":
        fit0, fit1 = shared.arm_fit(0), shared.arm_fit(1)
        pfit = shared.propensity_fit()
        dhat = impute_aipw(data, pfit, fit0, fit1, eps_den=cfg.eps_den)
        return dhat, {"fit0": fit0, "fit1": fit1, "propensity_fit": pfit}
    raise ValueError(f"unknown method {method!r}")


def run_replicate(design: SimDesign, rep_index: int,
                  methods=DEFAULT_TABLE_METHODS,
                  cfg: SearchConfig | None = None, *,
                  delta_tau: float = DEFAULT_DELTA_TAU,
                  bootstrap_scheme: str = "multinomial",
                  clip_bound: float = 0.01) -> ReplicateResult:
    """Run every requested method on one freshly generated replicate.

    All methods see the same dataset; arm-mean and propensity searches are
    computed once and shared by the methods that need them; each method's
    effect-subspace search draws its own seed stream. When the design asks
    for bootstrap replicates (``n_bootstrap >= 2``) and the regression
    method succeeded, its fit is bootstrapped at the design's evaluation
    point.

    Per-method failures are recorded on the result, not raised.
    """
    cfg = cfg or default_sim_config()
    methods = _validated_methods(methods)
    started = time.perf_counter()
    data, truth = generate(design, rep_index)
    x0 = design.eval_array()
    shared = _SharedStages(design, rep_index, data, cfg, clip_bound)

    records: dict[str, MethodReplicate] = {}
    regression_fit = None
    for method in methods:
        t0 = time.perf_counter()
        try:
            dhat, component_fits = _method_inputs(method, data, truth, shared, cfg)
            fit = fit_cate_from_imputed(
                data, dhat, cfg, delta_tau=delta_tau,
                seed=replicate_seed(design.base_seed, rep_index,
                                    METHOD_SEED_IDS[method]),
                **component_fits)
            tau_hat, fallback = tau_at(fit, data, x0, return_flag=True)
            records[method] = MethodReplicate(
                method=method,
                ok=True,
                d_hat=fit.fit_tau.d,
                subspace_mse=projector_mse(fit.fit_tau.directions, truth.b_tau),
                tau_hat=float(tau_hat),
                smoothing_fallback=bool(fallback),
                elapsed=time.perf_counter() - t0,
            )
            if method == "regression":
                regression_fit = fit
        except _REPLICATE_ERRORS as exc:
            records[method] = MethodReplicate(
                method=method,
                ok=False,
                elapsed=time.perf_counter() - t0,
                error=f"{type(exc).__name__}: {exc}",
                stage=getattr(exc, "stage", None),
            )

    bootstrap_record = None
    if design.n_bootstrap >= 2 and "regression" in methods:
        t0 = time.perf_counter()
        if regression_fit is None:
            failed = records["regression"]
            bootstrap_record = BootstrapReplicate(
                ok=False, elapsed=0.0,
                error=f"regression fit unavailable: {failed.error}",
                stage=failed.stage)
        else:
            try:
                boot = bootstrap_tau(
                    regression_fit, data, x0,
                    n_replicates=design.n_bootstrap,
                    scheme=bootstrap_scheme,
                    seed=replicate_seed(design.base_seed, rep_index,
                                        _BOOTSTRAP_SEED_ID))
                bootstrap_record = BootstrapReplicate(
                    ok=True,
                    point=boot.point,
                    se=boot.se,
                    replicates=tuple(float(v) for v in boot.replicates),
                    n_excluded=boot.n_excluded,
                    elapsed=time.perf_counter() - t0,
                    diagnostics=dict(boot.diagnostics),
                )
            except _REPLICATE_ERRORS as exc:
                bootstrap_record = BootstrapReplicate(
                    ok=False,
                    elapsed=time.perf_counter() - t0,
                    error=f"{type(exc).__name__}: {exc}",
                    stage=getattr(exc, "stage", None),
                )

    return ReplicateResult(
        rep_index=int(rep_index),
        n_treated=int(np.sum(data.a)),
        methods=records,
        bootstrap=bootstrap_record,
        elapsed=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# Caching and the replication loop


def _study_fingerprint(design: SimDesign, methods, cfg: SearchConfig,
                       delta_tau: float, bootstrap_scheme: str,
                       clip_bound: float) -> dict:
    design_echo = design.to_dict()
    # The replicate count selects how many replicates run, not what any one
    # of them contains, so caches remain valid when the study is extended.
    del design_echo["n_replications"]
    return {
        "design": design_echo,
        "methods": list(methods),
        "delta_tau": float(delta_tau),
        "bootstrap_scheme": str(bootstrap_scheme),
        "clip_bound": float(clip_bound),
        "search": plain_data(dataclasses.asdict(cfg)),
    }


def _cache_path(cache_dir: Path, design: SimDesign, rep_index: int) -> Path:
    return cache_dir / f"{design.model}_n{design.n}_rep{rep_index:05d}.json"


def _load_cached(path: Path, fingerprint: dict) -> ReplicateResult | None:
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("fingerprint") != fingerprint:
        raise ValueError(
            f"cached replicate {path} was produced under a different "
            "study configuration; use a fresh cache directory")
    return ReplicateResult.from_dict(payload["result"])


def _store_cached(path: Path, fingerprint: dict, result: ReplicateResult) -> None:
    payload = {"fingerprint": fingerprint, "result": result.to_dict()}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def run_replications(design: SimDesign, methods=DEFAULT_TABLE_METHODS,
                     cfg: SearchConfig | None = None, *,
                     delta_tau: float = DEFAULT_DELTA_TAU,
                     bootstrap_scheme: str = "multinomial",
                     clip_bound: float = 0.01,
                     cache_dir=None, workers: int = 1,
                     progress=None) -> list[ReplicateResult]:
    """Run (or resume) all replicates of a design and return them in order.

    With ``cache_dir`` set, each finished replicate is stored as one JSON
    file and picked up on the next run; a cache written under a different
    design, method list, or configuration is refused. ``progress`` is an
    optional callable receiving ``(result, cached)`` after each replicate.
    """
    cfg = cfg or default_sim_config()
    methods = _validated_methods(methods)
    fingerprint = _study_fingerprint(design, methods, cfg, delta_tau,
                                     bootstrap_scheme, clip_bound)
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)

    def one(rep_index: int) -> ReplicateResult:
        if cache is not None:
            found = _load_cached(_cache_path(cache, design, rep_index),
                                 fingerprint)
            if found is not None:
                if progress is not None:
                    progress(found, True)
                return found
        result = run_replicate(
            design, rep_index, methods, cfg, delta_tau=delta_tau,
            bootstrap_scheme=bootstrap_scheme, clip_bound=clip_bound)
        if cache is not None:
            _store_cached(_cache_path(cache, design, rep_index),
                          fingerprint, result)
        if progress is not None:
            progress(result, False)
        return result

    indices = range(design.n_replications)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, indices))
    return [one(r) for r in indices]


# ---------------------------------------------------------------------------
# Tables


@dataclass
class SimTable:
    """One aggregated study table plus its provenance.

    ``rows`` hold one dict per table row keyed by ``columns``;
    ``failures`` lists every excluded method-replicate. Rendering is
    deterministic, so identical studies produce byte-identical output.
    """

    name: str
    config: dict
    columns: tuple[str, ...]
    rows: list[dict]
    n_replications: int
    n_failed: int
    n_cells: int
    failures: list[dict] = field(default_factory=list)

    def failure_rate(self) -> float:
        """Failed method-replicates over all attempted method-replicates."""
        return self.n_failed / self.n_cells if self.n_cells else 0.0

    def _config_lines(self) -> list[str]:
        flat: dict[str, object] = {}

        def walk(prefix: str, value):
            if isinstance(value, dict):
                for key in sorted(value):
                    walk(f"{prefix}.{key}" if prefix else str(key), value[key])
            else:
                flat[prefix] = value

        walk("", self.config)
        return [f"# {key}={flat[key]!r}" for key in sorted(flat)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in self._config_lines():
            buf.write(line + "\n")
        buf.write(f"# failure_rate={self.failure_rate()!r}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_csv_cell(row[col]) for col in self.columns])
        return buf.getvalue()

    def to_text(self, float_digits: int = 4) -> str:
        cells = [[_text_cell(row[col], float_digits) for col in self.columns]
                 for row in self.rows]
        widths = [max(len(col), *(len(r[i]) for r in cells)) if cells
                  else len(col)
                  for i, col in enumerate(self.columns)]
        lines = [f"{self.name}  "
                 f"(replications={self.n_replications}, "
                 f"failed={self.n_failed}/{self.n_cells})"]
        lines += self._config_lines()
        header = "  ".join(col.ljust(widths[i])
                           for i, col in enumerate(self.columns))
        lines.append(header)
        lines.append("-" * len(header))
        for r in cells:
            lines.append("  ".join(
                r[i].ljust(widths[i]) if i == 0 else r[i].rjust(widths[i])
                for i in range(len(self.columns))).rstrip())
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def write_text(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _text_cell(value, float_digits: int) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{float_digits}f}"
    return str(value)


def _collect_failures(methods, results) -> tuple[list[dict], int]:
    failures = []
    for result in results:
        for method in methods:
            rec = result.methods.get(method)
            if rec is None:
                raise ValueError(
                    f"replicate {result.rep_index} has no record for "
                    f"method {method!r}")
            if not rec.ok:
                failures.append({
                    "rep_index": result.rep_index,
                    "method": method,
                    "stage": rec.stage,
                    "error": rec.error,
                })
    return failures, len(results) * len(methods)


def _table_config(design: SimDesign, extra: dict) -> dict:
    config = design.to_dict()
    config.update(extra)
    return config


def table1_from_results(design: SimDesign, methods, results,
                        *, max_bin: int = 4) -> SimTable:
    """Aggregate dimension-selection proportions and subspace accuracy.

    Per method: the share of successful replicates selecting each effect
    dimension (topmost bin pools ``>= max_bin``) and the mean squared
    projector distance to the true effect subspace, wrong-dimension
    replicates included.
    """
    methods = _validated_methods(methods)
    failures, n_cells = _collect_failures(methods, results)
    bin_labels = [f"prop_d{b}" for b in range(max_bin)] + [f"prop_d{max_bin}plus"]
    columns = ("method", "n_ok", "n_failed", *bin_labels, "subspace_mse")
    rows = []
    for method in methods:
        recs = [r.methods[method] for r in results]
        ok = [rec for rec in recs if rec.ok]
        counts = [0] * (max_bin + 1)
        for rec in ok:
            counts[min(rec.d_hat, max_bin)] += 1
        n_ok = len(ok)
        row = {
            "method": method,
            "n_ok": n_ok,
            "n_failed": len(recs) - n_ok,
            "subspace_mse": (float(np.mean([rec.subspace_mse for rec in ok]))
                             if ok else None),
        }
        for label, count in zip(bin_labels, counts):
            row[label] = count / n_ok if n_ok else None
        rows.append(row)
    return SimTable(
        name="dimension selection and subspace accuracy",
        config=_table_config(design, {"methods": list(methods),
                                      "true_d": true_dimension(design.model)}),
        columns=columns,
        rows=rows,
        n_replications=len(results),
        n_failed=len(failures),
        n_cells=n_cells,
        failures=failures,
    )


def table2_from_results(design: SimDesign, methods, results) -> SimTable:
    """Aggregate point-estimate accuracy at the design's evaluation point.

    Per method over successful replicates: mean and sample standard
    deviation of the estimates, and mean squared error about the true
    effect value at the evaluation point.
    """
    methods = _validated_methods(methods)
    failures, n_cells = _collect_failures(methods, results)
    truth_value = float(tau_function(design.model, design.eval_array())[0])
    columns = ("method", "n_ok", "n_failed", "mean", "sd", "mse")
    rows = []
    for method in methods:
        recs = [r.methods[method] for r in results]
        values = np.asarray([rec.tau_hat for rec in recs if rec.ok],
                            dtype=np.float64)
        n_ok = len(values)
        rows.append({
            "method": method,
            "n_ok": n_ok,
            "n_failed": len(recs) - n_ok,
            "mean": float(np.mean(values)) if n_ok else None,
            "sd": float(np.std(values, ddof=1)) if n_ok >= 2 else None,
            "mse": (float(np.mean((values - truth_value) ** 2))
                    if n_ok else None),
        })
    return SimTable(
        name="effect estimates at the evaluation point",
        config=_table_config(design, {"methods": list(methods),
                                      "true_value": truth_value}),
        columns=columns,
        rows=rows,
        n_replications=len(results),
        n_failed=len(failures),
        n_cells=n_cells,
        failures=failures,
    )


def table3_from_results(design: SimDesign, results,
                        *, alphas=(0.05,)) -> SimTable:
    """Aggregate bootstrap standard errors and interval coverage.

    One row per nominal level: the replication standard deviation of the
    point estimates, the mean bootstrap standard error, the mean replicate
    quantile interval, and the empirical coverage of the normal-type and
    quantile-type intervals for the true effect value at the evaluation
    point.
    """
    alphas = tuple(float(a) for a in alphas)
    if not alphas or not all(0.0 < a < 1.0 for a in alphas):
        raise ValueError(f"nominal levels must lie in (0, 1), got {alphas!r}")
    records = []
    failures = []
    for result in results:
        boot = result.bootstrap
        if boot is None:
            raise ValueError(
                f"replicate {result.rep_index} has no bootstrap record; "
                "run the study with n_bootstrap >= 2")
        if boot.ok:
            records.append(boot)
        else:
            failures.append({
                "rep_index": result.rep_index,
                "method": "bootstrap",
                "stage": boot.stage,
                "error": boot.error,
            })
    truth_value = float(tau_function(design.model, design.eval_array())[0])
    points = np.asarray([b.point for b in records], dtype=np.float64)
    n_ok = len(records)
    columns = ("alpha", "n_ok", "n_failed", "sd", "mean_se",
               "quantile_lo", "quantile_hi",
               "normal_coverage", "quantile_coverage", "mean_excluded")
    rows = []
    for alpha in alphas:
        normal_hits = 0
        quantile_hits = 0
        quantile_los = []
        quantile_his = []
        for boot in records:
            normal_ci, quantile_ci, quantile_interval = confidence_intervals(
                boot.point, np.asarray(boot.replicates), alpha, boot.se)
            if normal_ci[0] <= truth_value <= normal_ci[1]:
                normal_hits += 1
            if quantile_ci[0] <= truth_value <= quantile_ci[1]:
                quantile_hits += 1
            quantile_los.append(quantile_interval[0])
            quantile_his.append(quantile_interval[1])
        rows.append({
            "alpha": alpha,
            "n_ok": n_ok,
            "n_failed": len(failures),
            "sd": float(np.std(points, ddof=1)) if n_ok >= 2 else None,
            "mean_se": (float(np.mean([b.se for b in records]))
                        if n_ok else None),
            "quantile_lo": float(np.mean(quantile_los)) if n_ok else None,
            "quantile_hi": float(np.mean(quantile_his)) if n_ok else None,
            "normal_coverage": normal_hits / n_ok if n_ok else None,
            "quantile_coverage": quantile_hits / n_ok if n_ok else None,
            "mean_excluded": (float(np.mean([b.n_excluded for b in records]))
                              if n_ok else None),
        })
    return SimTable(
        name="bootstrap standard errors and interval coverage",
        config=_table_config(design, {"alphas": list(alphas),
                                      "true_value": truth_value,
                                      "estimator": "regression"}),
        columns=columns,
        rows=rows,
        n_replications=len(results),
        n_failed=len(failures),
        n_cells=len(results),
        failures=failures,
    )


def run_table1(design: SimDesign, methods=DEFAULT_TABLE_METHODS,
               cfg: SearchConfig | None = None, *,
               delta_tau: float = DEFAULT_DELTA_TAU,
               cache_dir=None, workers: int = 1, progress=None) -> SimTable:
    """Run the study and aggregate dimension selection per method."""
    results = run_replications(design, methods, cfg, delta_tau=delta_tau,
                               cache_dir=cache_dir, workers=workers,
                               progress=progress)
    return table1_from_results(design, methods, results)


def run_table2(design: SimDesign, methods=DEFAULT_TABLE_METHODS,
               cfg: SearchConfig | None = None, *,
               delta_tau: float = DEFAULT_DELTA_TAU,
               cache_dir=None, workers: int = 1, progress=None) -> SimTable:
    """Run the study and aggregate point-estimate accuracy per method."""
    results = run_replications(design, methods, cfg, delta_tau=delta_tau,
                               cache_dir=cache_dir, workers=workers,
                               progress=progress)
    return table2_from_results(design, methods, results)


def run_table3(design: SimDesign, methods=DEFAULT_TABLE_METHODS,
               cfg: SearchConfig | None = None, *,
               alphas=(0.05,), delta_tau: float = DEFAULT_DELTA_TAU,
               bootstrap_scheme: str = "multinomial",
               cache_dir=None, workers: int = 1, progress=None) -> SimTable:
    """Run the study and aggregate bootstrap inference for the regression fit."""
    if design.n_bootstrap < 2:
        raise ValueError(
            "bootstrap table needs a design with n_bootstrap >= 2, "
            f"got {design.n_bootstrap}")
    if "regression" not in methods:
        raise ValueError("bootstrap table needs the regression method")
    results = run_replications(design, methods, cfg, delta_tau=delta_tau,
                               bootstrap_scheme=bootstrap_scheme,
                               cache_dir=cache_dir, workers=workers,
                               progress=progress)
    return table3_from_results(design, results, alphas=alphas)


def write_replicate_log(results, path) -> None:
    """Write one CSV row per method-replicate (plus bootstrap rows)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep_index", "record", "ok", "d_hat", "subspace_mse",
                         "tau_hat", "se", "n_excluded", "smoothing_fallback",
                         "elapsed", "stage", "error"])
        for result in results:
            for method, rec in result.methods.items():
                writer.writerow([
                    result.rep_index, method, int(rec.ok),
                    _csv_cell(rec.d_hat), _csv_cell(rec.subspace_mse),
                    _csv_cell(rec.tau_hat), "", "",
                    _csv_cell(rec.smoothing_fallback),
                    repr(rec.elapsed), _csv_cell(rec.stage),
                    _csv_cell(rec.error),
                ])
            boot = result.bootstrap
            if boot is not None:
                writer.writerow([
                    result.rep_index, "bootstrap", int(boot.ok), "", "",
                    _csv_cell(boot.point), _csv_cell(boot.se),
                    boot.n_excluded, "", repr(boot.elapsed),
                    _csv_cell(boot.stage), _csv_cell(boot.error),
                ])
