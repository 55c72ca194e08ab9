"""Weighted-bootstrap inference for the fitted effect surface.

Each replicate re-draws one exchangeable weight per subject and recomputes
the imputed contrasts and their smooth at the evaluation point with every
estimated index subspace, kernel order, and bandwidth HELD FIXED — no
subspace search runs inside a replicate. The spread of the replicates
yields the standard error and the confidence intervals.

Replicate weights come from counter-based per-replicate streams derived
from one seed, so results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._nwcore import index_values, kernel_cross, weighted_ratio_rows
from .data_model import Dataset, basis_matrix, plain_data
from .kernels import build_kernel
from .pipeline import CateFit, tau_at

__all__ = [
    "BOOTSTRAP_RESULT_SCHEMA",
    "BOOTSTRAP_RESULT_SCHEMA_VERSION",
    "DEGENERATE_DEN_RATIO",
    "WEIGHT_SCHEME_KINDS",
    "BootstrapResult",
    "WeightScheme",
    "bootstrap_tau",
    "confidence_intervals",
    "draw_weights",
    "weight_scheme",
]

#: "constant" is a degenerate test hook: every weight equals one, so each
#: replicate reproduces the original estimate exactly.
WEIGHT_SCHEME_KINDS = ("multinomial", "exponential", "constant")

BOOTSTRAP_RESULT_SCHEMA = "drcate.bootstrap_result"
BOOTSTRAP_RESULT_SCHEMA_VERSION = 1

#: A weighted kernel denominator is degenerate when it keeps less than this
#: fraction of its unweighted magnitude: the drawn weights then wiped out
#: the ratio's effective donor pool, and with higher-order (sign-changing)
#: kernels the near-cancelled denominator makes the ratio explode rather
#: than fail. Replicate spread is insensitive to the exact fraction over
#: roughly 0.05-0.2; 0.1 marks an order-of-magnitude collapse. A degenerate
#: re-imputation row keeps its original fitted value; a degenerate final
#: ratio at the evaluation point marks the replicate for redraw/exclusion.
#: Equal weights keep every denominator at its unweighted value, so the
#: exact-reproduction identity is unaffected.
DEGENERATE_DEN_RATIO = 0.1


@dataclass(frozen=True)
class WeightScheme:
    """Exchangeable bootstrap-weight distribution.

    ``mu_xi`` / ``sigma_xi`` are the raw-weight mean and standard deviation
    used in the standard-error scaling mu/sigma. Multinomial counts have
    mean 1 and variance 1 - 1/n; the 1/n correction is negligible, so both
    supported kinds carry unit scaling.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in WEIGHT_SCHEME_KINDS:
            raise ValueError(
                f"weight scheme must be one of {WEIGHT_SCHEME_KINDS}, "
                f"got {self.kind!r}")

    @property
    def mu_xi(self) -> float:
        return 1.0

    @property
    def sigma_xi(self) -> float:
        return 1.0

    def draw_xi(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """One vector of raw (unnormalized) weights."""
        if n < 1:
            raise ValueError(f"need n >= 1 subjects, got {n}")
        if self.kind == "multinomial":
            counts = rng.multinomial(n, np.full(n, 1.0 / n))
            return counts.astype(np.float64)
        if self.kind == "exponential":
            return rng.standard_exponential(n)
        return np.ones(n)


def weight_scheme(spec) -> WeightScheme:
    """Coerce a kind string (or pass through a scheme) to a `WeightScheme`."""
    if isinstance(spec, WeightScheme):
        return spec
    return WeightScheme(kind=str(spec))


def _as_rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def draw_weights(scheme, n: int, rng_state) -> np.ndarray:
    """One draw of exchangeable weights normalized to sum to one.

    Multinomial weights are occupation counts divided by n (their float sum
    is exactly one); exponential weights are iid standard exponentials
    divided by their sum.
    """
    scheme = weight_scheme(scheme)
    xi = scheme.draw_xi(n, _as_rng(rng_state))
    return xi / xi.sum()


# ---------------------------------------------------------------------------
# Intervals


def confidence_intervals(point: float, replicates, alpha: float, se: float):
    """(normal-type CI, reflected quantile-type CI, plain quantile interval).

    The normal-type interval is ``point +- z_{1-alpha/2} se``. The quantile
    interval takes the empirical alpha/2 and 1-alpha/2 quantiles of the
    replicates as order statistics (no interpolation); the quantile-type CI
    reflects that interval through the point (basic bootstrap).
    """
    replicates = np.asarray(replicates, dtype=np.float64)
    if replicates.ndim != 1 or len(replicates) < 2:
        raise ValueError(
            f"need >= 2 replicates for intervals, got shape {replicates.shape}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * se
    normal_ci = (point - half, point + half)
    lo = float(np.quantile(replicates, alpha / 2.0, method="inverted_cdf"))
    hi = float(np.quantile(replicates, 1.0 - alpha / 2.0, method="inverted_cdf"))
    quantile_interval = (lo, hi)
    quantile_ci = (2.0 * point - hi, 2.0 * point - lo)
    return normal_ci, quantile_ci, quantile_interval


# ---------------------------------------------------------------------------
# Result container


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate spread and intervals for the effect estimate at one point.

    ``replicates`` holds the retained replicate estimates in replicate-index
    order (None when serialized without them); ``n_replicates`` counts them;
    ``n_excluded`` counts replicates dropped after one degenerate retry.
    """

    point: float
    se: float
    normal_ci: tuple[float, float]
    quantile_ci: tuple[float, float]
    quantile_interval: tuple[float, float]
    alpha: float
    n_replicates: int
    scheme: str
    replicates: np.ndarray | None = None
    n_excluded: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.se >= 0.0):
            raise ValueError(f"standard error must be >= 0, got {self.se}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_replicates < 2:
            raise ValueError(
                f"need >= 2 retained replicates, got {self.n_replicates}")
        if self.n_excluded < 0:
            raise ValueError("exclusion count cannot be negative")
        weight_scheme(self.scheme)
        if self.replicates is not None:
            values = np.asarray(self.replicates, dtype=np.float64)
            if values.shape != (self.n_replicates,):
                raise ValueError(
                    f"replicates have shape {values.shape}, expected "
                    f"({self.n_replicates},)")
            object.__setattr__(self, "replicates", values)
        for name in ("normal_ci", "quantile_ci", "quantile_interval"):
            pair = getattr(self, name)
            if len(pair) != 2:
                raise ValueError(f"{name} must be a pair")
            object.__setattr__(self, name, (float(pair[0]), float(pair[1])))

    # -- serialization ------------------------------------------------------

    def to_dict(self, include_replicates: bool = True) -> dict:
        payload = {
            "schema": BOOTSTRAP_RESULT_SCHEMA,
            "version": BOOTSTRAP_RESULT_SCHEMA_VERSION,
            "point": float(self.point),
            "se": float(self.se),
            "normal_ci": [float(v) for v in self.normal_ci],
            "quantile_ci": [float(v) for v in self.quantile_ci],
            "quantile_interval": [float(v) for v in self.quantile_interval],
            "alpha": float(self.alpha),
            "n_replicates": int(self.n_replicates),
            "scheme": self.scheme,
            "n_excluded": int(self.n_excluded),
            "diagnostics": plain_data(self.diagnostics),
            "replicates": None,
        }
        if include_replicates and self.replicates is not None:
            payload["replicates"] = [float(v) for v in self.replicates]
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "BootstrapResult":
        schema = payload.get("schema")
        if schema != BOOTSTRAP_RESULT_SCHEMA:
            raise ValueError(f"unrecognized result schema {schema!r}")
        version = payload.get("version")
        if version != BOOTSTRAP_RESULT_SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema version {version!r}")
        reps = payload.get("replicates")
        return cls(
            point=float(payload["point"]),
            se=float(payload["se"]),
            normal_ci=tuple(payload["normal_ci"]),
            quantile_ci=tuple(payload["quantile_ci"]),
            quantile_interval=tuple(payload["quantile_interval"]),
            alpha=float(payload["alpha"]),
            n_replicates=int(payload["n_replicates"]),
            scheme=str(payload["scheme"]),
            replicates=None if reps is None else np.asarray(reps, dtype=np.float64),
            n_excluded=int(payload.get("n_excluded", 0)),
            diagnostics=dict(payload.get("diagnostics", {})),
        )

    def to_json(self, include_replicates: bool = True) -> str:
        return json.dumps(self.to_dict(include_replicates), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BootstrapResult":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Replicate engine


class _ReplicateEngine:
    """Precomputed kernel geometry for weighted re-estimation at one point.

    All index values and kernel-weight matrices depend only on the fitted
    subspaces, orders, and bandwidths, so they are computed once; each
    replicate only re-draws subject weights and re-runs the weighted ratio
    sums. With unit weights those sums reproduce the unweighted fitted
    values bit for bit (and no denominator can count as collapsed, since
    each sits at its own reference magnitude).
    """

    def __init__(self, fit: CateFit, data: Dataset, x: np.ndarray):
        if fit.method != "regression" or fit.fit0 is None or fit.fit1 is None:
            raise ValueError(
                "bootstrap requires a fit with regression-imputation "
                f"provenance (arm subspace fits present), got method "
                f"{fit.method!r}")
        if data.n != fit.fit_tau.n_fit:
            raise ValueError(
                f"data have n={data.n}, fit was built on n={fit.fit_tau.n_fit}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (data.p,):
            raise ValueError(
                f"evaluation point must have shape ({data.p},), got {x.shape}")

        self.n = data.n
        self.eps_den = fit.eps_den
        self.treated = data.group_index(1)
        self.control = data.group_index(0)
        self.y_treated = np.ascontiguousarray(data.y[self.treated])
        self.y_control = np.ascontiguousarray(data.y[self.control])

        info = fit.dhat.info
        # arm a smooths its own group's responses, evaluated at the rows
        # that need the opposite-arm counterfactual
        self.cross = []
        for arm, fit_arm, rows in ((0, fit.fit0, self.treated),
                                   (1, fit.fit1, self.control)):
            order = info[f"kernel_order_{arm}"]
            bandwidth = info[f"bandwidth_{arm}"]
            mat = basis_matrix(fit_arm.directions, data.p)
            idx = data.group_index(arm)
            u_own = index_values(np.ascontiguousarray(data.x[idx]), mat)
            u_eval = index_values(np.ascontiguousarray(data.x[rows]), mat)
            kmat = kernel_cross(u_eval, u_own, 1.0 / bandwidth,
                                build_kernel(order).coeffs_array())
            resp = np.ascontiguousarray(data.y[idx])
            # unweighted denominator scale and fitted values per row: the
            # reference for spotting weight-induced denominator collapse
            den_base = np.abs(kmat.sum(axis=1))
            mu_base, _ = weighted_ratio_rows(kmat, resp,
                                             np.ones(len(idx)), self.eps_den)
            self.cross.append((kmat, resp, idx, den_base, mu_base))

        mat_tau = basis_matrix(fit.fit_tau.directions, data.p)
        u_all = index_values(np.ascontiguousarray(data.x), mat_tau)
        u_x = index_values(np.ascontiguousarray(x[None, :]), mat_tau)
        self.kmat_tau = kernel_cross(u_x, u_all, 1.0 / fit.h_tau,
                                     build_kernel(fit.q_tau).coeffs_array())
        self.tau_den_base = abs(float(self.kmat_tau.sum()))

    def replicate(self, xi: np.ndarray):
        """(tau* at x, degenerate flag, fallback rows, stabilized rows).

        A re-imputation row whose weighted denominator collapses below
        `DEGENERATE_DEN_RATIO` of its unweighted magnitude keeps the
        original fitted arm mean (counted as stabilized); the replicate is
        degenerate when the final ratio's denominator at the evaluation
        point collapses the same way or underflows outright.
        """
        values = np.empty(self.n)
        n_degenerate = 0
        n_stabilized = 0
        for arm, (kmat, resp, idx, den_base, mu_base) in enumerate(self.cross):
            xi_arm = xi[idx]
            mu, flags = weighted_ratio_rows(kmat, resp, xi_arm, self.eps_den)
            collapsed = np.abs(kmat @ xi_arm) < DEGENERATE_DEN_RATIO * den_base
            if collapsed.any():
                mu = np.where(collapsed, mu_base, mu)
                n_stabilized += int(collapsed.sum())
            n_degenerate += int(flags.sum())
            if arm == 0:
                values[self.treated] = self.y_treated - mu
            else:
                values[self.control] = mu - self.y_control
        out, flags = weighted_ratio_rows(self.kmat_tau, values, xi,
                                         self.eps_den)
        tau_den = abs(float(self.kmat_tau[0] @ xi))
        degenerate = bool(flags[0]) or \
            tau_den < DEGENERATE_DEN_RATIO * self.tau_den_base
        return float(out[0]), degenerate, n_degenerate, n_stabilized


def _replicate_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), k])))


def bootstrap_tau(fit: CateFit, data: Dataset, x, n_replicates: int = 200,
                  scheme="multinomial", alpha: float = 0.05, seed: int = 0,
                  workers: int = 1) -> BootstrapResult:
    """Weighted-bootstrap spread of the effect estimate at point ``x``.

    Every replicate draws fresh exchangeable subject weights, re-imputes the
    contrasts through weight-scaled arm regressions at the ORIGINAL fitted
    subspaces, orders and bandwidths, and re-smooths at ``x`` with the
    original final-stage settings. Weighted denominators are compared
    against their unweighted magnitudes (`DEGENERATE_DEN_RATIO`): a
    collapsed re-imputation row keeps its original fitted arm mean
    (reported as stabilized rows), and a replicate whose final ratio
    collapses at ``x`` is redrawn once and then excluded (counted).

    Args:
        fit: Regression-method fit carrying both arm subspace fits.
        data: The sample the fit was computed on.
        x: Evaluation point, length p.
        n_replicates: Number of replicate draws.
        scheme: Weight scheme kind or `WeightScheme`.
        alpha: Interval miscoverage level.
        seed: Base seed; replicate k uses a counter-based stream derived
            from (seed, k).
        workers: Thread count over replicates; results are assembled in
            replicate order, so the value never affects the output.

    Returns:
        `BootstrapResult` with retained replicates in replicate order.
    """
    scheme = weight_scheme(scheme)
    if n_replicates < 2:
        raise ValueError(f"need >= 2 replicates, got {n_replicates}")
    engine = _ReplicateEngine(fit, data, np.asarray(x, dtype=np.float64))

    def one(k: int):
        rng = _replicate_rng(seed, k)
        attempts = 0
        while True:
            xi = scheme.draw_xi(engine.n, rng)
            value, degenerate, n_rows, n_stab = engine.replicate(xi)
            attempts += 1
            if not degenerate or attempts == 2:
                return value, degenerate, n_rows, n_stab, attempts - 1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(one, range(n_replicates)))
    else:
        raw = [one(k) for k in range(n_replicates)]

    replicates = np.array([value for value, degenerate, _, _, _ in raw
                           if not degenerate])
    n_excluded = int(sum(degenerate for _, degenerate, _, _, _ in raw))
    n_retried = int(sum(retries for *_, retries in raw))
    n_degenerate_rows = int(sum(rows for _, _, rows, _, _ in raw))
    n_stabilized_rows = int(sum(stab for _, _, _, stab, _ in raw))
    if len(replicates) < 2:
        raise RuntimeError(
            f"only {len(replicates)} of {n_replicates} replicates were "
            f"non-degenerate at the evaluation point")

    point = tau_at(fit, data, np.asarray(x, dtype=np.float64))
    se = float(np.std(replicates, ddof=1)) * (scheme.mu_xi / scheme.sigma_xi)
    normal_ci, quantile_ci, quantile_interval = confidence_intervals(
        point, replicates, alpha, se)
    return BootstrapResult(
        point=point,
        se=se,
        normal_ci=normal_ci,
        quantile_ci=quantile_ci,
        quantile_interval=quantile_interval,
        alpha=alpha,
        n_replicates=len(replicates),
        scheme=scheme.kind,
        replicates=replicates,
        n_excluded=n_excluded,
        diagnostics={
            "seed": int(seed),
            "n_requested": int(n_replicates),
            "n_retried": n_retried,
            "n_degenerate_rows": n_degenerate_rows,
            "n_stabilized_rows": n_stabilized_rows,
        },
    )
