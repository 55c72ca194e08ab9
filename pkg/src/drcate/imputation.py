"""Per-subject treatment-control contrast construction.

Six strategies produce the length-n contrast vector that downstream effect
regression smooths:

- regression imputation on fitted index subspaces (the proposed route),
- nearest-neighbour matching on the full covariates,
- inverse-propensity weighting (IPW) with an index-based propensity fit,
- the augmented, doubly robust variant (AIPW),
- regression imputation with no dimension reduction (identity basis), and
- regression imputation on externally supplied (oracle) index bases.

The regression family shares one engine: each subject's counterfactual arm
mean is smoothed over the opposite group at the subject's own index point,
with kernel orders raised so the imputation smoother is strictly
higher-order than every downstream working dimension demands
(order * d > order_rule(d) * d_fit for d = 1..d_max), saturating at the
largest order the kernel family provides. Bandwidths follow the
rule-of-thumb h = 1.06 * sd(index) * n**(-1/(2*order + d)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._nwcore import index_values
from .data_model import Dataset, ImputedOutcomes, IndexBasis, basis_matrix, normalize_to_identity_top
from .kernels import build_kernel, select_kernel_order
from .regression import (
    DEFAULT_EPS_DEN,
    RegressionConfig,
    nw_group_mean_rows,
    nw_propensity,
)
from .subspace import SearchConfig, SubspaceFit, fit_subspace

__all__ = [
    "MAX_KERNEL_ORDER",
    "PropensityFit",
    "imputation_kernel_order",
    "imputation_bandwidth",
    "ipw_values",
    "aipw_values",
    "impute_regression",
    "impute_matching",
    "impute_ipw",
    "impute_aipw",
    "impute_full_x",
    "impute_oracle",
    "fit_propensity",
]

#: Largest kernel order the kernel family provides.
MAX_KERNEL_ORDER = 8

#: Rule-of-thumb bandwidth scale constant.
BANDWIDTH_SCALE = 1.06


# ---------------------------------------------------------------------------
# Kernel order and bandwidth rules


def _order_dominates(order: int, d_fit: int, d_max: int) -> bool:
    """Whether ``order`` strictly dominates every downstream working dimension.

    The requirement, in exact integer arithmetic, is
    order * d > order_rule(d) * d_fit for every d = 1..d_max.
    """
    return all(order * d > select_kernel_order(d) * d_fit
               for d in range(1, d_max + 1))


def imputation_kernel_order(d_fit: int, d_max: int,
                            cap: int = MAX_KERNEL_ORDER) -> int:
    """Kernel order for imputing with a ``d_fit``-dimensional index regression.

    Starts from the search order rule at ``d_fit`` and raises the order in
    even steps until it strictly dominates the requirement of every
    downstream working dimension d = 1..``d_max``; saturates at ``cap`` when
    the requirement is unattainable within the kernel family.
    """
    if d_fit < 1:
        raise ValueError(f"index dimension must be >= 1, got {d_fit}")
    if d_max < 1:
        raise ValueError(f"downstream dimension cap must be >= 1, got {d_max}")
    if cap < 2 or cap % 2 != 0:
        raise ValueError(f"order cap must be an even integer >= 2, got {cap}")
    order = select_kernel_order(d_fit)
    while order < cap and not _order_dominates(order, d_fit, d_max):
        order += 2
    return min(order, cap)


def imputation_bandwidth(index_sd: float, n: int, order: int, d: int) -> float:
    """Rule-of-thumb bandwidth 1.06 * index_sd * n**(-1/(2*order + d))."""
    if not (index_sd > 0.0 and np.isfinite(index_sd)):
        raise ValueError(f"index spread must be positive and finite, got {index_sd}")
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    return BANDWIDTH_SCALE * index_sd * float(n) ** (-1.0 / (2.0 * order + d))


# ---------------------------------------------------------------------------
# Shared regression-imputation engine


def _resolve_arm_settings(data: Dataset, mats: tuple[np.ndarray, np.ndarray],
                          d_max: int, orders, bandwidths, eps_den: float):
    """Per-arm (config, order, bandwidth) for the regression-imputation engine."""
    resolved = []
    condition_met = True
    for arm in (0, 1):
        mat = mats[arm]
        d = mat.shape[1]
        if orders is None:
            order = imputation_kernel_order(d, d_max)
            condition_met = condition_met and _order_dominates(order, d, d_max)
        else:
            order = int(orders[arm])
        if bandwidths is None:
            u = index_values(np.ascontiguousarray(data.x), mat)
            sd = float(u.std(axis=0).mean())
            h = imputation_bandwidth(sd, data.n, order, d)
        else:
            h = float(bandwidths[arm])
        cfg = RegressionConfig(kernel=build_kernel(order), bandwidth=h,
                               eps_den=eps_den)
        resolved.append((cfg, order, h))
    return resolved, condition_met


def _regression_contrasts(data: Dataset, mats, d_max: int, orders,
                          bandwidths, eps_den: float, method: str) -> ImputedOutcomes:
    """Contrasts from opposite-arm regression at each subject's index point."""
    settings, condition_met = _resolve_arm_settings(
        data, mats, d_max, orders, bandwidths, eps_den)
    (cfg0, q0, h0), (cfg1, q1, h1) = settings
    treated = data.group_index(1)
    control = data.group_index(0)
    mu0_at_treated, flags0 = nw_group_mean_rows(
        data, 0, mats[0], cfg0, rows=treated, return_flags=True)
    mu1_at_control, flags1 = nw_group_mean_rows(
        data, 1, mats[1], cfg1, rows=control, return_flags=True)
    values = np.empty(data.n, dtype=np.float64)
    values[treated] = data.y[treated] - mu0_at_treated
    values[control] = mu1_at_control - data.y[control]
    info = {
        "kernel_order_0": q0,
        "kernel_order_1": q1,
        "bandwidth_0": h0,
        "bandwidth_1": h1,
        "n_degenerate_0": int(flags0.sum()),
        "n_degenerate_1": int(flags1.sum()),
        "order_condition_met": int(condition_met),
    }
    return ImputedOutcomes(values=values, method=method, info=info)


def _fits_d_max(fit0: SubspaceFit, fit1: SubspaceFit) -> int:
    dims = set(fit0.cv_by_dimension) | set(fit1.cv_by_dimension)
    return max(dims) if dims else max(fit0.d, fit1.d)


def impute_regression(data: Dataset, fit0: SubspaceFit, fit1: SubspaceFit, *,
                      d_max: int | None = None, orders=None, bandwidths=None,
                      eps_den: float = DEFAULT_EPS_DEN) -> ImputedOutcomes:
    """Contrasts by imputing each subject's counterfactual arm mean.

    A treated subject's contrast is its outcome minus the control-arm
    regression at its own index point; a control subject's is the
    treated-arm regression minus its outcome. The arm regressions smooth
    over the fitted index subspaces ``fit0`` / ``fit1``.

    ``d_max`` bounds the downstream working dimensions the kernel-order rule
    must dominate (default: the largest dimension the fits searched).
    ``orders`` / ``bandwidths`` override the per-arm (group 0, group 1)
    kernel orders and bandwidths; by default orders follow
    `imputation_kernel_order` and bandwidths the rule of thumb.
    """
    for arm, fit in ((0, fit0), (1, fit1)):
        if fit.group != arm:
            raise ValueError(
                f"fit{arm} was computed for group {fit.group}, expected {arm}")
    if d_max is None:
        d_max = _fits_d_max(fit0, fit1)
    mats = (basis_matrix(fit0.directions, data.p),
            basis_matrix(fit1.directions, data.p))
    return _regression_contrasts(data, mats, d_max, orders, bandwidths,
                                 eps_den, "regression")


def impute_oracle(data: Dataset, basis0, basis1, *, d_max: int = 3,
                  orders=None, bandwidths=None,
                  eps_den: float = DEFAULT_EPS_DEN) -> ImputedOutcomes:
    """Regression imputation on externally supplied index bases.

    Skips the subspace search entirely: ``basis0`` / ``basis1`` (index bases
    or raw direction matrices) are used as given. Kernel orders and
    bandwidths follow the same rules as `impute_regression`.
    """
    mats = (basis_matrix(basis0, data.p), basis_matrix(basis1, data.p))
    return _regression_contrasts(data, mats, d_max, orders, bandwidths,
                                 eps_den, "oracle")


def impute_full_x(data: Dataset, *,
                  eps_den: float = DEFAULT_EPS_DEN) -> ImputedOutcomes:
    """Regression imputation with no dimension reduction (identity basis).

    Smooths over all p covariates directly; the kernel order follows the
    search order rule at dimension p, capped at the family's largest order,
    with the rule-of-thumb bandwidth at (order, p).
    """
    eye = np.eye(data.p)
    order = min(select_kernel_order(data.p), MAX_KERNEL_ORDER)
    return _regression_contrasts(data, (eye, eye), data.p, (order, order),
                                 None, eps_den, "full_x")


# ---------------------------------------------------------------------------
# Matching


def impute_matching(data: Dataset,
                    mode: str = "without_replacement") -> ImputedOutcomes:
    """Contrasts from one nearest-neighbour match per subject.

    Every subject is paired with one opposite-group subject by Euclidean
    distance on the full covariates; the contrast is the treated outcome of
    the pair minus its control outcome.

    ``without_replacement`` pairs greedily in ascending distance order
    (ties by subject order) until the smaller group is exhausted; subjects
    left over in the larger group fall back to their nearest opposite-group
    subject with replacement, and the fallback count is reported.
    ``with_replacement`` simply gives every subject its nearest
    opposite-group subject.
    """
    if mode not in ("without_replacement", "with_replacement"):
        raise ValueError(f"unknown matching mode {mode!r}")
    treated = data.group_index(1)
    control = data.group_index(0)
    n1, n0 = len(treated), len(control)
    diff = data.x[treated][:, None, :] - data.x[control][None, :, :]
    # Squared distances order pairs identically to Euclidean distances.
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)

    n_fallback = 0
    if mode == "with_replacement":
        match_of_treated = np.argmin(dist2, axis=1)
        match_of_control = np.argmin(dist2, axis=0)
        n_pairs = 0
    else:
        match_of_treated = np.full(n1, -1, dtype=np.int64)
        match_of_control = np.full(n0, -1, dtype=np.int64)
        order = np.argsort(dist2.ravel(), kind="stable")
        target = min(n1, n0)
        n_pairs = 0
        for flat in order:
            i, j = divmod(int(flat), n0)
            if match_of_treated[i] < 0 and match_of_control[j] < 0:
                match_of_treated[i] = j
                match_of_control[j] = i
                n_pairs += 1
                if n_pairs == target:
                    break
        for i in np.flatnonzero(match_of_treated < 0):
            match_of_treated[i] = int(np.argmin(dist2[i]))
            n_fallback += 1
        for j in np.flatnonzero(match_of_control < 0):
            match_of_control[j] = int(np.argmin(dist2[:, j]))
            n_fallback += 1

    values = np.empty(data.n, dtype=np.float64)
    values[treated] = data.y[treated] - data.y[control[match_of_treated]]
    values[control] = data.y[treated[match_of_control]] - data.y[control]
    info = {"n_pairs": int(n_pairs), "n_with_replacement": int(n_fallback)}
    return ImputedOutcomes(values=values, method="matching", info=info)


# ---------------------------------------------------------------------------
# Propensity-based contrasts


@dataclass
class PropensityFit:
    """Index-based propensity regression: directions, bandwidth, order, clip.

    ``directions`` is the evaluation basis (the bandwidth is calibrated to
    its index scale); ``basis`` exposes the identity-top renormalisation for
    reporting. Estimates are clipped into [clip_bound, 1 - clip_bound].
    """

    directions: np.ndarray
    bandwidth: float
    kernel_order: int
    clip_bound: float = 0.01
    eps_den: float = DEFAULT_EPS_DEN
    search: SubspaceFit | None = None

    def __post_init__(self):
        directions = np.ascontiguousarray(np.asarray(self.directions, dtype=np.float64))
        if directions.ndim == 1:
            directions = directions[:, None]
        if directions.ndim != 2 or directions.shape[1] < 1:
            raise ValueError("directions must be a p-by-d matrix")
        if not np.all(np.isfinite(directions)):
            raise ValueError("directions contain non-finite entries")
        directions.setflags(write=False)
        self.directions = directions
        if not (self.bandwidth > 0.0 and np.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        if self.kernel_order < 2 or self.kernel_order % 2 != 0:
            raise ValueError(f"kernel order must be an even integer >= 2, got {self.kernel_order}")
        if not (0.0 < self.clip_bound < 0.5):
            raise ValueError(f"clip bound must lie in (0, 0.5), got {self.clip_bound}")

    @property
    def p(self) -> int:
        return self.directions.shape[0]

    @property
    def d(self) -> int:
        return self.directions.shape[1]

    @property
    def basis(self) -> IndexBasis:
        """Identity-top renormalisation of the directions (reporting view)."""
        return normalize_to_identity_top(self.directions)

    def regression_config(self) -> RegressionConfig:
        return RegressionConfig(kernel=build_kernel(self.kernel_order),
                                bandwidth=self.bandwidth, eps_den=self.eps_den)

    def propensity(self, data: Dataset, u=None, return_info: bool = False):
        """Clipped treated-probability estimate at every subject (or at ``u``)."""
        return nw_propensity(data, self.directions, self.regression_config(),
                             u, pi_min=self.clip_bound, return_info=return_info)

    def to_dict(self) -> dict:
        return {
            "directions": np.asarray(self.directions).tolist(),
            "bandwidth": self.bandwidth,
            "kernel_order": self.kernel_order,
            "clip_bound": self.clip_bound,
            "eps_den": self.eps_den,
            "search": None if self.search is None else self.search.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PropensityFit":
        search = payload.get("search")
        return cls(
            directions=np.asarray(payload["directions"], dtype=np.float64),
            bandwidth=float(payload["bandwidth"]),
            kernel_order=int(payload["kernel_order"]),
            clip_bound=float(payload.get("clip_bound", 0.01)),
            eps_den=float(payload.get("eps_den", DEFAULT_EPS_DEN)),
            search=None if search is None else SubspaceFit.from_dict(search),
        )


def fit_propensity(data: Dataset, cfg: SearchConfig | None = None,
                   clip_bound: float = 0.01, seed=0) -> PropensityFit:
    """Index subspace and bandwidth for the treated-probability regression.

    Runs the subspace search with the treatment indicator as the response
    over all subjects and keeps the selected directions, bandwidth and
    kernel order for clipped propensity evaluation.
    """
    cfg = cfg or SearchConfig()
    fit = fit_subspace(None, data, objective="propensity", cfg=cfg, seed=seed)
    return PropensityFit(
        directions=fit.directions,
        bandwidth=fit.bandwidth,
        kernel_order=fit.kernel_order,
        clip_bound=clip_bound,
        eps_den=cfg.eps_den,
        search=fit,
    )


def ipw_values(a, y, pi) -> np.ndarray:
    """Inverse-propensity contrast (a - pi) * y / (pi * (1 - pi)) elementwise."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    return (a - pi) * y / (pi * (1.0 - pi))


def aipw_values(a, y, pi, mu0, mu1) -> np.ndarray:
    """Doubly robust contrast (a - pi)(y - (1-pi) mu1 - pi mu0) / (pi (1-pi)).

    Reduces exactly to `ipw_values` when both arm means are identically zero,
    and its conditional mean equals the true contrast when either the
    propensity or both arm means are correct.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    adjusted = y - (1.0 - pi) * mu1 - pi * mu0
    return (a - pi) * adjusted / (pi * (1.0 - pi))


def _resolve_propensity(data: Dataset, pfit) -> tuple[np.ndarray, dict]:
    """Clipped propensity values and diagnostics from a fit or a known vector."""
    if isinstance(pfit, PropensityFit):
        return pfit.propensity(data, return_info=True)
    pi = np.asarray(pfit, dtype=np.float64)
    if pi.shape != (data.n,):
        raise ValueError(f"propensity vector has shape {pi.shape}, expected ({data.n},)")
    if not np.all((pi > 0.0) & (pi < 1.0)):
        raise ValueError("known propensity values must lie strictly in (0, 1)")
    return pi, {"n_clipped": 0, "n_degenerate": 0}


def impute_ipw(data: Dataset, pfit) -> ImputedOutcomes:
    """Inverse-propensity-weighted contrasts.

    ``pfit`` is either a `PropensityFit` (estimated, clipped propensities)
    or a length-n vector of known propensities in (0, 1).
    """
    pi, info = _resolve_propensity(data, pfit)
    values = ipw_values(data.a, data.y, pi)
    return ImputedOutcomes(values=values, method="ipw", info=dict(info))


def impute_aipw(data: Dataset, pfit, fit0: SubspaceFit, fit1: SubspaceFit, *,
                d_max: int | None = None, orders=None, bandwidths=None,
                eps_den: float = DEFAULT_EPS_DEN) -> ImputedOutcomes:
    """Doubly robust contrasts combining propensity and arm-mean regressions.

    The arm means are smoothed exactly as in `impute_regression` (same
    kernel-order rule and rule-of-thumb bandwidths) but evaluated at every
    subject; the propensity follows `impute_ipw`.
    """
    for arm, fit in ((0, fit0), (1, fit1)):
        if fit.group != arm:
            raise ValueError(
                f"fit{arm} was computed for group {fit.group}, expected {arm}")
    if d_max is None:
        d_max = _fits_d_max(fit0, fit1)
    mats = (basis_matrix(fit0.directions, data.p),
            basis_matrix(fit1.directions, data.p))
    settings, condition_met = _resolve_arm_settings(
        data, mats, d_max, orders, bandwidths, eps_den)
    (cfg0, q0, h0), (cfg1, q1, h1) = settings
    pi, pinfo = _resolve_propensity(data, pfit)
    mu0, flags0 = nw_group_mean_rows(data, 0, mats[0], cfg0, return_flags=True)
    mu1, flags1 = nw_group_mean_rows(data, 1, mats[1], cfg1, return_flags=True)
    values = aipw_values(data.a, data.y, pi, mu0, mu1)
    info = {
        "kernel_order_0": q0,
        "kernel_order_1": q1,
        "bandwidth_0": h0,
        "bandwidth_1": h1,
        "n_degenerate_0": int(flags0.sum()),
        "n_degenerate_1": int(flags1.sum()),
        "order_condition_met": int(condition_met),
        "n_clipped": int(pinfo.get("n_clipped", 0)),
        "n_degenerate_pi": int(pinfo.get("n_degenerate", 0)),
    }
    return ImputedOutcomes(values=values, method="aipw", info=info)
