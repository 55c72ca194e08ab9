"""Kernel regression on low-dimensional index values.

All estimators are weighted ratios with compactly supported product-kernel
weights evaluated on index differences. Group-restricted versions regress the
observed response within one treatment arm; the contrast version regresses
imputed treatment-control contrasts over the full sample; the propensity
version regresses the treatment indicator and clips the result away from 0
and 1.

The index basis may be an `IndexBasis` or any p-by-d direction matrix; both
project covariate rows by the same summation path.

Degenerate denominators (below ``eps_den``, which covers the empty-
neighbourhood case and the negative sums a higher-order kernel can produce)
fall back to the relevant sample mean and are flagged. Leave-one-out variants
exclude the target subject from numerator and denominator and agree bit for
bit with recomputing the plain estimator on a dataset with that row deleted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._nwcore import index_values, nw_eval_loo, nw_eval_many, seq_mean
from .data_model import Dataset, ImputedOutcomes, basis_matrix
from .kernels import KernelSpec

__all__ = [
    "RegressionConfig",
    "nw_group_mean",
    "nw_group_mean_rows",
    "nw_group_mean_loo",
    "nw_tau",
    "nw_tau_loo",
    "nw_propensity",
]

DEFAULT_EPS_DEN = 1e-12


@dataclass(frozen=True)
class RegressionConfig:
    """Kernel, bandwidth and degeneracy threshold for one regression."""

    kernel: KernelSpec
    bandwidth: float
    eps_den: float = DEFAULT_EPS_DEN

    def __post_init__(self):
        if not (self.bandwidth > 0.0 and np.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        if not (self.eps_den > 0.0):
            raise ValueError(f"eps_den must be positive, got {self.eps_den}")


def _as_query(u, d: int) -> np.ndarray:
    q = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != d:
        raise ValueError(f"query point has {q.shape[1]} coordinates, expected {d}")
    return np.ascontiguousarray(q)


def _group_arrays(data: Dataset, a: int, mat: np.ndarray):
    idx = data.group_index(a)
    u = index_values(np.ascontiguousarray(data.x[idx]), mat)
    return idx, u, np.ascontiguousarray(data.y[idx])


def nw_group_mean(data: Dataset, a: int, basis, cfg: RegressionConfig, u,
                  return_flag: bool = False):
    """Kernel-weighted mean response of group ``a`` at index point ``u``.

    Args:
        data: Sample to smooth over.
        a: Treatment arm, 0 or 1.
        basis: Index basis or p-by-d direction matrix; ``u`` lives in its
            index space.
        cfg: Kernel/bandwidth configuration.
        u: Index point, length d.
        return_flag: If True also return whether the degenerate-denominator
            fallback (the group's sample mean) was used.
    """
    mat = basis_matrix(basis, data.p)
    _, u_g, resp = _group_arrays(data, a, mat)
    query = _as_query(u, mat.shape[1])
    values, flags = nw_eval_many(
        u_g, resp, query, 1.0 / cfg.bandwidth, _coeffs(cfg.kernel), cfg.eps_den,
        seq_mean(resp),
    )
    value = float(values[0])
    return (value, bool(flags[0])) if return_flag else value


def nw_group_mean_rows(data: Dataset, a: int, basis, cfg: RegressionConfig,
                       rows=None, return_flags: bool = False):
    """Group-``a`` regression evaluated at subjects' own index points.

    Evaluation is self-inclusive: a subject that belongs to group ``a``
    contributes to its own fitted value. ``rows`` selects the subjects to
    evaluate at (default: all subjects, in order).

    Returns the fitted values as an array; with ``return_flags`` also returns
    a boolean array marking degenerate-denominator fallbacks.
    """
    mat = basis_matrix(basis, data.p)
    _, u_g, resp = _group_arrays(data, a, mat)
    x_eval = data.x if rows is None else data.x[np.asarray(rows)]
    query = index_values(np.ascontiguousarray(x_eval), mat)
    values, flags = nw_eval_many(
        u_g, resp, query, 1.0 / cfg.bandwidth, _coeffs(cfg.kernel), cfg.eps_den,
        seq_mean(resp),
    )
    return (values, flags.astype(bool)) if return_flags else values


def nw_group_mean_loo(data: Dataset, a: int, basis, cfg: RegressionConfig,
                      i: int, return_flag: bool = False):
    """Leave-one-out group mean at subject ``i``'s own index point.

    Equals `nw_group_mean` computed on the dataset with row ``i`` removed,
    evaluated at subject ``i``'s index point; if subject ``i`` is not in
    group ``a`` the two coincide trivially (there is no self term to drop).
    """
    if not (0 <= i < data.n):
        raise ValueError(f"subject index {i} out of range for n={data.n}")
    mat = basis_matrix(basis, data.p)
    idx, u_g, resp = _group_arrays(data, a, mat)
    if data.a[i] == a:
        if len(idx) < 2:
            raise ValueError(f"group {a} minus subject {i} is empty")
        local = int(np.searchsorted(idx, i))
        value, flag = nw_eval_loo(u_g, resp, local, 1.0 / cfg.bandwidth,
                                  _coeffs(cfg.kernel), cfg.eps_den)
    else:
        query = index_values(np.ascontiguousarray(data.x[i:i + 1]), mat)
        values, flags = nw_eval_many(
            u_g, resp, query, 1.0 / cfg.bandwidth, _coeffs(cfg.kernel), cfg.eps_den,
            seq_mean(resp),
        )
        value, flag = float(values[0]), bool(flags[0])
    return (float(value), bool(flag)) if return_flag else float(value)


def _contrast_values(dhat) -> np.ndarray:
    if isinstance(dhat, ImputedOutcomes):
        return np.asarray(dhat.values, dtype=np.float64)
    return np.asarray(dhat, dtype=np.float64)


def nw_tau(data: Dataset, dhat, basis, cfg: RegressionConfig, u,
           return_flag: bool = False):
    """Kernel-weighted mean of imputed contrasts over all subjects at ``u``."""
    resp = _contrast_values(dhat)
    if resp.shape != (data.n,):
        raise ValueError(f"contrast vector has shape {resp.shape}, expected ({data.n},)")
    mat = basis_matrix(basis, data.p)
    u_all = index_values(np.ascontiguousarray(data.x), mat)
    query = _as_query(u, mat.shape[1])
    values, flags = nw_eval_many(
        u_all, resp, query, 1.0 / cfg.bandwidth, _coeffs(cfg.kernel), cfg.eps_den,
        seq_mean(resp),
    )
    value = float(values[0])
    return (value, bool(flags[0])) if return_flag else value


def nw_tau_loo(data: Dataset, dhat, basis, cfg: RegressionConfig, i: int,
               return_flag: bool = False):
    """Leave-one-out contrast regression at subject ``i``'s index point."""
    if not (0 <= i < data.n):
        raise ValueError(f"subject index {i} out of range for n={data.n}")
    resp = _contrast_values(dhat)
    if resp.shape != (data.n,):
        raise ValueError(f"contrast vector has shape {resp.shape}, expected ({data.n},)")
    mat = basis_matrix(basis, data.p)
    u_all = index_values(np.ascontiguousarray(data.x), mat)
    value, flag = nw_eval_loo(u_all, resp, i, 1.0 / cfg.bandwidth,
                              _coeffs(cfg.kernel), cfg.eps_den)
    return (float(value), bool(flag)) if return_flag else float(value)


def nw_propensity(data: Dataset, basis, cfg: RegressionConfig, u=None,
                  pi_min: float = 0.01, return_info: bool = False):
    """Kernel regression of the treatment indicator, clipped to [pi_min, 1-pi_min].

    Evaluation is self-inclusive (a subject's own indicator contributes at its
    own index point). With ``u=None`` the estimate is returned at every
    subject; otherwise at the given index points (one row per point).
    """
    if not (0.0 < pi_min < 0.5):
        raise ValueError(f"pi_min must be in (0, 0.5), got {pi_min}")
    resp = data.a.astype(np.float64)
    mat = basis_matrix(basis, data.p)
    u_all = index_values(np.ascontiguousarray(data.x), mat)
    query = u_all if u is None else _as_query(u, mat.shape[1])
    values, flags = nw_eval_many(
        u_all, resp, np.ascontiguousarray(query), 1.0 / cfg.bandwidth,
        _coeffs(cfg.kernel), cfg.eps_den, seq_mean(resp),
    )
    clipped = np.clip(values, pi_min, 1.0 - pi_min)
    if return_info:
        info = {
            "n_clipped": int(np.sum(values != clipped)),
            "n_degenerate": int(np.sum(flags)),
        }
        return clipped, info
    return clipped


def _coeffs(kernel: KernelSpec) -> np.ndarray:
    return kernel.coeffs_array()
