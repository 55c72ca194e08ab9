"""Jitted inner loops for index-space kernel regression.

Every estimator in the package reduces to weighted ratios of the form
``sum_j w_ij r_j / sum_j w_ij`` with product-kernel weights evaluated on
low-dimensional index differences. This module holds the numerically canonical
implementations:

- summation is always in ascending subject order, so leave-one-out values and
  cross-validation sums reproduce a physical delete-one-row recomputation
  bit for bit;
- index values are computed with explicit per-row dot products (never a
  blocked matrix product), so deleting rows cannot change the arithmetic of
  the remaining ones;
- product weights are accumulated coordinate-by-coordinate as
  ``w *= K(z_k * (1/h)) * (1/h)``, matching ``kernels.product_kernel``.

A separate fastmath + sorted-prefilter variant of the cross-validation sweep
exists for the subspace search's inner objective, where only the location of
the minimum matters; the exact functions here remain the public contract.
Helpers shared between the two worlds are force-inlined (``inline="always"``)
so the fastmath flag can never leak into an exact path through a shared
compiled-and-cached callee.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "index_values",
    "nw_eval_many",
    "nw_eval_loo",
    "loo_cv_grid",
    "loo_cv_grid_fast",
    "kernel_cross",
    "weighted_ratio_rows",
    "seq_mean",
]


@njit(cache=True, nogil=True)
def index_values(x, b):
    """Row-wise index values x_i^T b with fixed ascending accumulation."""
    n, p = x.shape
    d = b.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    for i in range(n):
        for j in range(d):
            acc = 0.0
            for k in range(p):
                acc += x[i, k] * b[k, j]
            out[i, j] = acc
    return out


@njit(cache=True, nogil=True, inline="always")
def _kern(c, z):
    # Same expression tree as kernels._eval_scalar.
    s = z * z
    if s >= 1.0:
        return 0.0
    om = 1.0 - s
    p = c[c.shape[0] - 1]
    for r in range(c.shape[0] - 2, -1, -1):
        p = p * s + c[r]
    return p * (om * om * om)


@njit(cache=True, nogil=True, inline="always")
def _pair_weight(u, a, bidx, inv_h, c):
    """Scaled product weight between rows a and bidx of the index matrix."""
    acc = 1.0
    for k in range(u.shape[1]):
        w = _kern(c, (u[a, k] - u[bidx, k]) * inv_h)
        if w == 0.0:
            return 0.0
        acc *= w * inv_h
    return acc


@njit(cache=True, nogil=True)
def seq_mean(resp):
    """Ascending-order mean."""
    s = 0.0
    for j in range(resp.shape[0]):
        s += resp[j]
    return s / resp.shape[0]


# inline="always" is load-bearing on every helper shared between the exact
# functions and the fastmath sweep: a separately-compiled callee is built and
# cached under whichever caller happens to compile first, and a fastmath
# caller would bake reassociated sums into the exact paths' shared overload.
# Force-inlining gives each caller its own copy under its own FP semantics.
@njit(cache=True, nogil=True, inline="always")
def _seq_mean_skip(resp, skip):
    s = 0.0
    cnt = 0
    for j in range(resp.shape[0]):
        if j != skip:
            s += resp[j]
            cnt += 1
    return s / cnt


@njit(cache=True, nogil=True)
def nw_eval_many(u_data, resp, u_query, inv_h, c, eps_den, fallback):
    """Weighted-ratio regression values at each query row.

    Sums run over all data rows in ascending order; a denominator below
    ``eps_den`` yields ``fallback`` and sets the corresponding flag.
    """
    nq = u_query.shape[0]
    n, d = u_data.shape
    values = np.empty(nq, dtype=np.float64)
    flags = np.zeros(nq, dtype=np.bool_)
    for q in range(nq):
        num = 0.0
        den = 0.0
        for j in range(n):
            acc = 1.0
            for k in range(d):
                w = _kern(c, (u_data[j, k] - u_query[q, k]) * inv_h)
                if w == 0.0:
                    acc = 0.0
                    break
                acc *= w * inv_h
            if acc != 0.0:
                num += acc * resp[j]
                den += acc
        if den < eps_den:
            values[q] = fallback
            flags[q] = True
        else:
            values[q] = num / den
    return values, flags


@njit(cache=True, nogil=True)
def nw_eval_loo(u_data, resp, i, inv_h, c, eps_den):
    """Leave-one-out regression value at data row ``i``.

    Excludes row ``i`` from numerator and denominator; the degenerate
    fallback is the ascending-order mean of the remaining responses.
    """
    n, d = u_data.shape
    num = 0.0
    den = 0.0
    for j in range(n):
        if j == i:
            continue
        acc = 1.0
        for k in range(d):
            w = _kern(c, (u_data[j, k] - u_data[i, k]) * inv_h)
            if w == 0.0:
                acc = 0.0
                break
            acc *= w * inv_h
        if acc != 0.0:
            num += acc * resp[j]
            den += acc
    if den < eps_den:
        return _seq_mean_skip(resp, i), True
    return num / den, False


@njit(cache=True, nogil=True)
def loo_cv_grid(u, resp, h_arr, c, eps_den):
    """Leave-one-out CV residual sums over an ascending bandwidth grid.

    For each bandwidth ``h_arr[l]`` computes
    ``sum_i (resp_i - loo_fit_i)**2`` where ``loo_fit_i`` is the
    leave-one-out weighted-ratio value at row i (fallback: leave-one-out
    mean). Pairs are visited once and accumulated symmetrically, which
    reproduces the ascending-order sums of `nw_eval_loo` exactly.

    Returns:
        (cv_sums, degenerate_counts), both of length ``len(h_arr)``.
    """
    n, d = u.shape
    m = h_arr.shape[0]
    num = np.zeros((n, m), dtype=np.float64)
    den = np.zeros((n, m), dtype=np.float64)
    inv_h = np.empty(m, dtype=np.float64)
    for l in range(m):
        inv_h[l] = 1.0 / h_arr[l]
    h_max = h_arr[m - 1]
    for i in range(n):
        for j in range(i + 1, n):
            zmax = 0.0
            for k in range(d):
                az = abs(u[i, k] - u[j, k])
                if az > zmax:
                    zmax = az
                    if az >= h_max:
                        break
            if zmax >= h_max:
                continue
            l0 = 0
            while h_arr[l0] <= zmax:
                l0 += 1
            for l in range(l0, m):
                acc = 1.0
                for k in range(d):
                    w = _kern(c, (u[i, k] - u[j, k]) * inv_h[l])
                    if w == 0.0:
                        acc = 0.0
                        break
                    acc *= w * inv_h[l]
                if acc != 0.0:
                    num[i, l] += acc * resp[j]
                    num[j, l] += acc * resp[i]
                    den[i, l] += acc
                    den[j, l] += acc
    cv = np.zeros(m, dtype=np.float64)
    degen = np.zeros(m, dtype=np.int64)
    for l in range(m):
        total = 0.0
        for i in range(n):
            if den[i, l] < eps_den:
                v = _seq_mean_skip(resp, i)
                degen[l] += 1
            else:
                v = num[i, l] / den[i, l]
            r = resp[i] - v
            total += r * r
        cv[l] = total
    return cv, degen


@njit(cache=True, nogil=True, fastmath=True)
def loo_cv_grid_fast(u, resp, order, u0_sorted, h_arr, c, eps_den):
    """Fastmath variant of `loo_cv_grid` used inside the subspace search.

    ``order`` sorts rows ascending by the first index coordinate and
    ``u0_sorted`` holds that sorted coordinate; pairs whose first-coordinate
    gap reaches the largest bandwidth are skipped by a forward window scan.
    Same mathematical value as `loo_cv_grid` (up to floating reassociation),
    used only to locate minima.
    """
    n, d = u.shape
    m = h_arr.shape[0]
    num = np.zeros((n, m), dtype=np.float64)
    den = np.zeros((n, m), dtype=np.float64)
    inv_h = np.empty(m, dtype=np.float64)
    for l in range(m):
        inv_h[l] = 1.0 / h_arr[l]
    h_max = h_arr[m - 1]
    for a in range(n):
        i = order[a]
        base = u0_sorted[a]
        for bpos in range(a + 1, n):
            if u0_sorted[bpos] - base >= h_max:
                break
            j = order[bpos]
            zmax = 0.0
            for k in range(d):
                az = abs(u[i, k] - u[j, k])
                if az > zmax:
                    zmax = az
                    if az >= h_max:
                        break
            if zmax >= h_max:
                continue
            l0 = 0
            while h_arr[l0] <= zmax:
                l0 += 1
            for l in range(l0, m):
                acc = 1.0
                for k in range(d):
                    w = _kern(c, (u[i, k] - u[j, k]) * inv_h[l])
                    if w == 0.0:
                        acc = 0.0
                        break
                    acc *= w * inv_h[l]
                if acc != 0.0:
                    num[i, l] += acc * resp[j]
                    num[j, l] += acc * resp[i]
                    den[i, l] += acc
                    den[j, l] += acc
    cv = np.zeros(m, dtype=np.float64)
    degen = np.zeros(m, dtype=np.int64)
    for l in range(m):
        total = 0.0
        for i in range(n):
            if den[i, l] < eps_den:
                v = _seq_mean_skip(resp, i)
                degen[l] += 1
            else:
                v = num[i, l] / den[i, l]
            r = resp[i] - v
            total += r * r
        cv[l] = total
    return cv, degen


@njit(cache=True, nogil=True)
def kernel_cross(u_query, u_data, inv_h, c):
    """Dense matrix of scaled product weights between query and data rows."""
    nq = u_query.shape[0]
    n, d = u_data.shape
    out = np.zeros((nq, n), dtype=np.float64)
    for q in range(nq):
        for j in range(n):
            acc = 1.0
            for k in range(d):
                w = _kern(c, (u_data[j, k] - u_query[q, k]) * inv_h)
                if w == 0.0:
                    acc = 0.0
                    break
                acc *= w * inv_h
            out[q, j] = acc
    return out


@njit(cache=True, nogil=True)
def weighted_ratio_rows(weights, resp, xi, eps_den):
    """Bootstrap-weighted ratio per row of a precomputed weight matrix.

    Row q evaluates ``sum_j K_qj xi_j resp_j / sum_j K_qj xi_j`` in ascending
    j order, skipping exact-zero kernel entries (mirroring how the unweighted
    evaluators skip them). Degenerate denominators fall back to the
    xi-weighted mean of ``resp`` and set the flag.
    """
    nq, n = weights.shape
    values = np.empty(nq, dtype=np.float64)
    flags = np.zeros(nq, dtype=np.bool_)
    fb_num = 0.0
    fb_den = 0.0
    for j in range(n):
        fb_num += xi[j] * resp[j]
        fb_den += xi[j]
    for q in range(nq):
        num = 0.0
        den = 0.0
        for j in range(n):
            a = weights[q, j]
            if a != 0.0:
                num += a * (xi[j] * resp[j])
                den += a * xi[j]
        if den < eps_den:
            values[q] = fb_num / fb_den if fb_den >= eps_den else seq_mean(resp)
            flags[q] = True
        else:
            values[q] = num / den
    return values, flags
