"""Tests for weighted-bootstrap inference.

Weight draws are checked against exact sum identities and MC moments; the
replicate engine against the unit-weight bitwise reduction to the original
estimate and a plain-Python weighted-smoothing oracle; interval
construction against order-statistic and reflection identities; and the
fixed-subspace guarantee by call-count instrumentation of the search.
"""

import json
import math

import numpy as np
import pytest
from scipy.stats import norm

import drcate.imputation
import drcate.pipeline
import drcate.subspace
from drcate.bootstrap import (
    BootstrapResult,
    WeightScheme,
    bootstrap_tau,
    confidence_intervals,
    draw_weights,
    weight_scheme,
)
from drcate.data_model import Dataset
from drcate.kernels import build_kernel, product_kernel
from drcate.pipeline import fit_cate, tau_at
from drcate.subspace import SearchConfig

from oracles import seq_mean_py


def mk_dataset(n=150, p=3, seed=7, noise=0.02):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, p))
    a = (rng.random(n) < 0.55).astype(np.int64)
    a[0], a[1] = 0, 1
    y0 = x[:, 0] - x[:, 1]
    y1 = 2.0 * x[:, 0] + x[:, 2]
    y = np.where(a == 1, y1, y0) + noise * rng.standard_normal(n)
    return Dataset(x=x, a=a, y=y)


DATA = mk_dataset()

FAST_CFG = SearchConfig(d_max=2, bandwidth_grid_size=6, multistart=2,
                        simplex_rel_tol=1e-4, simplex_maxiter_per_dim=80,
                        simplex_max_nfev=400)

_CACHE = {}


def regression_fit():
    if "fit" not in _CACHE:
        _CACHE["fit"] = fit_cate(DATA, FAST_CFG, method="regression", seed=3)
    return _CACHE["fit"]


# ======================================================================
# weight schemes
# ======================================================================

def test_weights_nonnegative_and_sum_to_one():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 250):
        for _ in range(25):
            w = draw_weights("multinomial", n, rng)
            assert np.all(w >= 0.0)
            # counts/n: the exact rational sum is 1, so the correctly
            # rounded float sum is exactly 1
            assert math.fsum(w) == 1.0
            w = draw_weights("exponential", n, rng)
            assert np.all(w >= 0.0)
            assert abs(math.fsum(w) - 1.0) < 1e-15


def test_single_subject_weight_is_one():
    for kind in ("multinomial", "exponential", "constant"):
        assert draw_weights(kind, 1, 3).tolist() == [1.0]


def test_multinomial_weight_moments():
    # fixed coordinate of the weight vector: mean 1/n, sd sqrt(1-1/n)/n
    n, reps = 10, 10_000
    rng = np.random.default_rng(42)
    draws = np.array([draw_weights("multinomial", n, rng)[0] for _ in range(reps)])
    mc_se = math.sqrt(1.0 - 1.0 / n) / n / math.sqrt(reps)
    assert abs(draws.mean() - 1.0 / n) < 3.0 * mc_se


def test_scheme_validation_and_scaling():
    with pytest.raises(ValueError):
        weight_scheme("gaussian")
    scheme = WeightScheme("exponential")
    assert weight_scheme(scheme) is scheme
    assert scheme.mu_xi == scheme.sigma_xi == 1.0
    with pytest.raises(ValueError):
        scheme.draw_xi(0, np.random.default_rng(0))


# ======================================================================
# interval construction
# ======================================================================

def test_normal_interval_construction():
    reps = np.random.default_rng(1).normal(0.2, 0.1, size=300)
    point, se = 0.21, 0.1
    normal_ci, _, _ = confidence_intervals(point, reps, 0.05, se)
    half = float(norm.ppf(0.975)) * se
    assert normal_ci == (point - half, point + half)
    width = normal_ci[1] - normal_ci[0]
    assert width == pytest.approx(2.0 * half, rel=1e-12)


def test_quantile_endpoints_are_order_statistics():
    rng = np.random.default_rng(5)
    for n, alpha in ((200, 0.05), (40, 0.05), (37, 0.1), (200, 0.01)):
        reps = rng.normal(size=n)
        _, _, (lo, hi) = confidence_intervals(0.0, reps, alpha, 1.0)
        srt = np.sort(reps)
        k_lo = max(1, math.ceil(alpha / 2.0 * n))
        k_hi = max(1, math.ceil((1.0 - alpha / 2.0) * n))
        assert lo == srt[k_lo - 1]
        assert hi == srt[k_hi - 1]
        assert lo in reps and hi in reps


def test_reflected_interval_identity():
    reps = np.random.default_rng(2).normal(size=101)
    point = 0.3
    _, quantile_ci, quantile_interval = confidence_intervals(point, reps, 0.05, 0.1)
    assert quantile_ci[0] == 2.0 * point - quantile_interval[1]
    assert quantile_ci[1] == 2.0 * point - quantile_interval[0]


def test_symmetric_replicates_give_symmetric_reflection():
    base = np.linspace(-1.0, 1.0, 101)
    point = 0.0
    _, quantile_ci, quantile_interval = confidence_intervals(point, base, 0.1, 1.0)
    assert quantile_ci[0] == pytest.approx(-quantile_ci[1], abs=1e-12)
    assert quantile_interval[0] == pytest.approx(-quantile_interval[1], abs=1e-12)


def test_intervals_monotone_in_alpha():
    reps = np.random.default_rng(3).normal(size=400)
    widths = {"normal": [], "reflected": [], "quantile": []}
    for alpha in (0.01, 0.05, 0.2):
        normal_ci, quantile_ci, quantile_interval = confidence_intervals(
            0.0, reps, alpha, 1.0)
        widths["normal"].append(normal_ci[1] - normal_ci[0])
        widths["reflected"].append(quantile_ci[1] - quantile_ci[0])
        widths["quantile"].append(quantile_interval[1] - quantile_interval[0])
    for key, values in widths.items():
        assert values[0] > values[1] > values[2], key


def test_identical_replicates_collapse_all_intervals():
    reps = np.full(50, 0.7)
    normal_ci, quantile_ci, quantile_interval = confidence_intervals(
        0.7, reps, 0.05, 0.0)
    assert normal_ci == (0.7, 0.7)
    assert quantile_ci == (0.7, 0.7)
    assert quantile_interval == (0.7, 0.7)


def test_interval_validation():
    with pytest.raises(ValueError):
        confidence_intervals(0.0, np.array([1.0]), 0.05, 1.0)
    for alpha in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            confidence_intervals(0.0, np.zeros(10), alpha, 1.0)


# ======================================================================
# replicate engine
# ======================================================================

def test_constant_weights_reproduce_estimate_bitwise():
    fit = regression_fit()
    x0 = np.zeros(DATA.p)
    point = tau_at(fit, DATA, x0)
    res = bootstrap_tau(fit, DATA, x0, n_replicates=5, scheme="constant", seed=9)
    assert np.all(res.replicates == point)
    assert res.point == point
    assert res.se == 0.0
    assert res.n_excluded == 0
    assert res.normal_ci == (point, point)
    assert res.quantile_ci == (point, point)
    assert res.quantile_interval == (point, point)


def test_two_identical_replicates_collapse_quantile_interval():
    fit = regression_fit()
    res = bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=2,
                        scheme="constant", seed=0)
    assert res.quantile_interval == (res.point, res.point)


def test_replicates_deterministic_and_worker_independent():
    fit = regression_fit()
    x0 = np.zeros(DATA.p)
    one = bootstrap_tau(fit, DATA, x0, n_replicates=60, seed=11)
    two = bootstrap_tau(fit, DATA, x0, n_replicates=60, seed=11)
    par = bootstrap_tau(fit, DATA, x0, n_replicates=60, seed=11, workers=3)
    other = bootstrap_tau(fit, DATA, x0, n_replicates=60, seed=12)
    assert np.array_equal(one.replicates, two.replicates)
    assert np.array_equal(one.replicates, par.replicates)
    assert not np.array_equal(one.replicates, other.replicates)


def test_se_equals_replicate_sd():
    fit = regression_fit()
    res = bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=80, seed=21)
    assert res.se == float(np.std(res.replicates, ddof=1))
    assert np.std(np.sort(res.replicates), ddof=1) == pytest.approx(res.se, rel=1e-12)


def test_no_subspace_search_inside_replicates(monkeypatch):
    fit = regression_fit()  # built before instrumentation
    calls = {"search": 0}

    real = drcate.subspace.fit_subspace

    def counted(*args, **kwargs):
        calls["search"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(drcate.subspace, "fit_subspace", counted)
    monkeypatch.setattr(drcate.pipeline, "fit_subspace", counted)
    monkeypatch.setattr(drcate.imputation, "fit_subspace", counted)
    real_start = drcate.subspace._search_one_start

    def counted_start(*args, **kwargs):
        calls["search"] += 1
        return real_start(*args, **kwargs)

    monkeypatch.setattr(drcate.subspace, "_search_one_start", counted_start)
    res = bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=40, seed=2)
    assert res.n_replicates == 40
    assert calls["search"] == 0


def weighted_nw_oracle(u_data, resp, xi, u_query, kernel, h, eps_den):
    num = 0.0
    den = 0.0
    for j in range(len(resp)):
        w = product_kernel(kernel, h, np.asarray(u_data[j]) - np.asarray(u_query))
        num += w * xi[j] * float(resp[j])
        den += w * xi[j]
    if den < eps_den:
        w_num = sum(x * float(r) for x, r in zip(xi, resp))
        return w_num / sum(xi), True, den
    return num / den, False, den


def replicate_oracle(fit, data, x0, xi):
    """Plain-Python weighted re-imputation and re-smoothing at ``x0``.

    Independently mirrors the denominator-collapse rule: a row whose
    weighted denominator keeps less than a tenth of its unit-weight
    magnitude falls back to the unit-weight fitted arm mean.
    """
    info = fit.dhat.info
    treated = data.group_index(1)
    control = data.group_index(0)
    values = np.empty(data.n)
    ones = np.ones(data.n)
    for arm, fit_arm, rows in ((0, fit.fit0, treated), (1, fit.fit1, control)):
        kernel = build_kernel(info[f"kernel_order_{arm}"])
        h = info[f"bandwidth_{arm}"]
        idx = data.group_index(arm)
        u_own = data.x[idx] @ fit_arm.directions
        resp = data.y[idx]
        for r in rows:
            u_q = data.x[r] @ fit_arm.directions
            mu, _, den = weighted_nw_oracle(u_own, resp, xi[idx], u_q,
                                            kernel, h, fit.eps_den)
            mu0, _, den0 = weighted_nw_oracle(u_own, resp, ones[idx], u_q,
                                              kernel, h, fit.eps_den)
            if abs(den) < 0.1 * abs(den0):
                mu = mu0
            values[r] = data.y[r] - mu if arm == 0 else mu - data.y[r]
    kernel = build_kernel(fit.q_tau)
    u_all = data.x @ fit.fit_tau.directions
    value, _, _ = weighted_nw_oracle(u_all, values, xi,
                                     x0 @ fit.fit_tau.directions,
                                     kernel, fit.h_tau, fit.eps_den)
    return value


def test_replicate_matches_weighted_oracle():
    fit = regression_fit()
    x0 = np.zeros(DATA.p)
    seed = 17
    res = bootstrap_tau(fit, DATA, x0, n_replicates=3, scheme="exponential",
                        seed=seed)
    for k in range(3):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        xi = weight_scheme("exponential").draw_xi(DATA.n, rng)
        assert res.replicates[k] == pytest.approx(
            replicate_oracle(fit, DATA, x0, xi), rel=1e-12)


def test_zero_weight_subjects_equal_physical_deletion():
    # a subject with weight zero drops out of every sum, so a 0/1 weight
    # vector must reproduce the estimator computed on the kept subsample
    # (same subspaces, orders, and bandwidths)
    from drcate.bootstrap import _ReplicateEngine

    fit = regression_fit()
    x0 = np.zeros(DATA.p)
    xi = np.ones(DATA.n)
    dead = [5, 17, 40, 88]
    for j in dead:
        xi[j] = 0.0
    engine = _ReplicateEngine(fit, DATA, x0)
    got, degenerate, _, n_stabilized = engine.replicate(xi)
    assert not degenerate
    assert n_stabilized == 0
    keep = np.array([j for j in range(DATA.n) if j not in dead])
    sub = Dataset(x=DATA.x[keep], a=DATA.a[keep], y=DATA.y[keep])
    want = replicate_oracle(fit, sub, x0, np.ones(len(keep)))
    assert got == pytest.approx(want, rel=1e-12)


def test_collapsed_row_keeps_original_fitted_mean():
    # wipe out the dominant donors of one re-imputation row: its weighted
    # denominator keeps less than a tenth of its unit-weight magnitude, so
    # the engine substitutes that row's original fitted arm mean (and
    # reports the substitution), matching the plain-Python oracle that
    # applies the same rule independently
    from drcate.bootstrap import _ReplicateEngine

    fit = regression_fit()
    x0 = np.zeros(DATA.p)
    engine = _ReplicateEngine(fit, DATA, x0)
    kmat, resp, idx, den_base, mu_base = engine.cross[0]
    # the row with the most concentrated kernel mass needs the fewest
    # donors removed
    concentration = np.abs(kmat).max(axis=1) / np.abs(kmat).sum(axis=1)
    r = int(np.argmax(concentration))
    kept = kmat[r].copy()
    xi = np.ones(DATA.n)
    for j in np.argsort(np.abs(kept))[::-1]:
        if np.abs(kept).sum() < 0.05 * den_base[r]:
            break
        kept[j] = 0.0
        xi[idx[j]] = 0.0
    assert np.abs(kmat[r] @ xi[idx]) < 0.1 * den_base[r]

    got, degenerate, _, n_stabilized = engine.replicate(xi)
    assert not degenerate
    assert n_stabilized >= 1
    want = replicate_oracle(fit, DATA, x0, xi)
    assert got == pytest.approx(want, rel=1e-12)


def test_exclusion_after_one_retry():
    # degenerate final ratios happen near the index-range edge with
    # multinomial weights; each flagged replicate is redrawn once, the
    # still-degenerate ones are excluded and counted
    rng = np.random.default_rng(7)
    n, p = 60, 3
    x = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, p))
    a = (rng.random(n) < 0.5).astype(np.int64)
    a[0], a[1] = 0, 1
    y = np.where(a == 1, 2.0 * x[:, 0] + x[:, 2], x[:, 0] - x[:, 1])
    y = y + 0.05 * rng.standard_normal(n)
    data = Dataset(x=x, a=a, y=y)
    cfg = SearchConfig(d_max=1, bandwidth_grid_size=5, multistart=2,
                       simplex_rel_tol=1e-4, simplex_maxiter_per_dim=60)
    fit = fit_cate(data, cfg, method="regression", seed=3)
    dirs = fit.fit_tau.directions[:, 0]
    u_all = data.x @ dirs
    x0 = dirs / (dirs @ dirs) * (u_all.max() * 1.02)
    res = bootstrap_tau(fit, data, x0, n_replicates=50, scheme="multinomial",
                        seed=4)
    assert res.n_excluded >= 1
    assert res.diagnostics["n_retried"] >= 1
    assert res.n_replicates + res.n_excluded == 50
    assert len(res.replicates) == res.n_replicates


def test_all_degenerate_raises():
    fit = regression_fit()
    with pytest.raises(RuntimeError):
        bootstrap_tau(fit, DATA, np.full(DATA.p, 1e6), n_replicates=6, seed=0)


# ======================================================================
# validation and serialization
# ======================================================================

def test_bootstrap_rejects_unsupported_fits():
    matching = fit_cate(DATA, FAST_CFG, method="matching", seed=3)
    with pytest.raises(ValueError):
        bootstrap_tau(matching, DATA, np.zeros(DATA.p), n_replicates=4)
    fit = regression_fit()
    with pytest.raises(ValueError):
        bootstrap_tau(fit, DATA, np.zeros(DATA.p + 1), n_replicates=4)
    with pytest.raises(ValueError):
        bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=1)
    other = mk_dataset(n=DATA.n + 2)
    with pytest.raises(ValueError):
        bootstrap_tau(fit, other, np.zeros(DATA.p), n_replicates=4)


def test_result_round_trip():
    fit = regression_fit()
    res = bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=40, seed=6)
    back = BootstrapResult.from_json(res.to_json())
    assert back.to_json() == res.to_json()
    assert np.array_equal(back.replicates, res.replicates)
    slim = BootstrapResult.from_json(res.to_json(include_replicates=False))
    assert slim.replicates is None
    assert slim.se == res.se and slim.normal_ci == res.normal_ci


def test_result_schema_guards():
    fit = regression_fit()
    res = bootstrap_tau(fit, DATA, np.zeros(DATA.p), n_replicates=10, seed=6)
    payload = json.loads(res.to_json())
    bad = dict(payload)
    bad["schema"] = "other"
    with pytest.raises(ValueError):
        BootstrapResult.from_dict(bad)
    bad = dict(payload)
    bad["version"] = 0
    with pytest.raises(ValueError):
        BootstrapResult.from_dict(bad)


def test_result_validation():
    good = dict(point=0.0, se=0.1, normal_ci=(-0.2, 0.2),
                quantile_ci=(-0.2, 0.2), quantile_interval=(-0.2, 0.2),
                alpha=0.05, n_replicates=3, scheme="multinomial",
                replicates=np.zeros(3))
    BootstrapResult(**good)
    for key, value in (("se", -0.1), ("alpha", 1.5), ("n_replicates", 1),
                       ("scheme", "junk"), ("n_excluded", -2),
                       ("replicates", np.zeros(5))):
        bad = dict(good)
        bad[key] = value
        with pytest.raises(ValueError):
            BootstrapResult(**bad)
