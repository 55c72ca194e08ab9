"""Tests for the replication harness: generation, seeding, and tables."""

import csv
import math

import numpy as np
import pytest

from drcate.bootstrap import confidence_intervals
from drcate.data_model import normalize_to_identity_top, subspace_mse
from drcate.simulation import (
    BootstrapReplicate,
    DEFAULT_TABLE_METHODS,
    MethodReplicate,
    ReplicateResult,
    SimDesign,
    default_sim_config,
    generate,
    model_bases,
    projector_mse,
    propensity_function,
    replicate_seed,
    run_replicate,
    run_replications,
    run_table1,
    run_table2,
    run_table3,
    table1_from_results,
    table2_from_results,
    table3_from_results,
    tau_function,
    true_dimension,
    write_replicate_log,
)
from drcate.subspace import SearchConfig

RNG_PROBE_REPS = 6


def fast_cfg(d_max: int = 1) -> SearchConfig:
    return SearchConfig(d_max=d_max, bandwidth_grid_size=6, multistart=2,
                        simplex_rel_tol=1e-4, simplex_maxiter_per_dim=80,
                        simplex_max_nfev=400)


def tiny_design(**kwargs) -> SimDesign:
    base = dict(model="M1", n=60, p=4, n_replications=2, base_seed=3)
    base.update(kwargs)
    return SimDesign(**base)


def strip_times(payload):
    """Replicate dict with wall-clock fields removed, for value comparisons."""
    if isinstance(payload, dict):
        return {k: strip_times(v) for k, v in payload.items() if k != "elapsed"}
    if isinstance(payload, list):
        return [strip_times(v) for v in payload]
    return payload


def mk_method(method, ok=True, d_hat=1, mse=0.01, tau=0.0, fallback=False,
              error=None, stage=None):
    if not ok:
        return MethodReplicate(method=method, ok=False, error=error or "boom",
                               stage=stage)
    return MethodReplicate(method=method, ok=True, d_hat=d_hat,
                           subspace_mse=mse, tau_hat=tau,
                           smoothing_fallback=fallback)


def mk_result(rep, method_records, bootstrap=None):
    return ReplicateResult(rep_index=rep, n_treated=30,
                           methods={r.method: r for r in method_records},
                           bootstrap=bootstrap)


# ---------------------------------------------------------------------------
# Design validation and generation


class TestSimDesign:
    def test_rejects_invalid_fields(self):
        with pytest.raises(ValueError, match="unknown model"):
            SimDesign(model="M3", n=100)
        with pytest.raises(ValueError, match="n >= 50"):
            SimDesign(model="M1", n=49)
        with pytest.raises(ValueError, match="p >= 3"):
            SimDesign(model="M1", n=100, p=2)
        with pytest.raises(ValueError, match="replication"):
            SimDesign(model="M1", n=100, n_replications=0)
        with pytest.raises(ValueError, match="coefficients"):
            SimDesign(model="M1", n=100, propensity_coeffs=(0.5, 0.5))
        with pytest.raises(ValueError, match="evaluation point"):
            SimDesign(model="M1", n=100, p=4, eval_point=(0.0, 0.0))
        with pytest.raises(ValueError, match="bootstrap"):
            SimDesign(model="M1", n=100, n_bootstrap=-1)
        with pytest.raises(ValueError, match="noise sd"):
            SimDesign(model="M1", n=100, noise_sd=-0.1)

    def test_defaults_and_roundtrip(self):
        design = SimDesign(model="M2", n=250)
        assert design.p == 10
        assert design.propensity_coeffs == (0.5, 0.5, 0.5, 0.5)
        assert design.eval_point == (0.0,) * 10
        assert design.noise_sd == 0.02
        assert SimDesign.from_dict(design.to_dict()) == design

    def test_default_config_dimension_ceiling(self):
        assert default_sim_config().d_max == 4


class TestGenerate:
    def test_deterministic_per_replicate(self):
        design = tiny_design()
        data1, truth1 = generate(design, 1)
        data2, truth2 = generate(design, 1)
        assert np.array_equal(data1.x, data2.x)
        assert np.array_equal(data1.a, data2.a)
        assert np.array_equal(data1.y, data2.y)
        assert np.array_equal(truth1.d_i, truth2.d_i)
        data3, _ = generate(design, 2)
        assert not np.array_equal(data1.x, data3.x)

    def test_rejects_negative_replicate_index(self):
        with pytest.raises(ValueError, match="replicate index"):
            generate(tiny_design(), -1)

    def test_covariate_marginals(self):
        data, _ = generate(SimDesign(model="M1", n=4000, p=6), 0)
        half = math.sqrt(3.0)
        assert data.x.min() > -half and data.x.max() < half
        assert abs(data.x.mean()) < 0.05
        assert 0.9 < data.x.var() < 1.1

    def test_observed_outcome_matches_assigned_arm(self):
        for model in ("M1", "M2"):
            data, truth = generate(SimDesign(model=model, n=200, p=5), 3)
            assert np.array_equal(data.y[data.a == 1], truth.y1[data.a == 1])
            assert np.array_equal(data.y[data.a == 0], truth.y0[data.a == 0])
            assert np.array_equal(truth.d_i, truth.y1 - truth.y0)

    def test_treated_fraction_near_sixty_percent(self):
        design = SimDesign(model="M1", n=500)
        fractions = [generate(design, r)[0].a.mean() for r in range(50)]
        assert 0.55 <= float(np.mean(fractions)) <= 0.65

    def test_contrast_noise_sd(self):
        _, truth = generate(SimDesign(model="M1", n=5000), 0)
        sd = float(np.std(truth.d_i - truth.tau_values))
        assert abs(sd - 0.02 * math.sqrt(2.0)) < 0.002

    def test_effect_curve_zero_at_origin(self):
        for model in ("M1", "M2"):
            _, truth = generate(SimDesign(model=model, n=60, p=5), 0)
            assert truth.tau(np.zeros(5))[0] == 0.0
            assert tau_function(model, np.zeros((1, 5)))[0] == 0.0

    def test_effect_curve_is_difference_of_arm_means(self):
        data, truth = generate(SimDesign(model="M2", n=300, p=6), 2)
        x1, x2, x3 = data.x[:, 0], data.x[:, 1], data.x[:, 2]
        mean0 = (x1 + x3) * (x2 - 1.0)
        mean1 = 2.0 * x2 * (x1 + x3)
        assert np.allclose(truth.tau_values, mean1 - mean0, atol=1e-12)
        assert np.allclose(truth.y1 - truth.y0 - (mean1 - mean0),
                           truth.d_i - truth.tau_values, atol=1e-12)

    def test_propensity_values(self):
        data, truth = generate(tiny_design(), 0)
        expected = propensity_function((0.5, 0.5, 0.5, 0.5), data.x)
        assert np.array_equal(truth.pi_values, expected)
        at_origin = propensity_function((0.5, 0.5, 0.5, 0.5), np.zeros((1, 4)))
        assert at_origin[0] == pytest.approx(1.0 / (1.0 + math.exp(-0.5)))

    def test_true_bases(self):
        b0, b1, btau = model_bases("M1", 5)
        assert np.array_equal(btau.matrix()[:, 0], [1, 1, 1, 0, 0])
        assert np.array_equal(b0.matrix()[:, 0] * 1.0, [1, -1, 0, 0, 0])
        assert np.allclose(b1.matrix()[:, 0], [1.0, 0.0, 0.5, 0.0, 0.0])
        assert true_dimension("M1") == 1

        b0, b1, btau = model_bases("M2", 5)
        assert btau.d == 2 and true_dimension("M2") == 2
        span = np.zeros((5, 2))
        span[0, 0] = span[2, 0] = span[1, 1] = 1.0
        assert projector_mse(span, btau) < 1e-24
        assert subspace_mse(b0, btau) == 0.0


# ---------------------------------------------------------------------------
# Projector distance with possibly mismatched dimensions


class TestProjectorMse:
    def test_matches_strict_version_for_equal_dimensions(self):
        rng = np.random.default_rng(5)
        for _ in range(RNG_PROBE_REPS):
            a = rng.normal(size=(6, 2))
            b = rng.normal(size=(6, 2))
            strict = subspace_mse(normalize_to_identity_top(a),
                                  normalize_to_identity_top(b))
            assert projector_mse(a, normalize_to_identity_top(b)) == \
                pytest.approx(strict, abs=1e-10)

    def test_right_multiplication_invariance(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(7, 3))
        basis = normalize_to_identity_top(rng.normal(size=(7, 2)))
        mix = np.array([[2.0, 0.5, 0.0], [-1.0, 1.5, 0.25], [0.0, 1.0, -2.0]])
        assert projector_mse(a @ mix, basis) == \
            pytest.approx(projector_mse(a, basis), abs=1e-10)

    def test_known_distances(self):
        e = np.eye(4)
        b1 = normalize_to_identity_top(e[:, :1])
        assert projector_mse(e[:, 1:2], b1) == pytest.approx(2.0, abs=1e-14)
        assert projector_mse(e[:, :2], b1) == pytest.approx(1.0, abs=1e-14)
        assert projector_mse(e[:, :1], b1) == pytest.approx(0.0, abs=1e-14)

    def test_dimension_mismatch_in_p_raises(self):
        basis = normalize_to_identity_top(np.eye(4)[:, :1])
        with pytest.raises(ValueError, match="covariate dimensions"):
            projector_mse(np.eye(5)[:, :1], basis)


class TestReplicateSeed:
    def test_deterministic_and_distinct(self):
        assert replicate_seed(3, 0, 6) == replicate_seed(3, 0, 6)
        seeds = {replicate_seed(3, r, s) for r in range(4) for s in range(7)}
        assert len(seeds) == 28
        assert all(0 <= s < 2 ** 32 for s in seeds)


# ---------------------------------------------------------------------------
# One replicate


class TestRunReplicate:
    def test_method_records_deterministic(self):
        design = tiny_design()
        r1 = run_replicate(design, 0, ("true", "ipw"), fast_cfg())
        r2 = run_replicate(design, 0, ("true", "ipw"), fast_cfg())
        assert strip_times(r1.to_dict()) == strip_times(r2.to_dict())
        assert r1.n_treated == int(generate(design, 0)[0].a.sum())

    def test_methods_share_data_but_not_search_streams(self):
        design = tiny_design(base_seed=9)
        alone = run_replicate(design, 1, ("true",), fast_cfg())
        paired = run_replicate(design, 1, ("true", "ipw"), fast_cfg())
        assert strip_times(alone.methods["true"].to_dict()) == \
            strip_times(paired.methods["true"].to_dict())

    def test_shared_stage_failure_charged_to_each_dependent(self, monkeypatch):
        import drcate.simulation as sim
        calls = {"n": 0}

        def broken(*args, **kwargs):
            calls["n"] += 1
            raise RuntimeError("propensity search exploded")

        monkeypatch.setattr(sim, "fit_propensity", broken)
        result = run_replicate(tiny_design(), 0, ("true", "ipw", "aipw"),
                               fast_cfg())
        assert result.methods["true"].ok
        for method in ("ipw", "aipw"):
            rec = result.methods[method]
            assert not rec.ok
            assert "propensity search exploded" in rec.error
            assert rec.d_hat is None and rec.subspace_mse is None
        assert calls["n"] == 1

    def test_bootstrap_attached_and_point_matches_estimate(self):
        design = tiny_design(n_bootstrap=8)
        result = run_replicate(design, 0, ("regression",), fast_cfg())
        boot = result.bootstrap
        assert boot is not None and boot.ok
        assert len(boot.replicates) + boot.n_excluded == 8
        assert boot.point == result.methods["regression"].tau_hat
        assert boot.se >= 0.0

    def test_bootstrap_skipped_or_failed(self, monkeypatch):
        assert run_replicate(tiny_design(), 0, ("true",),
                             fast_cfg()).bootstrap is None
        assert run_replicate(tiny_design(n_bootstrap=8), 0, ("true",),
                             fast_cfg()).bootstrap is None

        import drcate.simulation as sim

        def broken(*args, **kwargs):
            raise RuntimeError("no contrasts today")

        monkeypatch.setattr(sim, "impute_regression", broken)
        result = run_replicate(tiny_design(n_bootstrap=8), 0,
                               ("regression",), fast_cfg())
        assert not result.methods["regression"].ok
        assert result.bootstrap is not None and not result.bootstrap.ok
        assert "no contrasts today" in result.bootstrap.error

    def test_rejects_bad_method_lists(self):
        with pytest.raises(ValueError, match="unknown methods"):
            run_replicate(tiny_design(), 0, ("nearest",), fast_cfg())
        with pytest.raises(ValueError, match="duplicate"):
            run_replicate(tiny_design(), 0, ("true", "true"), fast_cfg())
        with pytest.raises(ValueError, match="at least one"):
            run_replicate(tiny_design(), 0, (), fast_cfg())

    def test_oracle_contrasts_recover_subspace(self):
        design = SimDesign(model="M1", n=100, p=4, n_replications=1)
        result = run_replicate(design, 0, ("oracle",), fast_cfg())
        rec = result.methods["oracle"]
        assert rec.ok and rec.d_hat == 1
        assert rec.subspace_mse < 0.01


# ---------------------------------------------------------------------------
# The replication loop and its cache


class TestRunReplications:
    def test_cache_roundtrip(self, tmp_path, monkeypatch):
        design = tiny_design(n_bootstrap=6)
        first = run_replications(design, ("true", "regression"), fast_cfg(),
                                 cache_dir=tmp_path)
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["M1_n60_rep00000.json", "M1_n60_rep00001.json"]

        import drcate.simulation as sim

        def no_compute(*args, **kwargs):
            raise AssertionError("cache miss: replicate recomputed")

        monkeypatch.setattr(sim, "run_replicate", no_compute)
        again = run_replications(design, ("true", "regression"), fast_cfg(),
                                 cache_dir=tmp_path)
        assert [a.to_dict() for a in first] == [b.to_dict() for b in again]

    def test_cache_rejects_other_study_config(self, tmp_path):
        run_replications(tiny_design(n_replications=1), ("true",), fast_cfg(),
                         cache_dir=tmp_path)
        with pytest.raises(ValueError, match="different study configuration"):
            run_replications(tiny_design(n_replications=1, noise_sd=0.05),
                             ("true",), fast_cfg(), cache_dir=tmp_path)
        with pytest.raises(ValueError, match="different study configuration"):
            run_replications(tiny_design(n_replications=1), ("true",),
                             fast_cfg(), delta_tau=0.1, cache_dir=tmp_path)

    def test_extending_the_study_reuses_cached_replicates(self, tmp_path,
                                                          monkeypatch):
        pilot = run_replications(tiny_design(n_replications=1), ("true",),
                                 fast_cfg(), cache_dir=tmp_path)
        import drcate.simulation as sim
        computed = []
        original = sim.run_replicate

        def counting(design, rep_index, *args, **kwargs):
            computed.append(rep_index)
            return original(design, rep_index, *args, **kwargs)

        monkeypatch.setattr(sim, "run_replicate", counting)
        full = run_replications(tiny_design(n_replications=2), ("true",),
                                fast_cfg(), cache_dir=tmp_path)
        assert computed == [1]
        assert full[0].to_dict() == pilot[0].to_dict()

    def test_progress_callback_reports_cache_state(self, tmp_path):
        design = tiny_design()
        seen = []
        run_replications(design, ("true",), fast_cfg(), cache_dir=tmp_path,
                         progress=lambda res, cached: seen.append(
                             (res.rep_index, cached)))
        run_replications(design, ("true",), fast_cfg(), cache_dir=tmp_path,
                         progress=lambda res, cached: seen.append(
                             (res.rep_index, cached)))
        assert seen == [(0, False), (1, False), (0, True), (1, True)]

    def test_worker_pool_matches_serial(self):
        design = tiny_design(base_seed=21)
        serial = run_replications(design, ("true",), fast_cfg())
        pooled = run_replications(design, ("true",), fast_cfg(), workers=2)
        assert [strip_times(a.to_dict()) for a in serial] == \
            [strip_times(b.to_dict()) for b in pooled]


# ---------------------------------------------------------------------------
# Aggregated tables


class TestTable1:
    def test_binning_and_exclusion(self):
        design = tiny_design(n_replications=5)
        results = [
            mk_result(0, [mk_method("true", d_hat=1, mse=0.0)]),
            mk_result(1, [mk_method("true", d_hat=2, mse=0.1)]),
            mk_result(2, [mk_method("true", d_hat=4, mse=0.2)]),
            mk_result(3, [mk_method("true", d_hat=6, mse=0.3)]),
            mk_result(4, [mk_method("true", ok=False, stage="cate-search")]),
        ]
        table = table1_from_results(design, ("true",), results)
        row = table.rows[0]
        assert row["n_ok"] == 4 and row["n_failed"] == 1
        assert row["prop_d0"] == 0.0
        assert row["prop_d1"] == 0.25
        assert row["prop_d2"] == 0.25
        assert row["prop_d3"] == 0.0
        assert row["prop_d4plus"] == 0.5
        assert row["subspace_mse"] == pytest.approx(0.15)
        assert table.n_failed == 1 and table.n_cells == 5
        assert table.failure_rate() == pytest.approx(0.2)
        assert table.failures[0]["stage"] == "cate-search"
        assert table.config["true_d"] == 1

    def test_missing_method_record_raises(self):
        design = tiny_design(n_replications=1)
        results = [mk_result(0, [mk_method("true")])]
        with pytest.raises(ValueError, match="no record for"):
            table1_from_results(design, ("true", "ipw"), results)


class TestTable2:
    def test_moments_about_true_value(self):
        design = tiny_design(n_replications=3, p=4,
                             eval_point=(1.0, 0.0, 0.0, 0.0))
        results = [
            mk_result(0, [mk_method("true", tau=1.1)]),
            mk_result(1, [mk_method("true", tau=0.9)]),
            mk_result(2, [mk_method("true", ok=False)]),
        ]
        table = table2_from_results(design, ("true",), results)
        row = table.rows[0]
        assert table.config["true_value"] == 1.0
        assert row["mean"] == pytest.approx(1.0)
        assert row["sd"] == pytest.approx(np.std([1.1, 0.9], ddof=1))
        assert row["mse"] == pytest.approx(0.01)
        assert row["n_ok"] == 2 and row["n_failed"] == 1


class TestTable3:
    @staticmethod
    def make_boot(point, spread, n=40):
        reps = point + spread * np.linspace(-1.0, 1.0, n)
        return BootstrapReplicate(ok=True, point=point,
                                  se=float(np.std(reps, ddof=1)),
                                  replicates=tuple(reps))

    def test_coverage_and_level_monotonicity(self):
        design = tiny_design(n_replications=3, n_bootstrap=40)
        boots = [self.make_boot(0.01, 0.05), self.make_boot(0.4, 0.1),
                 self.make_boot(-0.02, 0.03)]
        results = [mk_result(i, [mk_method("regression", tau=b.point)],
                             bootstrap=b) for i, b in enumerate(boots)]
        table = table3_from_results(design, results, alphas=(0.1, 0.05))
        wide, narrow = table.rows[1], table.rows[0]
        assert narrow["normal_coverage"] <= wide["normal_coverage"]
        assert narrow["quantile_coverage"] <= wide["quantile_coverage"]

        expected_hits = 0
        for b in boots:
            ci, _, _ = confidence_intervals(b.point, np.asarray(b.replicates),
                                            0.05, b.se)
            expected_hits += ci[0] <= 0.0 <= ci[1]
        assert wide["normal_coverage"] == pytest.approx(expected_hits / 3)
        assert wide["sd"] == pytest.approx(
            np.std([b.point for b in boots], ddof=1))
        assert wide["mean_se"] == pytest.approx(
            np.mean([b.se for b in boots]))

    def test_failed_bootstrap_is_excluded_and_counted(self):
        design = tiny_design(n_replications=2, n_bootstrap=40)
        results = [
            mk_result(0, [mk_method("regression")],
                      bootstrap=self.make_boot(0.0, 0.05)),
            mk_result(1, [mk_method("regression")],
                      bootstrap=BootstrapReplicate(ok=False, error="boom")),
        ]
        table = table3_from_results(design, results)
        assert table.rows[0]["n_ok"] == 1
        assert table.rows[0]["n_failed"] == 1
        assert table.failures[0]["method"] == "bootstrap"

    def test_requires_bootstrap_records_and_valid_levels(self):
        design = tiny_design(n_replications=1)
        results = [mk_result(0, [mk_method("regression")])]
        with pytest.raises(ValueError, match="no bootstrap record"):
            table3_from_results(design, results)
        with pytest.raises(ValueError, match="nominal levels"):
            table3_from_results(design, [], alphas=(1.5,))


class TestTableRuns:
    def test_tables_render_byte_identical_across_runs(self):
        design = tiny_design()
        first = run_table1(design, ("true",), fast_cfg())
        second = run_table1(design, ("true",), fast_cfg())
        assert first.to_csv() == second.to_csv()
        assert first.to_text() == second.to_text()
        assert first.to_csv().startswith("# base_seed=3\n")

        t2a = run_table2(design, ("true",), fast_cfg())
        t2b = run_table2(design, ("true",), fast_cfg())
        assert t2a.to_csv() == t2b.to_csv()

    def test_table3_wrapper_runs_and_validates(self):
        design = tiny_design(n_bootstrap=8)
        table = run_table3(design, ("regression",), fast_cfg())
        assert table.columns[0] == "alpha"
        assert table.rows[0]["n_ok"] + table.rows[0]["n_failed"] == 2
        with pytest.raises(ValueError, match="n_bootstrap"):
            run_table3(tiny_design(), ("regression",), fast_cfg())
        with pytest.raises(ValueError, match="regression"):
            run_table3(design, ("true",), fast_cfg())

    def test_constant_weights_give_zero_width_and_zero_coverage(self):
        design = tiny_design(n_replications=1, n_bootstrap=8)
        table = run_table3(design, ("regression",), fast_cfg(),
                           bootstrap_scheme="constant")
        row = table.rows[0]
        assert row["mean_se"] == 0.0
        assert row["quantile_lo"] == row["quantile_hi"]
        assert row["normal_coverage"] == 0.0
        assert row["quantile_coverage"] == 0.0

    def test_csv_and_log_outputs(self, tmp_path):
        design = tiny_design(n_replications=2, n_bootstrap=40)
        results = [
            mk_result(0, [mk_method("true"), mk_method("ipw", ok=False)],
                      bootstrap=TestTable3.make_boot(0.0, 0.1)),
            mk_result(1, [mk_method("true"), mk_method("ipw", d_hat=2)]),
        ]
        table = table1_from_results(design, ("true", "ipw"), results)
        csv_path = tmp_path / "table1.csv"
        table.write_csv(csv_path)
        lines = csv_path.read_text().splitlines()
        comments = [ln for ln in lines if ln.startswith("# ")]
        body = [ln for ln in lines if not ln.startswith("# ")]
        assert any(ln.startswith("# methods=") for ln in comments)
        parsed = list(csv.reader(body))
        assert parsed[0] == list(table.columns)
        assert len(parsed) == 3
        assert parsed[1][0] == "true"
        failed_cell = parsed[2][parsed[0].index("subspace_mse")]
        assert float(failed_cell) == 0.01

        text = table.to_text()
        assert "dimension selection" in text.splitlines()[0]

        log_path = tmp_path / "log.csv"
        write_replicate_log(results, log_path)
        rows = list(csv.reader(log_path.read_text().splitlines()))
        assert rows[0][0] == "rep_index"
        assert len(rows) == 1 + 2 + 2 + 1
        boot_rows = [r for r in rows if r[1] == "bootstrap"]
        assert len(boot_rows) == 1


class TestDefaultMethodList:
    def test_presentation_order(self):
        assert DEFAULT_TABLE_METHODS == ("true", "regression", "matching",
                                         "ipw", "aipw")
