"""Dataset validation, CSV ingestion, and index-basis algebra."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drcate.data_model import (
    DataError,
    Dataset,
    DegenerateBasisError,
    IndexBasis,
    normalize_to_identity_top,
    projection_matrix,
    read_dataset_csv,
    span_projector,
    standardize_columns,
    subspace_mse,
    write_dataset_csv,
)


def small_dataset(n=6, p=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    a = np.zeros(n)
    a[: n // 2] = 1
    y = rng.normal(size=n)
    return Dataset(x=x, a=a, y=y)


class TestDatasetValidation:
    def test_roundtrip_fields(self):
        data = small_dataset()
        assert data.n == 6 and data.p == 3
        assert set(np.unique(data.a)) == {0, 1}

    def test_arrays_are_readonly(self):
        data = small_dataset()
        with pytest.raises(ValueError):
            data.y[0] = 1.0

    def test_rejects_single_group(self):
        with pytest.raises(DataError, match="non-empty"):
            Dataset(x=np.ones((3, 1)), a=np.ones(3), y=np.zeros(3))

    def test_rejects_bad_indicator(self):
        with pytest.raises(DataError, match="0/1"):
            Dataset(x=np.ones((3, 1)), a=np.array([0, 1, 2]), y=np.zeros(3))

    def test_rejects_nonfinite(self):
        with pytest.raises(DataError, match="non-finite"):
            Dataset(x=np.array([[1.0], [np.nan]]), a=np.array([0, 1]), y=np.zeros(2))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DataError, match="inconsistent"):
            Dataset(x=np.ones((3, 1)), a=np.array([0, 1]), y=np.zeros(3))

    def test_rejects_tiny_sample(self):
        with pytest.raises(DataError):
            Dataset(x=np.ones((1, 1)), a=np.array([1]), y=np.zeros(1))

    def test_group_index_ascending(self):
        data = small_dataset()
        for a in (0, 1):
            idx = data.group_index(a)
            assert np.all(np.diff(idx) > 0)
            assert np.all(data.a[idx] == a)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        data = small_dataset(n=8, p=2, seed=3)
        path = tmp_path / "d.csv"
        write_dataset_csv(path, data, comments=["written by test"])
        back = read_dataset_csv(path)
        assert np.array_equal(back.x, data.x)
        assert np.array_equal(back.a, data.a)
        assert np.array_equal(back.y, data.y)
        assert back.names == ("x1", "x2")

    def test_missing_value_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("A,Y,x1\n1,2.0,0.5\n0,,0.7\n")
        with pytest.raises(DataError, match="line 3.*column 'Y'"):
            read_dataset_csv(path)

    def test_non_numeric_reports_line_and_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("A,Y,x1\n1,2.0,oops\n0,1.0,0.7\n")
        with pytest.raises(DataError, match="line 2.*column 'x1'"):
            read_dataset_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("Y,A,x1\n2.0,1,0.5\n")
        with pytest.raises(DataError, match="header"):
            read_dataset_csv(path)

    def test_header_without_covariates(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("A,Y\n1,2.0\n")
        with pytest.raises(DataError, match="header"):
            read_dataset_csv(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("A,Y,x1\n1,2.0,0.5,9\n")
        with pytest.raises(DataError, match="line 2.*fields"):
            read_dataset_csv(path)

    def test_bad_indicator_value(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("A,Y,x1\n2,2.0,0.5\n")
        with pytest.raises(DataError, match="line 2.*treatment"):
            read_dataset_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="no header"):
            read_dataset_csv(path)

    def test_comments_skipped(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("# a comment\nA,Y,x1\n1,2.0,0.5\n0,1.0,0.7\n")
        data = read_dataset_csv(path)
        assert data.n == 2


class TestIndexBasis:
    def test_full_matrix_layout(self):
        b = IndexBasis(p=3, d=1, lower=np.array([[2.0], [3.0]]))
        assert np.array_equal(b.matrix(), np.array([[1.0], [2.0], [3.0]]))

    def test_permuted_layout(self):
        b = IndexBasis(p=2, d=1, lower=np.array([[0.0]]), perm=(1, 0))
        assert np.array_equal(b.matrix(), np.array([[0.0], [1.0]]))

    def test_project_single_and_batch(self):
        b = IndexBasis(p=3, d=1, lower=np.array([[1.0], [1.0]]))
        x = np.array([1.0, 2.0, 3.0])
        assert np.allclose(b.project(x), [6.0])
        batch = b.project(np.array([x, 2 * x]))
        assert batch.shape == (2, 1)
        assert np.allclose(batch[:, 0], [6.0, 12.0])

    def test_dict_roundtrip(self):
        b = IndexBasis(p=4, d=2, lower=np.array([[0.5, -1.0], [2.0, 0.25]]), perm=(2, 0, 1, 3))
        back = IndexBasis.from_dict(b.to_dict())
        assert back.p == b.p and back.d == b.d and back.perm == b.perm
        assert np.array_equal(back.lower, b.lower)

    def test_invalid_dimensions(self):
        with pytest.raises(ValueError):
            IndexBasis(p=2, d=3, lower=np.zeros((0, 3)))
        with pytest.raises(ValueError):
            IndexBasis(p=3, d=1, lower=np.zeros((1, 1)))


class TestNormalize:
    def test_identity_top_unchanged(self):
        raw = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.25]])
        b = normalize_to_identity_top(raw)
        assert b.perm == (0, 1, 2)
        assert np.array_equal(b.matrix(), raw)

    def test_rescales_single_column(self):
        # the greedy pivot pins the largest row, so row 1 carries the 1
        b = normalize_to_identity_top(np.array([[2.0], [4.0]]))
        assert b.perm == (1, 0)
        assert np.allclose(b.matrix(), [[0.5], [1.0]])
        assert np.allclose(
            span_projector(np.array([[2.0], [4.0]])), projection_matrix(b), atol=1e-12
        )

    def test_pivots_on_zero_leading_entry(self):
        b = normalize_to_identity_top(np.array([[0.0], [1.0]]))
        assert b.perm == (1, 0)
        assert np.array_equal(b.matrix(), np.array([[0.0], [1.0]]))

    def test_span_preserved(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            raw = rng.normal(size=(5, 2))
            b = normalize_to_identity_top(raw)
            assert np.allclose(span_projector(raw), projection_matrix(b), atol=1e-10)

    def test_rejects_rank_deficient(self):
        raw = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(DegenerateBasisError):
            normalize_to_identity_top(raw)


class TestSubspaceMse:
    def test_orthogonal_spans(self):
        b1 = normalize_to_identity_top(np.array([[1.0], [0.0]]))
        b2 = normalize_to_identity_top(np.array([[0.0], [1.0]]))
        assert np.isclose(subspace_mse(b1, b2), 2.0, atol=1e-14)

    def test_same_span_is_zero(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(6, 2))
        b1 = normalize_to_identity_top(raw)
        b2 = normalize_to_identity_top(raw @ np.array([[2.0, 1.0], [0.5, 3.0]]))
        assert subspace_mse(b1, b2) < 1e-10

    def test_right_multiplication_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            raw = rng.normal(size=(5, 2))
            c = rng.normal(size=(2, 2)) + 3 * np.eye(2)
            b1 = normalize_to_identity_top(raw)
            b2 = normalize_to_identity_top(raw @ c)
            assert subspace_mse(b1, b2) < 1e-10

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        b1 = normalize_to_identity_top(rng.normal(size=(4, 2)))
        b2 = normalize_to_identity_top(rng.normal(size=(4, 2)))
        assert np.isclose(subspace_mse(b1, b2), subspace_mse(b2, b1), rtol=1e-12)

    def test_dimension_mismatch_rejected(self):
        b1 = normalize_to_identity_top(np.array([[1.0], [0.5]]))
        b2 = normalize_to_identity_top(np.eye(2))
        with pytest.raises(ValueError):
            subspace_mse(b1, b2)
        b3 = normalize_to_identity_top(np.array([[1.0], [0.5], [0.2]]))
        with pytest.raises(ValueError):
            subspace_mse(b1, b3)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_projector_symmetric_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 6))
        d = int(rng.integers(1, p))
        raw = rng.normal(size=(p, d)) * rng.uniform(0.5, 4.0)
        proj = span_projector(raw)
        assert np.allclose(proj, proj.T, atol=1e-10)
        assert np.allclose(proj @ proj, proj, atol=1e-10)
        assert np.isclose(np.trace(proj), d, atol=1e-8)


class TestStandardize:
    def test_zero_mean_unit_sd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(loc=3.0, scale=2.5, size=(50, 3))
        z, mean, sd = standardize_columns(x)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)
        assert np.allclose(mean, x.mean(axis=0))
        assert np.allclose(sd, x.std(axis=0))

    def test_constant_column_left_alone(self):
        x = np.column_stack([np.ones(10), np.arange(10.0)])
        z, _, sd = standardize_columns(x)
        assert sd[0] == 1.0
        assert np.allclose(z[:, 0], 0.0)
