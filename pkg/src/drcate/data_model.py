"""Core data containers: observational datasets and index bases.

A dataset is the triple (X, A, Y): an n-by-p covariate matrix, a binary
treatment indicator, and a scalar response. An index basis is a p-by-d matrix
in pinned "identity-top" form: d of its rows (selected by a recorded row
permutation) form the identity, and the remaining (p - d) x d block holds the
free coefficients. Two bases describe the same model exactly when their
columns span the same subspace, which is what `subspace_mse` measures via
projection matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._nwcore import index_values

__all__ = [
    "DataError",
    "DegenerateBasisError",
    "Dataset",
    "IndexBasis",
    "ImputedOutcomes",
    "read_dataset_csv",
    "write_dataset_csv",
    "basis_matrix",
    "normalize_to_identity_top",
    "projection_matrix",
    "span_projector",
    "subspace_mse",
    "standardize_columns",
    "plain_data",
]

FLOAT_FMT = ".17g"


class DataError(ValueError):
    """Invalid input data (malformed file, bad column, missing value)."""


class DegenerateBasisError(ValueError):
    """A basis matrix is rank deficient or cannot be pivoted to identity-top."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


# ======================================================================
# datasets
# ======================================================================

@dataclass(frozen=True)
class Dataset:
    """Immutable observational sample.

    Attributes:
        x: Covariates, shape (n, p), finite floats.
        a: Treatment indicator, shape (n,), values in {0, 1}, both present.
        y: Observed response, shape (n,), finite floats.
        names: Optional covariate column names (defaults to x1..xp on output).
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"covariates must be a 2-d array, got ndim={x.ndim}")
        n, p = x.shape
        if n < 2:
            raise DataError(f"need at least 2 subjects, got {n}")
        if p < 1:
            raise DataError("need at least one covariate column")
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=np.float64)
        if a.shape != (n,) or y.shape != (n,):
            raise DataError(
                f"inconsistent lengths: x has {n} rows, a has shape {a.shape}, y has shape {y.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("covariates contain non-finite values")
        if not np.all(np.isfinite(y)):
            raise DataError("responses contain non-finite values")
        af = np.asarray(a, dtype=np.float64)
        if not np.all((af == 0.0) | (af == 1.0)):
            raise DataError("treatment indicator must be coded 0/1")
        a_int = af.astype(np.int64)
        if a_int.sum() == 0 or a_int.sum() == n:
            raise DataError("both treatment groups must be non-empty")
        if self.names is not None and len(self.names) != p:
            raise DataError(
                f"got {len(self.names)} covariate names for {p} columns"
            )
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "a", _readonly(a_int))
        object.__setattr__(self, "y", _readonly(y))
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def group_index(self, a: int) -> np.ndarray:
        """Ascending subject indices of treatment group ``a``."""
        if a not in (0, 1):
            raise ValueError(f"treatment group must be 0 or 1, got {a}")
        return np.flatnonzero(self.a == a)

    def column_names(self) -> tuple[str, ...]:
        if self.names is not None:
            return self.names
        return tuple(f"x{j + 1}" for j in range(self.p))


def read_dataset_csv(path) -> Dataset:
    """Parse a dataset from CSV.

    Expected layout: one header row naming columns ``A`` and ``Y`` first,
    followed by covariate columns in file order. Lines starting with ``#``
    are ignored. Any missing or non-numeric cell raises `DataError` naming
    the offending file line.
    """
    rows: list[tuple[int, list[str]]] = []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or (raw[0].lstrip().startswith("#")):
                continue
            rows.append((lineno, raw))
    if not rows:
        raise DataError(f"{path}: no header row found")
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 3 or header[0] != "A" or header[1] != "Y":
        raise DataError(
            f"{path}: line {header_line}: header must start with columns 'A', 'Y' "
            f"followed by at least one covariate column, got {header}"
        )
    names = tuple(header[2:])
    a_vals: list[float] = []
    y_vals: list[float] = []
    x_rows: list[list[float]] = []
    for lineno, raw in rows[1:]:
        if len(raw) != len(header):
            raise DataError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(raw)}"
            )
        parsed = []
        for col_name, cell in zip(header, raw):
            cell = cell.strip()
            if cell == "":
                raise DataError(f"{path}: line {lineno}: missing value in column '{col_name}'")
            try:
                parsed.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: non-numeric value {cell!r} in column '{col_name}'"
                ) from None
        if parsed[0] not in (0.0, 1.0):
            raise DataError(
                f"{path}: line {lineno}: treatment indicator must be 0 or 1, got {raw[0].strip()!r}"
            )
        a_vals.append(parsed[0])
        y_vals.append(parsed[1])
        x_rows.append(parsed[2:])
    if not x_rows:
        raise DataError(f"{path}: no data rows")
    try:
        return Dataset(
            x=np.asarray(x_rows, dtype=np.float64),
            a=np.asarray(a_vals),
            y=np.asarray(y_vals, dtype=np.float64),
            names=names,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_dataset_csv(path, data: Dataset, comments: list[str] | None = None) -> None:
    """Write a dataset as CSV (17-significant-digit floats, re-parseable)."""
    with open(path, "w", newline="") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["A", "Y", *data.column_names()])
        for i in range(data.n):
            writer.writerow(
                [str(int(data.a[i])), format(data.y[i], FLOAT_FMT)]
                + [format(v, FLOAT_FMT) for v in data.x[i]]
            )


# ======================================================================
# index bases
# ======================================================================

@dataclass(frozen=True)
class IndexBasis:
    """Identity-top basis of a d-dimensional index subspace of R^p.

    The full matrix has row ``perm[r]`` equal to the r-th identity row for
    r < d, and row ``perm[d + s]`` equal to ``lower[s]``. ``perm`` defaults
    to the identity permutation, i.e. the identity block sits on top.
    """

    p: int
    d: int
    lower: np.ndarray
    perm: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not (1 <= self.d <= self.p):
            raise ValueError(f"need 1 <= d <= p, got d={self.d}, p={self.p}")
        lower = np.asarray(self.lower, dtype=np.float64)
        if lower.size == 0:
            lower = lower.reshape(self.p - self.d, self.d)
        if lower.shape != (self.p - self.d, self.d):
            raise ValueError(
                f"lower block must have shape {(self.p - self.d, self.d)}, got {lower.shape}"
            )
        if not np.all(np.isfinite(lower)):
            raise ValueError("lower block contains non-finite values")
        perm = tuple(self.perm) if self.perm else tuple(range(self.p))
        if sorted(perm) != list(range(self.p)):
            raise ValueError(f"perm must be a permutation of 0..{self.p - 1}, got {perm}")
        object.__setattr__(self, "lower", _readonly(lower))
        object.__setattr__(self, "perm", perm)

    def matrix(self) -> np.ndarray:
        """Full p-by-d basis matrix in original row order."""
        m = np.empty((self.p, self.d), dtype=np.float64)
        eye = np.eye(self.d)
        for r in range(self.d):
            m[self.perm[r]] = eye[r]
        for s in range(self.p - self.d):
            m[self.perm[self.d + s]] = self.lower[s]
        return m

    def project(self, x) -> np.ndarray:
        """Index values B^T x for a single covariate row or a matrix of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        mat = np.ascontiguousarray(np.atleast_2d(x))
        if mat.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {mat.shape[1]}")
        u = index_values(mat, np.ascontiguousarray(self.matrix()))
        return u[0] if single else u

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "d": self.d,
            "lower": [[float(v) for v in row] for row in self.lower],
            "perm": list(self.perm),
        }

    @staticmethod
    def from_dict(obj: dict) -> "IndexBasis":
        return IndexBasis(
            p=int(obj["p"]),
            d=int(obj["d"]),
            lower=np.asarray(obj["lower"], dtype=np.float64).reshape(
                int(obj["p"]) - int(obj["d"]), int(obj["d"])
            ),
            perm=tuple(int(v) for v in obj["perm"]),
        )


def normalize_to_identity_top(raw) -> IndexBasis:
    """Pivot and rescale a raw basis matrix into identity-top form.

    Chooses d pivot rows greedily, each step picking the row that maximises
    the smallest singular value of the growing pivot block (ties go to the
    lowest row index), then solves for the remaining rows against that block.
    A matrix whose top d-by-d block is already exactly the identity is
    returned unchanged with the identity permutation.

    Raises:
        DegenerateBasisError: If the matrix does not have full column rank.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError("basis must be a 2-d matrix")
    p, d = raw.shape
    if not (1 <= d <= p):
        raise ValueError(f"need 1 <= d <= p, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("basis contains non-finite values")
    sv = np.linalg.svd(raw, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] <= max(p, d) * np.finfo(np.float64).eps * sv[0]:
        raise DegenerateBasisError("basis matrix is rank deficient")

    if np.array_equal(raw[:d], np.eye(d)):
        return IndexBasis(p=p, d=d, lower=raw[d:].copy(), perm=tuple(range(p)))

    chosen: list[int] = []
    remaining = list(range(p))
    for _ in range(d):
        best_row = -1
        best_smin = -1.0
        for r in remaining:
            block = raw[chosen + [r], :]
            smin = np.linalg.svd(block, compute_uv=False)[-1]
            if smin > best_smin:
                best_smin = smin
                best_row = r
        chosen.append(best_row)
        remaining.remove(best_row)
    top = raw[chosen, :]
    rest = sorted(remaining)
    try:
        lower = np.linalg.solve(top.T, raw[rest, :].T).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasisError(f"pivot block is singular: {exc}") from None
    return IndexBasis(p=p, d=d, lower=lower, perm=tuple(chosen + rest))


def basis_matrix(basis, p: int) -> np.ndarray:
    """Contiguous p-by-d direction matrix from an `IndexBasis` or raw array.

    Accepting raw arrays lets callers evaluate regressions at direction
    matrices that are not in identity-top form (e.g. standardisation-scaled
    search output), with identical numerics.
    """
    if isinstance(basis, IndexBasis):
        if basis.p != p:
            raise ValueError(f"basis has p={basis.p}, data has p={p}")
        return np.ascontiguousarray(basis.matrix())
    mat = np.asarray(basis, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.ndim != 2 or mat.shape[0] != p:
        raise ValueError(f"direction matrix must have shape ({p}, d), got {mat.shape}")
    if not (1 <= mat.shape[1] <= p):
        raise ValueError(f"need 1 <= d <= {p} direction columns, got {mat.shape[1]}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("direction matrix contains non-finite values")
    return np.ascontiguousarray(mat)


def projection_matrix(basis: IndexBasis) -> np.ndarray:
    """Orthogonal projector onto the basis span: B (B^T B)^{-1} B^T."""
    return span_projector(basis.matrix())


def span_projector(mat) -> np.ndarray:
    """Orthogonal projector onto the column span of a full-rank matrix."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    gram = mat.T @ mat
    try:
        return mat @ np.linalg.solve(gram, mat.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasisError(f"matrix is rank deficient: {exc}") from None


def subspace_mse(b1: IndexBasis, b2: IndexBasis) -> float:
    """Squared Frobenius distance between the two spans' projectors.

    Zero exactly when the subspaces coincide; invariant to any change of
    basis within each span. Requires matching p and d.
    """
    if b1.p != b2.p:
        raise ValueError(f"covariate dimensions differ: {b1.p} vs {b2.p}")
    if b1.d != b2.d:
        raise ValueError(f"index dimensions differ: {b1.d} vs {b2.d}")
    diff = projection_matrix(b1) - projection_matrix(b2)
    return float(np.sum(diff * diff))


def standardize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise standardisation; zero-variance columns are left unscaled."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return (x - mean) / sd, mean, sd


# ======================================================================
# imputed contrast outcomes
# ======================================================================

@dataclass
class ImputedOutcomes:
    """Per-subject imputed treatment-control contrasts.

    Attributes:
        values: Length-n contrast estimates.
        method: Construction tag, one of {"regression", "matching", "ipw",
            "aipw", "full_x", "oracle", "true"}.
        info: Construction diagnostics (fallback counts, clipping counts,
            kernel orders, bandwidths, ...).
    """

    values: np.ndarray
    method: str
    info: dict = field(default_factory=dict)

    METHODS = ("regression", "matching", "ipw", "aipw", "full_x", "oracle", "true")

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("imputed values must be a 1-d array")
        if not np.all(np.isfinite(values)):
            raise ValueError("imputed values contain non-finite entries")
        if self.method not in self.METHODS:
            raise ValueError(f"unknown imputation method tag {self.method!r}")
        self.values = _readonly(values)

    def to_dict(self) -> dict:
        """Plain-type payload that reconstructs the object exactly."""
        return {
            "values": [float(v) for v in self.values],
            "method": self.method,
            "info": plain_data(self.info),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ImputedOutcomes":
        return cls(
            values=np.asarray(payload["values"], dtype=np.float64),
            method=str(payload["method"]),
            info=dict(payload.get("info", {})),
        )


def plain_data(value):
    """Recursively coerce numpy scalars/arrays to plain Python types.

    Leaves str/bool/None untouched; dict keys are stringified. Used to make
    diagnostics dictionaries JSON-serializable without losing float precision
    (Python floats round-trip exactly through repr).
    """
    if isinstance(value, (bool, str)) or value is None:
        return value
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [plain_data(v) for v in value]
    if isinstance(value, dict):
        return {str(k): plain_data(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain_data(v) for v in value]
    return value
