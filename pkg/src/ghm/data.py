"""Clustered data containers, similarity matrices and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INTERCEPT = "(intercept)"


class DataError(ValueError):
    """Raised for malformed input files or invalid data."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Responses and covariates grouped by cluster.

    Rows are stored flat and contiguous by cluster: rows of cluster ``i`` are
    ``starts[i]:starts[i] + sizes[i]``.

    Attributes
    ----------
    y : (N,) float array
    X : (N, p) float array
    offset : (N,) float array of positive exposures
    cluster : (N,) int array of cluster indices in ``0..m-1``
    cluster_ids : original cluster identifiers, indexed by cluster index
    covariate_names : names of the ``p`` columns of ``X``
    """

    y: np.ndarray
    X: np.ndarray
    offset: np.ndarray
    cluster: np.ndarray
    cluster_ids: tuple[str, ...]
    covariate_names: tuple[str, ...] = ()
    sizes: np.ndarray = field(init=False)
    starts: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        offset = np.asarray(self.offset, dtype=float).reshape(-1)
        cluster = np.asarray(self.cluster, dtype=np.intp).reshape(-1)
        n = y.shape[0]
        if n == 0:
            raise DataError("dataset has no rows")
        if X.shape[0] != n or offset.shape[0] != n or cluster.shape[0] != n:
            raise DataError("y, X, offset and cluster must have the same number of rows")
        m = len(self.cluster_ids)
        if m < 1:
            raise DataError("dataset needs at least one cluster")
        if np.any(np.diff(cluster) < 0):
            raise DataError("rows must be contiguous and ordered by cluster index")
        sizes = np.bincount(cluster, minlength=m)
        if sizes.shape[0] != m or np.any(sizes < 1):
            raise DataError("every cluster needs at least one row and indices must be < m")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise DataError("non-finite values in y or X")
        if not np.all(offset > 0) or not np.all(np.isfinite(offset)):
            raise DataError("offsets must be strictly positive and finite")
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("covariate_names length does not match X")
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "offset", _frozen(offset))
        object.__setattr__(self, "cluster", _frozen(cluster))
        object.__setattr__(self, "cluster_ids", tuple(str(c) for c in self.cluster_ids))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "sizes", _frozen(sizes))
        object.__setattr__(self, "starts", _frozen(starts))

    @property
    def m(self) -> int:
        return len(self.cluster_ids)

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def has_offset(self) -> bool:
        return bool(np.any(self.offset != 1.0))

    def rows(self, i: int) -> slice:
        s = int(self.starts[i])
        return slice(s, s + int(self.sizes[i]))

    def cluster_sums(self, a: np.ndarray) -> np.ndarray:
        """Sum per-row values ``a`` (shape (N,) or (N, k)) within clusters."""
        return np.add.reduceat(a, self.starts, axis=0)

    def subset(self, clusters: Sequence[int]) -> ClusteredDataset:
        idx = np.concatenate([np.arange(self.N)[self.rows(i)] for i in clusters])
        sizes = [int(self.sizes[i]) for i in clusters]
        return ClusteredDataset(
            y=self.y[idx],
            X=self.X[idx],
            offset=self.offset[idx],
            cluster=np.repeat(np.arange(len(clusters)), sizes),
            cluster_ids=tuple(self.cluster_ids[i] for i in clusters),
            covariate_names=self.covariate_names,
        )

    def pooled(self, cluster_id: str = "pooled") -> ClusteredDataset:
        """The same rows treated as a single cluster."""
        return ClusteredDataset(
            y=self.y,
            X=self.X,
            offset=self.offset,
            cluster=np.zeros(self.N, dtype=np.intp),
            cluster_ids=(cluster_id,),
            covariate_names=self.covariate_names,
        )

    def canonical(self) -> ClusteredDataset:
        """Clusters ordered by id, rows within a cluster in lexicographic order.

        Two ingests of the same rows in different file orders have equal
        canonical forms.
        """
        order = sorted(range(self.m), key=lambda i: self.cluster_ids[i])
        idx = []
        for i in order:
            r = np.arange(self.N)[self.rows(i)]
            keys = np.column_stack([self.y[r], self.X[r], self.offset[r]])
            idx.append(r[np.lexsort(keys.T[::-1])])
        idx = np.concatenate(idx)
        return ClusteredDataset(
            y=self.y[idx],
            X=self.X[idx],
            offset=self.offset[idx],
            cluster=np.repeat(np.arange(self.m), [int(self.sizes[i]) for i in order]),
            cluster_ids=tuple(self.cluster_ids[i] for i in order),
            covariate_names=self.covariate_names,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClusteredDataset):
            return NotImplemented
        return (
            self.cluster_ids == other.cluster_ids
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.cluster, other.cluster)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.offset, other.offset)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Schema:
    """Column mapping for :func:`load_dataset`."""

    cluster: str
    response: str
    covariates: tuple[str, ...] = ()
    offset: str | None = None
    intercept: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        if value.strip() == "":
            raise ValueError
        return float(value)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} has non-numeric value {value!r}") from None


def load_dataset(path: str | Path, schema: Schema) -> ClusteredDataset:
    """Read a CSV file with a header row into a :class:`ClusteredDataset`.

    Clusters are indexed by first appearance in the file and rows keep their
    file order within a cluster. ``row`` numbers in error messages count data
    rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.cluster, schema.response, *schema.covariates]
        if schema.offset is not None:
            needed.append(schema.offset)
        for col in needed:
            if col not in header:
                raise SchemaError(f"missing column {col!r} (have {', '.join(header)})")
        records = list(reader)

    if not records:
        raise DataError(f"{path}: no data rows")

    index: dict[str, int] = {}
    cl, ys, xs, offs = [], [], [], []
    for r, rec in enumerate(records, start=1):
        cid = rec[schema.cluster]
        if cid is None or cid.strip() == "":
            raise ParseError(f"row {r}: empty cluster id")
        cl.append(index.setdefault(cid, len(index)))
        ys.append(_parse_float(rec[schema.response], schema.response, r))
        xs.append([_parse_float(rec[c], c, r) for c in schema.covariates])
        if schema.offset is not None:
            a = _parse_float(rec[schema.offset], schema.offset, r)
            if not a > 0:
                raise DataError(f"row {r}: offset must be positive, got {a}")
            offs.append(a)
        else:
            offs.append(1.0)

    cl_arr = np.asarray(cl, dtype=np.intp)
    order = np.argsort(cl_arr, kind="stable")
    X = np.asarray(xs, dtype=float).reshape(len(records), len(schema.covariates))
    names = tuple(schema.covariates)
    if schema.intercept:
        X = np.column_stack([np.ones(len(records)), X])
        names = (INTERCEPT, *names)
    if X.shape[1] == 0:
        raise SchemaError("no covariates and no intercept requested")
    return ClusteredDataset(
        y=np.asarray(ys)[order],
        X=X[order],
        offset=np.asarray(offs)[order],
        cluster=cl_arr[order],
        cluster_ids=tuple(index),
        covariate_names=names,
    )


def save_dataset(data: ClusteredDataset, path: str | Path) -> Schema:
    """Write ``data`` as CSV and return the schema that reads it back unchanged.

    A leading all-ones ``(intercept)`` column is not written (it is re-added
    on reading) and neither is an offset column when every offset is 1.
    """
    names = list(data.covariate_names)
    X = data.X
    intercept = bool(names) and names[0] == INTERCEPT and np.all(X[:, 0] == 1.0)
    if intercept:
        names, X = names[1:], X[:, 1:]
    offset = data.has_offset
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "y", *names] + (["offset"] if offset else []))
        for r in range(data.N):
            w.writerow(
                [data.cluster_ids[data.cluster[r]], repr(float(data.y[r]))]
                + [repr(float(v)) for v in X[r]]
                + ([repr(float(data.offset[r]))] if offset else [])
            )
    return Schema(cluster="cluster", response="y", covariates=tuple(names),
                  offset="offset" if offset else None, intercept=intercept)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Symmetric cluster similarities in [0, 1] with a zero diagonal."""

    s: np.ndarray

    def __post_init__(self) -> None:
        s = np.array(self.s, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DataError("similarity matrix must be square")
        if not np.all(np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
            raise DataError("similarity entries must lie in [0, 1]")
        if not np.array_equal(s, s.T):
            raise DataError("similarity matrix must be symmetric")
        if np.any(np.diag(s) != 0):
            raise DataError("similarity diagonal must be zero")
        object.__setattr__(self, "s", _frozen(s))

    @property
    def m(self) -> int:
        return self.s.shape[0]

    @classmethod
    def from_array(cls, a: np.ndarray) -> SimilarityMatrix:
        """Symmetrize by elementwise max and zero the diagonal."""
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError("similarity matrix must be square")
        if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise DataError("similarity entries must lie in [0, 1]")
        s = np.maximum(a, a.T)
        np.fill_diagonal(s, 0.0)
        return cls(s)

    @classmethod
    def from_blocks(cls, labels: Sequence[int]) -> SimilarityMatrix:
        """Indicator similarity: 1 between distinct clusters sharing a label."""
        lab = np.asarray(labels)
        s = (lab[:, None] == lab[None, :]).astype(float)
        np.fill_diagonal(s, 0.0)
        return cls(s)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SimilarityMatrix):
            return NotImplemented
        return np.array_equal(self.s, other.s)

    __hash__ = None  # type: ignore[assignment]


def load_similarity(path: str | Path, m: int, format: str = "dense-csv") -> SimilarityMatrix:
    """Read an ``m`` x ``m`` similarity matrix.

    ``dense-csv`` is a headerless numeric grid; ``edge-list`` is a CSV with
    header ``i,j,s`` giving zero-based cluster indices.
    """
    if format == "dense-csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
        a = np.empty((len(rows), len(rows[0]) if rows else 0))
        for r, row in enumerate(rows, start=1):
            if len(row) != m:
                raise DataError(f"row {r}: expected {m} entries, got {len(row)}")
            a[r - 1] = [_parse_float(v, f"col{j}", r) for j, v in enumerate(row)]
        if a.shape != (m, m):
            raise DataError(f"expected a {m}x{m} grid, got {a.shape[0]}x{a.shape[1]}")
        return SimilarityMatrix.from_array(a)
    if format == "edge-list":
        a = np.zeros((m, m))
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for col in ("i", "j", "s"):
                if col not in (reader.fieldnames or []):
                    raise SchemaError(f"edge list is missing column {col!r}")
            for r, rec in enumerate(reader, start=1):
                i = int(_parse_float(rec["i"], "i", r))
                j = int(_parse_float(rec["j"], "j", r))
                v = _parse_float(rec["s"], "s", r)
                if not (0 <= i < m and 0 <= j < m):
                    raise IndexError(f"row {r}: cluster index out of range for m={m}")
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"row {r}: similarity {v} outside [0, 1]")
                a[i, j] = max(a[i, j], v)
        return SimilarityMatrix.from_array(a)
    raise ValueError(f"unknown similarity format {format!r}")
