from __future__ import annotations

import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghm.data import (
    INTERCEPT,
    ClusteredDataset,
    DataError,
    ParseError,
    Schema,
    SchemaError,
    SimilarityMatrix,
    load_dataset,
    load_similarity,
    save_dataset,
)
from ghm.families import Poisson


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


ROWS = [
    ("a", 1.0, 0.5),
    ("b", 2.0, -0.1),
    ("a", 0.0, 0.3),
    ("b", 3.0, 0.9),
]


def test_four_rows_two_clusters(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["cid", "y", "x"], ROWS)
    d = load_dataset(path, Schema("cid", "y", ("x",)))
    assert d.m == 2
    assert list(d.sizes) == [2, 2]
    assert d.N == 4
    assert d.cluster_ids == ("a", "b")
    assert d.covariate_names == (INTERCEPT, "x")
    assert np.allclose(d.X[:, 0], 1.0)
    # rows keep file order within a cluster
    assert np.allclose(d.y, [1.0, 0.0, 2.0, 3.0])


def test_first_appearance_order(tmp_path):
    rows = [("z", 1, 0), ("a", 2, 0), ("z", 3, 0)]
    d = load_dataset(write_csv(tmp_path / "d.csv", ["c", "y", "x"], rows), Schema("c", "y", ("x",)))
    assert d.cluster_ids == ("z", "a")
    assert list(d.sizes) == [2, 1]


def test_no_intercept(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["cid", "y", "x"], ROWS)
    d = load_dataset(path, Schema("cid", "y", ("x",), intercept=False))
    assert d.p == 1


def test_missing_column_named(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["cid", "y", "x"], ROWS)
    with pytest.raises(SchemaError, match="'w'"):
        load_dataset(path, Schema("cid", "y", ("w",)))


def test_non_numeric_cell_reports_row(tmp_path):
    rows = list(ROWS)
    rows[2] = ("a", "oops", 0.3)
    path = write_csv(tmp_path / "d.csv", ["cid", "y", "x"], rows)
    with pytest.raises(ParseError, match="row 3"):
        load_dataset(path, Schema("cid", "y", ("x",)))


def test_nonpositive_offset(tmp_path):
    rows = [r + (1.0,) for r in ROWS]
    rows[1] = rows[1][:3] + (0.0,)
    path = write_csv(tmp_path / "d.csv", ["cid", "y", "x", "a"], rows)
    with pytest.raises(DataError, match="offset"):
        load_dataset(path, Schema("cid", "y", ("x",), offset="a"))


def test_unit_offset_same_likelihood(tmp_path):
    rows = [(c, int(y), x, 1.0) for c, y, x in ROWS]
    p1 = write_csv(tmp_path / "with.csv", ["cid", "y", "x", "a"], rows)
    p2 = write_csv(tmp_path / "without.csv", ["cid", "y", "x"], [r[:3] for r in rows])
    d1 = load_dataset(p1, Schema("cid", "y", ("x",), offset="a"))
    d2 = load_dataset(p2, Schema("cid", "y", ("x",)))
    fam = Poisson(np.array([0.2, -0.4]))
    assert np.array_equal(fam.logpdf(d1.y, d1.X, d1.offset), fam.logpdf(d2.y, d2.X, d2.offset))
    assert d1 == d2


def test_shuffled_rows_canonical_equal(tmp_path):
    rng = random.Random(3)
    rows = [(f"c{rng.randrange(5)}", rng.random(), rng.random()) for _ in range(40)]
    rows.sort(key=lambda r: r[0])
    shuffled = rows[:]
    rng.shuffle(shuffled)
    d1 = load_dataset(write_csv(tmp_path / "s.csv", ["c", "y", "x"], rows), Schema("c", "y", ("x",)))
    d2 = load_dataset(write_csv(tmp_path / "u.csv", ["c", "y", "x"], shuffled), Schema("c", "y", ("x",)))
    assert d1.canonical() == d2.canonical()
    assert d1.N == d2.N == 40


def test_dataset_is_immutable(tmp_path):
    d = load_dataset(write_csv(tmp_path / "d.csv", ["cid", "y", "x"], ROWS), Schema("cid", "y", ("x",)))
    with pytest.raises(ValueError):
        d.y[0] = 5.0


def test_save_load_roundtrip_with_offset(tmp_path):
    rng = np.random.default_rng(0)
    d = ClusteredDataset(
        y=rng.poisson(2.0, 12).astype(float),
        X=np.column_stack([np.ones(12), rng.normal(size=12)]),
        offset=rng.uniform(0.5, 2.0, 12),
        cluster=np.repeat([0, 1, 2], 4),
        cluster_ids=("x", "y", "z"),
        covariate_names=(INTERCEPT, "u"),
    )
    schema = save_dataset(d, tmp_path / "out.csv")
    assert load_dataset(tmp_path / "out.csv", schema) == d


def test_cluster_sums_and_subset():
    d = ClusteredDataset(y=np.arange(6.0), X=np.ones((6, 1)), offset=np.ones(6),
                         cluster=np.array([0, 0, 1, 1, 1, 2]), cluster_ids=("a", "b", "c"),
                         covariate_names=("one",))
    assert np.allclose(d.cluster_sums(d.y), [1.0, 9.0, 5.0])
    sub = d.subset([2, 0])
    assert sub.cluster_ids == ("c", "a")
    assert np.allclose(sub.y, [5.0, 0.0, 1.0])
    assert d.pooled().m == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcde"), st.floats(-1e6, 1e6), st.floats(-10, 10)),
                min_size=1, max_size=30))
def test_ingest_serialize_ingest_identity(tmp_path_factory, rows):
    tmp = tmp_path_factory.mktemp("rt")
    d = load_dataset(write_csv(tmp / "a.csv", ["c", "y", "x"], rows), Schema("c", "y", ("x",)))
    schema = save_dataset(d, tmp / "b.csv")
    assert load_dataset(tmp / "b.csv", schema) == d
    # sizes and N equal direct counts
    counts = {}
    for c, _, _ in rows:
        counts[c] = counts.get(c, 0) + 1
    assert [counts[c] for c in d.cluster_ids] == list(d.sizes)
    assert d.N == len(rows)


# --------------------------------------------------------------------------- #
# similarity
# --------------------------------------------------------------------------- #


def test_edge_list_single_edge(tmp_path):
    path = write_csv(tmp_path / "e.csv", ["i", "j", "s"], [(0, 1, 1.0)])
    s = load_similarity(path, 3, format="edge-list").s
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = 1.0
    assert np.array_equal(s, expected)


def test_dense_identity_zeroed(tmp_path):
    path = tmp_path / "d.csv"
    np.savetxt(path, np.eye(4), delimiter=",")
    assert np.array_equal(load_similarity(path, 4).s, np.zeros((4, 4)))


def test_dense_asymmetric_takes_max(tmp_path):
    a = np.zeros((3, 3))
    a[0, 1], a[1, 0] = 0.4, 0.6
    path = tmp_path / "d.csv"
    np.savetxt(path, a, delimiter=",")
    s = load_similarity(path, 3).s
    assert s[0, 1] == s[1, 0] == 0.6


def test_similarity_errors(tmp_path):
    with pytest.raises(IndexError):
        load_similarity(write_csv(tmp_path / "e.csv", ["i", "j", "s"], [(0, 3, 1.0)]), 3,
                        format="edge-list")
    with pytest.raises(DataError):
        load_similarity(write_csv(tmp_path / "f.csv", ["i", "j", "s"], [(0, 1, 1.5)]), 3,
                        format="edge-list")
    a = np.full((3, 3), 0.5)
    a[0, 2] = -0.1
    np.savetxt(tmp_path / "g.csv", a, delimiter=",")
    with pytest.raises(DataError):
        load_similarity(tmp_path / "g.csv", 3)
    with pytest.raises(DataError):
        load_similarity(tmp_path / "g.csv", 4)


def test_similarity_invariants_enforced():
    with pytest.raises(ValueError):
        SimilarityMatrix(np.array([[0.0, 0.2], [0.3, 0.0]]))
    with pytest.raises(ValueError):
        SimilarityMatrix(np.eye(2))
    blocks = SimilarityMatrix.from_blocks([0, 0, 1])
    assert np.array_equal(blocks.s, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(
    lambda m: st.lists(st.floats(0, 1), min_size=m * m, max_size=m * m).map(
        lambda v: np.array(v).reshape(m, m))))
def test_from_array_properties(a):
    s = SimilarityMatrix.from_array(a).s
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 0)
    off = ~np.eye(len(a), dtype=bool)
    assert np.array_equal(s[off], np.maximum(a, a.T)[off])
