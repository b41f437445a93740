import numpy as np
import pytest

from tdml.errors import InvalidArgumentError
from tdml.retrieval import build_index, query


def triples(n, dim, rng, label_of=lambda i: f"L{i % 3}"):
    return [(f"id{i:03d}", label_of(i), rng.normal(size=dim)) for i in range(n)]


class TestBuildIndex:
    def test_basic(self):
        rng = np.random.default_rng(0)
        idx = build_index(triples(10, 4, rng))
        assert len(idx) == 10
        assert idx.dim == 4

    def test_duplicate_id_named(self):
        recs = [("a", "x", np.ones(2)), ("b", "x", np.ones(2)), ("a", "y", np.zeros(2))]
        with pytest.raises(InvalidArgumentError, match="'a'"):
            build_index(recs)

    def test_ragged_dims_named(self):
        recs = [("a", "x", np.ones(2)), ("wide", "x", np.ones(3))]
        with pytest.raises(InvalidArgumentError, match="'wide'"):
            build_index(recs)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            build_index([])


class TestQuery:
    def test_orders_by_distance(self):
        idx = build_index(
            [
                ("far", "x", np.array([10.0, 0.0])),
                ("near", "x", np.array([1.0, 0.0])),
                ("mid", "x", np.array([5.0, 0.0])),
            ]
        )
        res = query(idx, np.zeros(2), k=3)
        assert res.ids() == ("near", "mid", "far")
        assert res[0].distance == 1.0
        assert res[2].distance == 100.0

    def test_exact_ties_break_by_ascending_id(self):
        v = np.array([1.0, 2.0])
        idx = build_index([("zz", "x", v), ("aa", "x", v), ("mm", "y", v)])
        res = query(idx, np.zeros(2), k=3)
        assert res.ids() == ("aa", "mm", "zz")

    def test_tie_break_independent_of_insertion_order(self):
        v = np.array([0.5, 0.5])
        for perm in ([0, 1, 2], [2, 1, 0], [1, 2, 0]):
            recs = [("b", "x", v), ("c", "x", v), ("a", "x", v)]
            idx = build_index([recs[i] for i in perm])
            assert query(idx, np.zeros(2), k=3).ids() == ("a", "b", "c")

    def test_exclude_id(self):
        rng = np.random.default_rng(1)
        recs = triples(6, 3, rng)
        idx = build_index(recs)
        res = query(idx, recs[2][2], k=10, exclude_id="id002")
        assert "id002" not in res.ids()
        assert len(res) == 5
        # Without exclusion the self-match ranks first at distance zero.
        res_all = query(idx, recs[2][2], k=10)
        assert res_all.ids()[0] == "id002"
        assert res_all[0].distance == 0.0

    def test_k_truncates_and_overshoots(self):
        rng = np.random.default_rng(2)
        idx = build_index(triples(7, 3, rng))
        assert len(query(idx, np.zeros(3), k=4)) == 4
        assert len(query(idx, np.zeros(3), k=50)) == 7
        with pytest.raises(InvalidArgumentError):
            query(idx, np.zeros(3), k=0)

    def test_query_dim_mismatch(self):
        rng = np.random.default_rng(3)
        idx = build_index(triples(4, 3, rng))
        with pytest.raises(InvalidArgumentError):
            query(idx, np.zeros(5), k=1)
