import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchmgn.delaunay import (
    DegenerateMeshError,
    build_edges_delaunay,
    delaunay_simplices,
    incircle_exact,
    undirected_edges,
)


def empty_circle_edges(pts, strict=True):
    """Brute-force oracle: pairs (a, b) admitting a circle through both with no point inside.

    Circles through a and b have centres m + t*n on the bisector; each other
    point bounds t from one side, so the edge exists iff the bounds leave room.
    """
    n = len(pts)
    out = set()
    for a in range(n):
        for b in range(a + 1, n):
            pa, pb = pts[a], pts[b]
            m = 0.5 * (pa + pb)
            d = pb - pa
            nrm = np.array([-d[1], d[0]])
            others = np.delete(np.arange(n), [a, b])
            c = pts[others] - m
            s = c @ nrm
            q = np.sum(c * c, axis=1) - np.sum((pa - m) ** 2)
            on_line = s == 0
            if np.any(on_line & (q < 0)):
                continue
            left, right = s > 0, s < 0
            upper = np.min(q[left] / (2 * s[left])) if left.any() else np.inf
            lower = np.max(q[right] / (2 * s[right])) if right.any() else -np.inf
            if lower < upper if strict else lower <= upper:
                out.add((a, b))
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 60))
def test_edges_match_empty_circle_oracle(seed, n):
    pts = np.random.default_rng(seed).random((n, 2))
    edges = set(map(tuple, undirected_edges(delaunay_simplices(pts)).tolist()))
    assert edges == empty_circle_edges(pts)


def test_unit_square_uses_fan_diagonal():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    edges = undirected_edges(delaunay_simplices(pts)).tolist()
    assert edges == [[0, 1], [0, 2], [0, 3], [1, 3], [2, 3]]
    # the same square listed in another order still picks the lowest corner
    perm = [3, 2, 1, 0]
    edges = set(map(tuple, undirected_edges(delaunay_simplices(pts[perm])).tolist()))
    assert (0, 3) in {tuple(sorted((perm[a], perm[b]))) for a, b in edges}


def test_cocircular_grid_is_a_valid_triangulation():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(4.0)), -1).reshape(-1, 2)
    simp = delaunay_simplices(g)
    assert len(simp) == 2 * 4 * 3
    edges = set(map(tuple, undirected_edges(simp).tolist()))
    assert edges <= empty_circle_edges(g, strict=False)
    # deterministic under repeated calls
    np.testing.assert_array_equal(simp, delaunay_simplices(g))


def test_arcs_come_in_both_directions():
    arcs = build_edges_delaunay(np.random.default_rng(1).random((30, 2)))
    assert np.array_equal(arcs[0::2], arcs[1::2][:, ::-1])
    assert np.all(arcs[0::2, 0] < arcs[0::2, 1])


@pytest.mark.parametrize(
    "pts",
    [
        [[0, 0], [1, 1], [2, 2]],  # collinear
        [[0, 0], [1, 0]],  # too few
        [[0, 0], [1, 0], [0, 1], [0, 0]],  # duplicate
        [[0, 0], [1, 0], [np.nan, 1]],
    ],
)
def test_degenerate_inputs(pts):
    with pytest.raises(DegenerateMeshError):
        delaunay_simplices(np.array(pts, dtype=float))


def test_incircle_exact_signs():
    a, b, c = (0, 0), (1, 0), (0, 1)
    assert incircle_exact(a, b, c, (0.5, 0.5)) == 1
    assert incircle_exact(a, b, c, (1, 1)) == 0
    assert incircle_exact(a, b, c, (2, 2)) == -1


def test_3d_tetrahedra():
    pts = np.random.default_rng(0).random((40, 3))
    simp = delaunay_simplices(pts)
    assert simp.shape[1] == 4
    assert set(np.unique(simp)) == set(range(40))
