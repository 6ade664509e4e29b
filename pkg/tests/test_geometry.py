import numpy as np
import pytest

from miqplan.geometry import (
    ConvexPolygon,
    DegenerateInput,
    EmptyDeflation,
    OrientedRectangle,
    Point2,
    PolygonCover,
    deflate,
    point_in_convex,
    rectangles_overlap,
    signed_area,
    triangulate_and_merge,
)


def square(lo=0.0, hi=4.0):
    return ConvexPolygon([(lo, lo), (hi, lo), (hi, hi), (lo, hi)])


def regular_polygon(n, circumradius, center=(0.0, 0.0)):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pts = np.stack([center[0] + circumradius * np.cos(ang),
                    center[1] + circumradius * np.sin(ang)], axis=1)
    return ConvexPolygon(pts)


def boundary_distance_samples(poly, pts):
    """Min distance from each point to the polygon boundary (exact, per edge)."""
    v = poly.vertices
    n = len(v)
    d = np.full(len(pts), np.inf)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.minimum(d, np.linalg.norm(pts - proj, axis=1))
    return d


class TestConvexPolygon:
    def test_duality_and_orientation(self):
        p = square()
        assert p.area() == pytest.approx(16.0)
        s = p.normals @ p.vertices.T - p.offsets[:, None]
        assert s.max() <= 1e-9

    def test_cw_input_is_reoriented(self):
        p = ConvexPolygon([(0, 0), (0, 1), (1, 1), (1, 0)])
        assert signed_area(p.vertices) > 0

    def test_collinear_vertices_dropped(self):
        p = ConvexPolygon([(0, 0), (2, 0), (4, 0), (4, 4), (0, 4)])
        assert len(p.vertices) == 4

    def test_nonconvex_rejected(self):
        with pytest.raises(Exception):
            ConvexPolygon([(0, 0), (4, 0), (1, 1), (0, 4)])


class TestPointInConvex:
    def test_centroid_inside(self):
        for poly in (square(), regular_polygon(7, 3.0, (1, -2))):
            assert point_in_convex(Point2(*poly.centroid()), poly)

    def test_far_point_outside(self):
        assert not point_in_convex(Point2(5.0, 0.0), square(0, 1))

    def test_boundary_vertex_inside_with_tol(self):
        poly = square(0, 1)
        assert point_in_convex(Point2(0.0, 0.0), poly, tol=1e-9)


class TestDeflate:
    def test_zero_radius_identity(self):
        p = square()
        q = deflate(p, 0.0)
        assert np.allclose(q.vertices, p.vertices)

    def test_axis_parallel_offset(self):
        q = deflate(square(0, 4), 1.0)
        assert sorted(map(tuple, np.round(q.vertices, 9).tolist())) == [
            (1.0, 1.0), (1.0, 3.0), (3.0, 1.0), (3.0, 3.0)]

    def test_hexagon_against_sampling_erosion_oracle(self):
        hexagon = regular_polygon(6, 2.0)
        q = deflate(hexagon, 0.5)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-2.2, 2.2, size=(100_000, 2))
        mask = np.all(q.normals @ pts.T <= q.offsets[:, None] + 1e-12, axis=0)
        inside = pts[mask]
        assert len(inside) > 1000
        d = boundary_distance_samples(hexagon, inside)
        assert d.min() >= 0.5 - 1e-9

    def test_each_halfspace_offset_reduced(self):
        hexagon = regular_polygon(6, 2.0)
        q = deflate(hexagon, 0.5)
        # same normals (no edge vanished for this radius), offsets reduced by 0.5
        order = np.argsort(np.arctan2(hexagon.normals[:, 1], hexagon.normals[:, 0]))
        qorder = np.argsort(np.arctan2(q.normals[:, 1], q.normals[:, 0]))
        assert np.allclose(hexagon.normals[order], q.normals[qorder], atol=1e-9)
        assert np.allclose(hexagon.offsets[order] - 0.5, q.offsets[qorder], atol=1e-9)

    def test_empty_deflation_raises(self):
        with pytest.raises(EmptyDeflation):
            deflate(square(0, 1), 0.6)

    def test_monotone_in_radius(self):
        p = regular_polygon(5, 3.0)
        inner = deflate(p, 1.0)
        outer = deflate(p, 0.4)
        for v in inner.vertices:
            assert outer.contains(v, tol=1e-9)


class TestTriangulateAndMerge:
    def test_convex_pentagon_single_piece(self):
        pent = regular_polygon(5, 2.0)
        cover = triangulate_and_merge(pent.vertices)
        assert len(cover.pieces) == 1
        assert cover.pieces[0].area() == pytest.approx(pent.area(), rel=1e-9)

    def test_l_shape(self):
        l_shape = [(0, 0), (4, 0), (4, 2), (2, 2), (2, 4), (0, 4)]
        cover = triangulate_and_merge(l_shape)
        assert len(cover.pieces) <= 3
        total = 12.0
        # membership sampling: union == L within tolerance
        rng = np.random.default_rng(11)
        pts = rng.uniform(0, 4, size=(20_000, 2))
        in_l = (pts[:, 0] <= 2) | (pts[:, 1] <= 2)
        in_cover = np.zeros(len(pts), dtype=bool)
        for piece in cover.pieces:
            in_cover |= np.all(piece.normals @ pts.T <= piece.offsets[:, None] + 1e-9, axis=0)
        # avoid boundary ambiguity
        margin = np.minimum.reduce([
            np.abs(pts[:, 0] - 2), np.abs(pts[:, 1] - 2),
            np.abs(pts[:, 0]), np.abs(pts[:, 1]),
            np.abs(pts[:, 0] - 4), np.abs(pts[:, 1] - 4)])
        keep = margin > 1e-6
        assert np.array_equal(in_l[keep], in_cover[keep])
        if not any(
            _overlapping_pair(cover) for _ in (0,)
        ):
            assert sum(p.area() for p in cover.pieces) == pytest.approx(total, abs=1e-9)

    def test_annulus_like_track(self):
        ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        outer = np.stack([10 * np.cos(ang), 10 * np.sin(ang)], axis=1)
        inner = np.stack([4 * np.cos(ang), 4 * np.sin(ang)], axis=1)
        cover = triangulate_and_merge(outer, holes=[inner])
        outer_poly = ConvexPolygon(outer)
        inner_poly = ConvexPolygon(inner)
        true_area = outer_poly.area() - inner_poly.area()
        rng = np.random.default_rng(3)
        pts = rng.uniform(-10, 10, size=(200_000, 2))
        in_cover = np.zeros(len(pts), dtype=bool)
        for piece in cover.pieces:
            in_cover |= np.all(piece.normals @ pts.T <= piece.offsets[:, None] + 1e-12, axis=0)
        mc_area = 400.0 * in_cover.mean()
        assert mc_area == pytest.approx(true_area, rel=2e-2)
        # soundness: cover points inside outer, outside hole
        sample = pts[in_cover][:5000]
        assert all(outer_poly.contains(p, tol=1e-7) for p in sample)
        assert not any(inner_poly.contains(p, tol=-1e-7) for p in sample)
        # completeness: ring points are covered
        ring = pts[~in_cover]
        in_ring = np.array([outer_poly.contains(p, tol=-1e-6) and not inner_poly.contains(p, tol=1e-6)
                            for p in ring[:5000]])
        assert not in_ring.any()

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateInput):
            triangulate_and_merge([(0, 0), (1, 0), (2, 0)])
        with pytest.raises(DegenerateInput):
            triangulate_and_merge([(0, 0), (2, 2), (2, 0), (0, 2)])

    def test_cover_pieces_all_convex(self):
        l_shape = [(0, 0), (6, 0), (6, 2), (2, 2), (2, 6), (0, 6)]
        cover = triangulate_and_merge(l_shape)
        for piece in cover.pieces:
            assert isinstance(piece, ConvexPolygon)


def _overlapping_pair(cover: PolygonCover) -> bool:
    for i in range(len(cover.pieces)):
        for j in range(i + 1, len(cover.pieces)):
            a, b = cover.pieces[i], cover.pieces[j]
            c = 0.5 * (a.centroid() + b.centroid())
            if a.contains(c, tol=-1e-9) and b.contains(c, tol=-1e-9):
                return True
    return False


class TestRectanglesOverlap:
    def test_identical(self):
        r = OrientedRectangle(Point2(0, 0), 2.0, 1.0, 0.3)
        assert rectangles_overlap(r, r)

    def test_far_apart(self):
        a = OrientedRectangle(Point2(0, 0), 1.0, 1.0, 0.0)
        b = OrientedRectangle(Point2(3, 0), 1.0, 1.0, 0.0)
        assert not rectangles_overlap(a, b)

    def test_rotated_pair_against_sampling_oracle(self):
        a = OrientedRectangle(Point2(0, 0), 2.0, 1.0, 0.0)
        b = OrientedRectangle(Point2(1.4, 0), 2.0, 1.0, np.pi / 4)
        assert rectangles_overlap(a, b) == _sampling_overlap_oracle(a, b)

    def test_random_pairs_match_oracle_and_symmetry(self):
        rng = np.random.default_rng(23)
        for _ in range(60):
            a = OrientedRectangle(Point2(*rng.uniform(-1, 1, 2)),
                                  rng.uniform(0.5, 2.5), rng.uniform(0.3, 1.5),
                                  rng.uniform(0, 2 * np.pi))
            b = OrientedRectangle(Point2(*rng.uniform(-2, 2, 2)),
                                  rng.uniform(0.5, 2.5), rng.uniform(0.3, 1.5),
                                  rng.uniform(0, 2 * np.pi))
            got = rectangles_overlap(a, b)
            assert got == rectangles_overlap(b, a)
            # the sampling oracle is only trustworthy away from grazing contact
            oracle = _sampling_overlap_oracle(a, b)
            if got != oracle:
                assert _near_touching(a, b)


def _sampling_overlap_oracle(a, b, n=10_000):
    """Dense point sampling inside rectangle `a`, membership-tested in `b`."""
    rng = np.random.default_rng(5)
    local = rng.uniform(-0.5, 0.5, size=(n, 2)) * [a.length, a.width]
    c, s = np.cos(a.heading), np.sin(a.heading)
    world = local @ np.array([[c, s], [-s, c]]) + [a.center.x, a.center.y]
    rel = world - [b.center.x, b.center.y]
    cb, sb = np.cos(b.heading), np.sin(b.heading)
    lb = rel @ np.array([[cb, -sb], [sb, cb]])
    inside = (np.abs(lb[:, 0]) < b.length / 2) & (np.abs(lb[:, 1]) < b.width / 2)
    return bool(inside.any())


def _near_touching(a, b, eps=0.05):
    ca, cb = a.corners(), b.corners()
    gaps = []
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        gaps.append(max(pb.min() - pa.max(), pa.min() - pb.max()))
    return abs(max(gaps)) < eps
