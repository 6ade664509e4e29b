"""Planar geometry: convex polygons, inward offsets, convex covers, rectangle overlap.

Everything here is immutable after construction and safe to share between
threads.  Vertices are counter-clockwise, coordinates in meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-9


class GeometryError(Exception):
    pass


class EmptyDeflation(GeometryError):
    """Inward offset swallowed the whole polygon."""


class DegenerateInput(GeometryError):
    """Zero-area or self-intersecting input polygon."""


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise GeometryError("non-finite point coordinates")

    def as_array(self):
        return np.array([self.x, self.y], dtype=float)


def _as_vertex_array(vertices) -> np.ndarray:
    arr = np.asarray(
        [(v.x, v.y) if isinstance(v, Point2) else (v[0], v[1]) for v in vertices],
        dtype=float,
    )
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError("vertices must be a sequence of 2-d points")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite vertex")
    return arr


def signed_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _dedupe_collinear(v: np.ndarray, tol: float) -> np.ndarray:
    """Drop repeated and collinear vertices (keeps strict convexity checkable)."""
    keep = []
    n = len(v)
    for i in range(n):
        if keep and np.linalg.norm(v[i] - v[keep[-1]]) <= tol:
            continue
        keep.append(i)
    if len(keep) > 1 and np.linalg.norm(v[keep[0]] - v[keep[-1]]) <= tol:
        keep.pop()
    v = v[keep]
    # second pass: remove vertices whose neighbours are collinear with them
    changed = True
    while changed and len(v) > 3:
        changed = False
        n = len(v)
        out = []
        for i in range(n):
            a, b, c = v[i - 1], v[i], v[(i + 1) % n]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if abs(cross) <= tol * max(1.0, np.linalg.norm(c - a) ** 2):
                changed = True
                continue
            out.append(b)
        v = np.asarray(out)
    return v


class ConvexPolygon:
    """Strictly convex polygon kept in both vertex and half-space form.

    The interior is ``{x : normals @ x <= offsets}``; the two representations
    are checked against each other on construction.
    """

    def __init__(self, vertices, tol: float = DEFAULT_TOL):
        v = _as_vertex_array(vertices)
        if signed_area(v) < 0:
            v = v[::-1]
        v = _dedupe_collinear(v, tol)
        if len(v) < 3:
            raise GeometryError("polygon needs at least 3 non-collinear vertices")
        n = len(v)
        for i in range(n):
            a, b, c = v[i], v[(i + 1) % n], v[(i + 2) % n]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= tol:
                raise GeometryError("vertices are not strictly convex (CCW)")
        edges = np.roll(v, -1, axis=0) - v
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        offsets = np.einsum("ij,ij->i", normals, v)
        self._vertices = v
        self._vertices.setflags(write=False)
        self._normals = normals
        self._normals.setflags(write=False)
        self._offsets = offsets
        self._offsets.setflags(write=False)
        self.tol = tol
        self._check_duality(tol)

    def _check_duality(self, tol):
        # every vertex satisfies every halfspace; every halfspace tight at >= 2 vertices
        s = self._normals @ self._vertices.T - self._offsets[:, None]
        if s.max() > 10 * tol * max(1.0, np.abs(self._offsets).max()):
            raise GeometryError("halfspace/vertex duality violated")
        tight = (np.abs(s) <= 1e-7 * max(1.0, np.abs(self._offsets).max())).sum(axis=1)
        if np.any(tight < 2):
            raise GeometryError("halfspace not supported by an edge")

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def normals(self) -> np.ndarray:
        return self._normals

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    @property
    def halfspaces(self):
        return list(zip(self._normals, self._offsets))

    def area(self) -> float:
        return signed_area(self._vertices)

    def centroid(self) -> np.ndarray:
        v = self._vertices
        x, y = v[:, 0], v[:, 1]
        cr = x * np.roll(y, -1) - np.roll(x, -1) * y
        a = cr.sum() / 2.0
        cx = np.sum((x + np.roll(x, -1)) * cr) / (6 * a)
        cy = np.sum((y + np.roll(y, -1)) * cr) / (6 * a)
        return np.array([cx, cy])

    def bounding_box(self):
        v = self._vertices
        return (v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def contains(self, points, tol: float = DEFAULT_TOL):
        """Vectorized membership for an (m, 2) array (or a single point)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.all(self._normals @ p.T <= self._offsets[:, None] + tol, axis=0)
        return inside if inside.size > 1 else bool(inside[0])

    def distance_to_boundary(self, point) -> float:
        """Positive inside, negative outside (max-norm over halfspaces)."""
        p = np.asarray(point, dtype=float)
        return float(np.min(self._offsets - self._normals @ p))

    def __repr__(self):
        return f"ConvexPolygon({len(self._vertices)} vertices, area={self.area():.3g})"


def point_in_convex(p, poly: ConvexPolygon, tol: float = DEFAULT_TOL) -> bool:
    """True iff all halfspace inequalities hold within tol."""
    arr = p.as_array() if isinstance(p, Point2) else np.asarray(p, dtype=float)
    return bool(poly.contains(arr, tol=tol))


def _clip_halfplane(poly_pts: np.ndarray, normal, offset, tol) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex CCW polygon by n.x <= off."""
    out = []
    n = len(poly_pts)
    d = poly_pts @ np.asarray(normal) - offset
    for i in range(n):
        j = (i + 1) % n
        di, dj = d[i], d[j]
        if di <= tol:
            out.append(poly_pts[i])
        if (di <= tol) != (dj <= tol):
            t = di / (di - dj)
            out.append(poly_pts[i] + t * (poly_pts[j] - poly_pts[i]))
    return np.asarray(out) if out else np.empty((0, 2))


def halfspace_intersection(normals, offsets, seed_box, tol: float = DEFAULT_TOL):
    """Intersect halfspaces within a seed box; returns vertex array (possibly empty)."""
    xmin, ymin, xmax, ymax = seed_box
    pts = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=float)
    for n, o in zip(normals, offsets):
        pts = _clip_halfplane(pts, n, o, tol)
        if len(pts) < 3:
            return np.empty((0, 2))
    return pts


def deflate(polygon: ConvexPolygon, radius: float, tol: float = DEFAULT_TOL) -> ConvexPolygon:
    """Inward offset: shift every halfspace in by ``radius``.

    Every point of the result is at least ``radius`` from the source boundary.
    Raises EmptyDeflation when the offset polygon vanishes.
    """
    if radius < 0:
        raise GeometryError("deflation radius must be >= 0")
    if radius == 0:
        return polygon
    xmin, ymin, xmax, ymax = polygon.bounding_box()
    pad = 1.0
    pts = halfspace_intersection(
        polygon.normals, polygon.offsets - radius,
        (xmin - pad, ymin - pad, xmax + pad, ymax + pad), tol,
    )
    if len(pts) < 3 or abs(signed_area(pts)) <= tol:
        raise EmptyDeflation(f"radius {radius} leaves an empty polygon")
    try:
        return ConvexPolygon(pts, tol=tol)
    except GeometryError as exc:
        raise EmptyDeflation(f"radius {radius} leaves a degenerate polygon") from exc


@dataclass(frozen=True)
class PolygonCover:
    """Convex pieces whose union equals a source region (pieces may overlap)."""

    pieces: tuple

    def __post_init__(self):
        if not self.pieces:
            raise GeometryError("empty cover")

    def contains(self, point, tol: float = DEFAULT_TOL) -> bool:
        return any(p.contains(np.asarray(point, dtype=float), tol=tol) for p in self.pieces)

    def total_bounding_box(self):
        boxes = np.array([p.bounding_box() for p in self.pieces])
        return (boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())

    def deflated(self, radius: float) -> "PolygonCover":
        return PolygonCover(tuple(deflate(p, radius) for p in self.pieces))


# ---------------------------------------------------------------------------
# simple-polygon triangulation (ear clipping) with hole bridging


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _validate_simple(v: np.ndarray):
    n = len(v)
    if n < 3 or abs(signed_area(v)) < 1e-12:
        raise DegenerateInput("polygon has (near-)zero area")
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            b1, b2 = v[j], v[(j + 1) % n]
            if _segments_properly_intersect(a1, a2, b1, b2):
                raise DegenerateInput("polygon boundary self-intersects")


def _point_in_triangle(p, a, b, c, eps=1e-12):
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2, d3 = orient(a, b, p), orient(b, c, p), orient(c, a, p)
    return d1 > eps and d2 > eps and d3 > eps


def _point_in_triangle_closed(p, a, b, c, eps=1e-9):
    """Closed-triangle membership (CCW); points on edges count as inside."""

    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2, d3 = orient(a, b, p), orient(b, c, p), orient(c, a, p)
    return d1 >= -eps and d2 >= -eps and d3 >= -eps


def _ear_clip(v: np.ndarray) -> list:
    """Triangulate a simple CCW polygon; tolerates duplicated bridge vertices."""
    idx = list(range(len(v)))
    tris = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 4 * len(v) ** 2:
            raise DegenerateInput("ear clipping failed to make progress")
        n = len(idx)
        clipped = False
        for k in range(n):
            i0, i1, i2 = idx[(k - 1) % n], idx[k], idx[(k + 1) % n]
            a, b, c = v[i0], v[i1], v[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross < -1e-12:
                continue  # reflex
            if cross <= 1e-12:
                # degenerate sliver (bridge seam): clip without recording
                idx.pop(k)
                clipped = True
                break
            ok = True
            for m in idx:
                if m in (i0, i1, i2):
                    continue
                p = v[m]
                if np.allclose(p, a) or np.allclose(p, b) or np.allclose(p, c):
                    continue
                # a vertex on the candidate diagonal must block the ear too
                if _point_in_triangle_closed(p, a, b, c):
                    ok = False
                    break
            if ok:
                tris.append((v[i0].copy(), v[i1].copy(), v[i2].copy()))
                idx.pop(k)
                clipped = True
                break
        if not clipped:
            raise DegenerateInput("no ear found; input may self-intersect")
    a, b, c = (v[i] for i in idx)
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if cross > 1e-12:
        tris.append((a.copy(), b.copy(), c.copy()))
    return tris


def _bridge_hole(outer: np.ndarray, hole: np.ndarray) -> np.ndarray:
    """Join one CW hole to a CCW outer ring with a two-way cut."""
    hi = int(np.argmax(hole[:, 0]))
    hp = hole[hi]
    # shoot a ray in +x from hp, find nearest edge crossing on the outer ring
    best_t, best_edge, best_pt = np.inf, None, None
    n = len(outer)
    for i in range(n):
        a, b = outer[i], outer[(i + 1) % n]
        if (a[1] - hp[1]) * (b[1] - hp[1]) > 0:
            continue
        dy = b[1] - a[1]
        if abs(dy) < 1e-15:
            continue
        s = (hp[1] - a[1]) / dy
        if s < -1e-12 or s > 1 + 1e-12:
            continue
        x = a[0] + s * (b[0] - a[0])
        if x >= hp[0] - 1e-12 and x - hp[0] < best_t:
            best_t = x - hp[0]
            best_edge = i
            best_pt = np.array([x, hp[1]])
    if best_edge is None:
        raise DegenerateInput("hole is not inside the outer polygon")
    # pick the visible outer vertex: endpoint of the hit edge with larger x,
    # unless some reflex vertex inside triangle (hp, best_pt, cand) is closer
    a, b = outer[best_edge], outer[(best_edge + 1) % len(outer)]
    cand_idx = best_edge if a[0] > b[0] else (best_edge + 1) % len(outer)
    cand = outer[cand_idx]
    blocking = None
    best_metric = None
    for j in range(len(outer)):
        p = outer[j]
        if np.allclose(p, cand):
            continue
        if _point_in_triangle(p, hp, best_pt, cand) or _point_in_triangle(p, hp, cand, best_pt):
            d = np.arctan2(abs(p[1] - hp[1]), p[0] - hp[0])
            if best_metric is None or d < best_metric:
                best_metric = d
                blocking = j
    if blocking is not None:
        cand_idx = blocking
    # splice: outer[..cand], hole[hi..], hole[..hi], cand, outer[cand..]
    hole_seq = np.vstack([hole[hi:], hole[:hi + 1]])  # hole walked CW starting/ending at hp
    merged = np.vstack([
        outer[: cand_idx + 1],
        hole_seq,
        outer[cand_idx:],
    ])
    return merged


def _try_merge(a: ConvexPolygon, b: ConvexPolygon, tol) -> ConvexPolygon | None:
    """Merge two pieces iff the hull of their union equals the union."""
    shared = 0
    for va in a.vertices:
        if np.min(np.linalg.norm(b.vertices - va, axis=1)) <= 1e-7:
            shared += 1
    if shared < 2:
        return None
    pts = np.vstack([a.vertices, b.vertices])
    try:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(pts)
        hull_pts = pts[hull.vertices]
        merged = ConvexPolygon(hull_pts, tol=tol)
    except Exception:
        return None
    if abs(merged.area() - (a.area() + b.area())) > 1e-7 * max(1.0, merged.area()):
        return None
    return merged


def triangulate_and_merge(outer, holes=(), tol: float = DEFAULT_TOL,
                          grow_overlap: bool = True) -> PolygonCover:
    """Cover a simple polygon (optional holes) with convex pieces.

    Ear-clipping triangulation followed by a greedy merge in input order; a
    merge is accepted only when the merged hull equals the union.  With
    ``grow_overlap`` each merged piece is then greedily re-extended over the
    triangle soup so neighbouring pieces overlap; per-piece deflation then
    leaves no impassable seams between pieces.
    """
    v = _as_vertex_array(outer)
    if signed_area(v) < 0:
        v = v[::-1]
    _validate_simple(v)
    work = v
    hole_arrays = []
    for h in holes:
        hv = _as_vertex_array(h)
        if signed_area(hv) > 0:
            hv = hv[::-1]  # holes walked clockwise
        _validate_simple(hv)
        hole_arrays.append(hv)
    for hv in sorted(hole_arrays, key=lambda h: -h[:, 0].max()):
        work = _bridge_hole(work, hv)
    tris = _ear_clip(work)
    tris = [t for t in tris if abs(signed_area(np.asarray(t))) > 1e-10]
    if not tris:
        raise DegenerateInput("triangulation produced no area")
    pieces = [ConvexPolygon(np.asarray(t), tol=tol) for t in tris]

    # greedy pairwise merge in input order until no merge is accepted
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(pieces):
            j = i + 1
            while j < len(pieces):
                merged = _try_merge(pieces[i], pieces[j], tol)
                if merged is not None:
                    pieces[i] = merged
                    pieces.pop(j)
                    changed = True
                else:
                    j += 1
            i += 1

    if grow_overlap and len(pieces) > 1:
        tri_polys = [ConvexPolygon(np.asarray(t), tol=tol) for t in tris]
        grown = []
        for base in pieces:
            cur = base
            progress = True
            while progress:
                progress = False
                for t in tri_polys:
                    merged = _try_merge(cur, t, tol)
                    if merged is not None and merged.area() > cur.area() + 1e-10:
                        cur = merged
                        progress = True
            grown.append(cur)
        # drop pieces fully contained in another grown piece
        keep = []
        for i, p in enumerate(grown):
            redundant = False
            for j, q in enumerate(grown):
                if i != j and len(keep) + (len(grown) - i) > 1:
                    if all(q.contains(vv, tol=1e-7) for vv in p.vertices) and q.area() >= p.area():
                        if j < i or not all(p.contains(vv, tol=1e-7) for vv in q.vertices):
                            redundant = True
                            break
            if not redundant:
                keep.append(p)
        pieces = keep if keep else grown

    return PolygonCover(tuple(pieces))


# ---------------------------------------------------------------------------
# oriented rectangles (true-shape collision audit)


@dataclass(frozen=True)
class OrientedRectangle:
    center: Point2
    length: float
    width: float
    heading: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise GeometryError("rectangle needs positive length and width")

    def corners(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        half = np.array([
            [self.length / 2, self.width / 2],
            [-self.length / 2, self.width / 2],
            [-self.length / 2, -self.width / 2],
            [self.length / 2, -self.width / 2],
        ])
        return half @ rot.T + np.array([self.center.x, self.center.y])

    def axes(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.array([[c, s], [-s, c]])


def rectangles_overlap(a: OrientedRectangle, b: OrientedRectangle) -> bool:
    """Exact separating-axis test over both rectangles' edge normals.

    Touching boundaries do not count as overlap.
    """
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() <= pb.min() + 1e-12 or pb.max() <= pa.min() + 1e-12:
            return False
    return True
