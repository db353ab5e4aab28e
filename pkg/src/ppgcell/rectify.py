"""Skin-ROI extraction and piecewise affine rectification.

The region between the eyes and the mouth is cut out of each frame along
landmark chains, triangulated once per window, and warped triangle by
triangle onto a fixed 256x128 raster so that grid squares correspond
across frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial import Delaunay, QhullError

RECT_W = 256
RECT_H = 128

# 68-point layout: 0-16 jaw, 36-41 / 42-47 eyes, 48-59 outer lip.
# Boundary runs: jaw at eye height -> under the right eye -> across the
# nose bridge -> under the left eye -> down the jaw -> along the upper
# lip -> back up the jaw. Lower-eyelid and upper-lip chains exclude the
# eye and mouth interiors.
ROI_BOUNDARY = (1, 36, 41, 40, 39, 42, 47, 46, 45, 15,
                14, 13, 12, 54, 53, 52, 51, 50, 49, 48, 4, 3, 2)
# Nose landmarks used as interior triangulation vertices when they fall
# strictly inside the boundary polygon.
ROI_INTERIOR = (28, 29, 30, 31, 32, 33, 34, 35)

_MIN_TRIANGLE_AREA = 1e-6  # px^2


class GeometryError(ValueError):
    """Raised for degenerate landmark configurations or polygons."""


def polygon_area(poly: np.ndarray) -> float:
    """Unsigned area by the shoelace formula."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test, vectorized over points."""
    points = np.atleast_2d(points)
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def points_strictly_inside(points: np.ndarray, poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Inside by even-odd rule and farther than tol from every edge."""
    points = np.atleast_2d(points)
    inside = points_in_polygon(points, poly)
    mind = np.full(len(points), np.inf)
    for i in range(len(poly)):
        d = _point_segment_distance(points, poly[i], poly[(i + 1) % len(poly)])
        mind = np.minimum(mind, d)
    return inside & (mind > tol)


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    """Proper intersection test for segments p1p2 and p3p4."""
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def polygon_is_simple(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        for j in range(i + 1, n):
            # skip adjacent edges (they share a vertex)
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class RoiPolygon:
    """Skin polygon between the eyes and the mouth, plus interior vertices."""

    boundary: np.ndarray          # (B, 2) ordered boundary points
    interior: np.ndarray          # (I, 2) interior triangulation vertices
    boundary_indices: tuple[int, ...]
    interior_indices: tuple[int, ...]

    @property
    def vertices(self) -> np.ndarray:
        if len(self.interior):
            return np.vstack([self.boundary, self.interior])
        return self.boundary.copy()

    @property
    def vertex_indices(self) -> tuple[int, ...]:
        return self.boundary_indices + self.interior_indices

    def area(self) -> float:
        return polygon_area(self.boundary)


def build_roi(points68: np.ndarray) -> RoiPolygon:
    """Cut the eye-to-mouth skin polygon out of a 68-point landmark record."""
    pts = np.asarray(points68, dtype=np.float64)
    if pts.shape != (68, 2):
        raise GeometryError(f"expected (68, 2) landmarks, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("landmarks contain non-finite values")

    boundary = pts[list(ROI_BOUNDARY)]
    if polygon_area(boundary) < 1e-6:
        raise GeometryError("degenerate landmarks: ROI polygon has ~zero area")
    if not polygon_is_simple(boundary):
        raise GeometryError("degenerate landmarks: ROI polygon self-intersects")

    candidates = pts[list(ROI_INTERIOR)]
    keep = points_strictly_inside(candidates, boundary, tol=1e-6)
    interior_indices = tuple(idx for idx, k in zip(ROI_INTERIOR, keep) if k)
    return RoiPolygon(
        boundary=boundary,
        interior=pts[list(interior_indices)] if interior_indices else np.empty((0, 2)),
        boundary_indices=ROI_BOUNDARY,
        interior_indices=interior_indices,
    )


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (V, 2)
    triangles: np.ndarray  # (T, 3) int vertex indices

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same topology over a different vertex set (source <-> target)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise GeometryError("vertex count mismatch between meshes")
        return TriangleMesh(vertices=vertices, triangles=self.triangles)

    def triangle_areas(self) -> np.ndarray:
        t = self.vertices[self.triangles]
        return 0.5 * np.abs(
            (t[:, 1, 0] - t[:, 0, 0]) * (t[:, 2, 1] - t[:, 0, 1])
            - (t[:, 1, 1] - t[:, 0, 1]) * (t[:, 2, 0] - t[:, 0, 0]))


def triangulate(roi: RoiPolygon) -> TriangleMesh:
    """Delaunay triangulation of the ROI vertices, clipped to the polygon.

    The kept triangles are a subset of the Delaunay triangulation, so the
    empty-circumcircle property holds for all interior edges.
    """
    vertices = roi.vertices
    if len(vertices) < 3:
        raise GeometryError("polygon needs at least 3 vertices")
    try:
        tri = Delaunay(vertices)
    except QhullError as exc:
        raise GeometryError(f"degenerate polygon: {exc}") from exc
    simplices = tri.simplices
    centroids = vertices[simplices].mean(axis=1)
    keep = points_in_polygon(centroids, roi.boundary)
    mesh = TriangleMesh(vertices=vertices, triangles=simplices[keep])
    mesh = TriangleMesh(mesh.vertices,
                        mesh.triangles[mesh.triangle_areas() > _MIN_TRIANGLE_AREA])
    if len(mesh.triangles) == 0:
        raise GeometryError("triangulation produced no usable triangles")
    return mesh


def fill_rect(points: np.ndarray, width: int = RECT_W, height: int = RECT_H) -> np.ndarray:
    """Affinely map a point set to fill [0, width-1] x [0, height-1]."""
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    if span[0] <= 0 or span[1] <= 0:
        raise GeometryError("cannot normalize a zero-extent point set")
    out = np.empty_like(points)
    out[:, 0] = (points[:, 0] - lo[0]) * (width - 1) / span[0]
    out[:, 1] = (points[:, 1] - lo[1]) * (height - 1) / span[1]
    return out


@dataclass
class RectifiedFace:
    raster: np.ndarray  # (RECT_H, RECT_W, 3) uint8
    valid: np.ndarray   # (RECT_H, RECT_W) bool, inside the target mesh
    frame_index: int = 0
    face_id: int = 0


class PiecewiseAffineWarper:
    """Warps frames onto a fixed target mesh, one affine map per triangle.

    Pixel-to-triangle assignment and barycentric coordinates are computed
    once in target space; warping one frame is then a barycentric
    combination of that frame's source vertices followed by a bilinear
    sample. The barycentric transfer is exactly the per-triangle affine
    map written in a basis-free form.
    """

    def __init__(self, mesh_tgt: TriangleMesh, width: int = RECT_W, height: int = RECT_H):
        self.mesh_tgt = mesh_tgt
        self.width = width
        self.height = height
        xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                             np.arange(height, dtype=np.float64))
        pix = np.column_stack([xs.ravel(), ys.ravel()])

        n_pix = len(pix)
        tri_of_pix = np.full(n_pix, -1, dtype=np.int64)
        bary = np.zeros((n_pix, 3), dtype=np.float64)
        verts = mesh_tgt.vertices
        eps = 1e-9
        unassigned = np.ones(n_pix, dtype=bool)
        for t, (i, j, k) in enumerate(mesh_tgt.triangles):
            if not unassigned.any():
                break
            a, b, c = verts[i], verts[j], verts[k]
            det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
            if abs(det) < 1e-12:
                continue
            px = pix[unassigned]
            l1 = ((b[1] - c[1]) * (px[:, 0] - c[0]) + (c[0] - b[0]) * (px[:, 1] - c[1])) / det
            l2 = ((c[1] - a[1]) * (px[:, 0] - c[0]) + (a[0] - c[0]) * (px[:, 1] - c[1])) / det
            l3 = 1.0 - l1 - l2
            hit = (l1 >= -eps) & (l2 >= -eps) & (l3 >= -eps)
            idx = np.flatnonzero(unassigned)[hit]
            tri_of_pix[idx] = t
            bary[idx, 0] = l1[hit]
            bary[idx, 1] = l2[hit]
            bary[idx, 2] = l3[hit]
            unassigned[idx] = False

        covered = tri_of_pix >= 0
        self.valid = covered.reshape(height, width)
        self._pix_vertices = mesh_tgt.triangles[tri_of_pix[covered]]  # (P, 3)
        self._pix_bary = bary[covered]                                # (P, 3)
        self._covered_flat = np.flatnonzero(covered)
        # sparse pixel-by-vertex weight matrix so source positions are one matmul
        from scipy.sparse import csr_matrix
        n_cov = len(self._covered_flat)
        rows = np.repeat(np.arange(n_cov), 3)
        self._weights = csr_matrix(
            (self._pix_bary.ravel(), (rows, self._pix_vertices.ravel())),
            shape=(n_cov, len(mesh_tgt.vertices)))

    def source_positions(self, src_vertices: np.ndarray) -> np.ndarray:
        """Source-space sample position of every covered target pixel."""
        return self._weights @ np.asarray(src_vertices, dtype=np.float64)

    def warp(self, frame: np.ndarray, src_vertices: np.ndarray,
             frame_index: int = 0, face_id: int = 0) -> RectifiedFace:
        src_vertices = np.asarray(src_vertices, dtype=np.float64)
        if src_vertices.shape != self.mesh_tgt.vertices.shape:
            raise GeometryError("source vertex count does not match target mesh")
        pos = self.source_positions(src_vertices).astype(np.float32)
        map_x = np.full(self.height * self.width, -1.0, dtype=np.float32)
        map_y = np.full(self.height * self.width, -1.0, dtype=np.float32)
        map_x[self._covered_flat] = pos[:, 0]
        map_y[self._covered_flat] = pos[:, 1]
        raster = cv2.remap(frame, map_x.reshape(self.height, self.width),
                           map_y.reshape(self.height, self.width),
                           interpolation=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_REPLICATE)
        raster[~self.valid] = 0
        return RectifiedFace(raster=raster, valid=self.valid.copy(),
                             frame_index=frame_index, face_id=face_id)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sampling with clamp-to-edge, returns float64 (N, C)."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    flat = image.reshape(h * w, -1)
    base0, base1 = y0 * w, y1 * w
    p00 = flat.take(base0 + x0, axis=0).astype(np.float64)
    p01 = flat.take(base0 + x1, axis=0).astype(np.float64)
    p10 = flat.take(base1 + x0, axis=0).astype(np.float64)
    p11 = flat.take(base1 + x1, axis=0).astype(np.float64)
    top = p00 + (p01 - p00) * fx
    bot = p10 + (p11 - p10) * fx
    return top + (bot - top) * fy


def rectify_frame(frame: np.ndarray, mesh_src: TriangleMesh, mesh_tgt: TriangleMesh,
                  frame_index: int = 0, face_id: int = 0) -> RectifiedFace:
    """Warp one frame's ROI onto the fixed rectified raster.

    For repeated warps against the same target mesh, build a
    PiecewiseAffineWarper once and call warp() per frame instead.
    """
    if mesh_src.triangles.shape != mesh_tgt.triangles.shape or \
            not np.array_equal(mesh_src.triangles, mesh_tgt.triangles):
        raise GeometryError("source and target meshes must share topology")
    warper = PiecewiseAffineWarper(mesh_tgt)
    return warper.warp(frame, mesh_src.vertices, frame_index=frame_index, face_id=face_id)
