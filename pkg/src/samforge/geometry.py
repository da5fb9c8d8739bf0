"""Landmark alignment, barycentric coordinates, mesh rasterization and
piecewise-affine warping.

Pixel ``(row, col)`` has its center at ``(x=col, y=row)``; landmarks use the
same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateTriangleError
from .model_io import EPS_AREA, PointSet, Triangulation

EPS_BARY = 1e-9
FRAME_MARGIN = 2
MIN_LONG_SIDE = 16


def _as_xy(points) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.points
    pts = np.asarray(points, dtype=np.float64)
    return pts.reshape(-1, 2)


def align_centroid(points) -> np.ndarray:
    """Remove the centroid and flatten to ``(x0, y0, x1, y1, ...)``.

    Translation only: no rotation or scale is removed.
    """
    pts = _as_xy(points)
    if pts.shape[0] < 1:
        raise ValueError("cannot align an empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite landmark coordinate")
    return (pts - pts.mean(axis=0)).ravel()


def unflatten(vec) -> np.ndarray:
    return np.asarray(vec, dtype=np.float64).reshape(-1, 2)


def barycentric(tri, p) -> tuple[float, float, float]:
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 2)
    (x1, y1), (x2, y2), (x3, y3) = tri
    det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    if abs(det) <= 2 * EPS_AREA:
        raise DegenerateTriangleError(f"degenerate triangle, area {abs(det) / 2:.3g}")
    px, py = float(p[0]), float(p[1])
    l2 = ((px - x1) * (y3 - y1) - (x3 - x1) * (py - y1)) / det
    l3 = ((x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)) / det
    return 1.0 - l2 - l3, l2, l3


def rasterize(points, triangles, width: int, height: int, eps: float = EPS_BARY):
    """Assign each pixel center to the lowest-index triangle covering it.

    Returns ``(tri_index, bary)``: an ``(height, width)`` int map with -1 for
    uncovered pixels and an ``(height, width, 3)`` barycentric map.
    """
    pts = _as_xy(points)
    tris = triangles.triangles if isinstance(triangles, Triangulation) else np.asarray(triangles)
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    corners = np.stack([a, b, c])
    x0 = np.clip(np.ceil(corners[..., 0].min(axis=0) - eps), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(corners[..., 0].max(axis=0) + eps), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(corners[..., 1].min(axis=0) - eps), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(corners[..., 1].max(axis=0) + eps), -1, height - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh

    tri_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    total = int(counts.sum())
    if total == 0:
        return tri_index, bary

    # Per-triangle affine map from pixel offsets to (l2, l3).
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    coef = np.column_stack([
        (c[:, 1] - a[:, 1]) / det, -(c[:, 0] - a[:, 0]) / det,
        -(b[:, 1] - a[:, 1]) / det, (b[:, 0] - a[:, 0]) / det,
    ])

    # One candidate (pixel, triangle) pair per bounding-box pixel, in triangle order.
    owner = np.repeat(np.arange(len(tris)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    w_own = bw[owner]
    cols = x0[owner] + local % w_own
    rows = y0[owner] + local // w_own
    dx = cols - a[owner, 0]
    dy = rows - a[owner, 1]
    k = coef[owner]
    l2 = dx * k[:, 0] + dy * k[:, 1]
    l3 = dx * k[:, 2] + dy * k[:, 3]
    l1 = 1.0 - l2 - l3
    inside = (l1 >= -eps) & (l2 >= -eps) & (l3 >= -eps)
    lam = np.column_stack([l1, l2, l3])

    pix = rows[inside] * width + cols[inside]
    # np.unique reports first occurrences, i.e. the lowest triangle index.
    uniq, first = np.unique(pix, return_index=True)
    sel = np.flatnonzero(inside)[first]
    tri_index.ravel()[uniq] = owner[sel]
    bary.reshape(-1, 3)[uniq] = lam[sel]
    return tri_index, bary


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """Rasterized mean-shape domain on which textures are compared.

    ``frame_xy = scale * (aligned_xy) + shift`` maps centroid-free shape
    coordinates into frame pixels.
    """

    width: int
    height: int
    mean_shape: np.ndarray
    triangulation: Triangulation
    mask: np.ndarray
    tri_index: np.ndarray
    bary: np.ndarray
    scale: float
    shift: np.ndarray

    @property
    def n_points(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())

    @property
    def mask_index(self) -> np.ndarray:
        """Flat row-major indices of masked pixels."""
        return np.flatnonzero(self.mask.ravel())

    def to_frame(self, points) -> np.ndarray:
        return self.scale * _as_xy(points) + self.shift

    def from_frame(self, points) -> np.ndarray:
        return (_as_xy(points) - self.shift) / self.scale

    def to_grid(self, vector) -> np.ndarray:
        grid = np.zeros(self.height * self.width)
        grid[self.mask_index] = vector
        return grid.reshape(self.height, self.width)


def build_reference_frame(mean_shape, tri: Triangulation, target_long_side: int = 256) -> ReferenceFrame:
    """Fit the mean shape into a frame whose longer side is
    ``target_long_side`` pixels with a fixed margin, and rasterize it."""
    if target_long_side < MIN_LONG_SIDE:
        raise ValueError(f"target_long_side must be >= {MIN_LONG_SIDE}, got {target_long_side}")
    pts = _as_xy(mean_shape)
    if pts.shape[0] != tri.n_points:
        raise ValueError(f"mean shape has {pts.shape[0]} points, triangulation expects {tri.n_points}")
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    long_extent = extent.max()
    if long_extent <= 0:
        raise ValueError("mean shape has zero extent")
    scale = (target_long_side - 1 - 2 * FRAME_MARGIN) / long_extent
    shift = FRAME_MARGIN - scale * lo
    dims = np.where(
        extent == long_extent,
        target_long_side,
        np.ceil(scale * extent - 1e-9).astype(np.int64) + 2 * FRAME_MARGIN + 1,
    ).astype(np.int64)
    width, height = int(dims[0]), int(dims[1])
    frame_pts = scale * pts + shift
    tri.check_areas(frame_pts)
    tri_index, bary = rasterize(frame_pts, tri, width, height)
    return ReferenceFrame(
        width=width,
        height=height,
        mean_shape=frame_pts,
        triangulation=tri,
        mask=tri_index >= 0,
        tri_index=tri_index,
        bary=bary,
        scale=float(scale),
        shift=shift,
    )


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at ``(x, y)``; coordinates outside the image
    clamp to the nearest edge pixel."""
    h, w = image.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def source_coordinates(src_points, frame: ReferenceFrame) -> tuple[np.ndarray, np.ndarray]:
    """Source-image location of every masked frame pixel (row-major order)."""
    pts = _as_xy(src_points)
    if pts.shape[0] != frame.n_points:
        raise ValueError(f"expected {frame.n_points} landmarks, got {pts.shape[0]}")
    frame.triangulation.check_areas(pts)
    idx = frame.mask_index
    tri_of = frame.tri_index.ravel()[idx]
    lam = frame.bary.reshape(-1, 3)[idx]
    verts = pts[frame.triangulation.triangles[tri_of]]
    xy = np.einsum("pk,pkd->pd", lam, verts)
    return xy[:, 0], xy[:, 1]


def warp_to_vector(pixels: np.ndarray, src_points, frame: ReferenceFrame) -> np.ndarray:
    x, y = source_coordinates(src_points, frame)
    return bilinear_sample(np.asarray(pixels, dtype=np.float64), x, y)


def warp_image(src, src_points, frame: ReferenceFrame) -> np.ndarray:
    """Piecewise-affine warp of ``src`` (a ScanImage or 2D array) into the
    reference frame; unmasked pixels are 0."""
    pixels = src.pixels if hasattr(src, "pixels") else src
    return frame.to_grid(warp_to_vector(pixels, src_points, frame))


def _fill_outside(grid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.all() or not mask.any():
        return grid
    _, (ri, ci) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return grid[ri, ci]


def render_on_shape(texture: np.ndarray, frame: ReferenceFrame, dst_points, width: int, height: int,
                    background: float = 0.0) -> np.ndarray:
    """Inverse of :func:`warp_image`: paint a frame texture grid onto the
    mesh placed at ``dst_points`` in a ``width`` x ``height`` canvas."""
    dst = _as_xy(dst_points)
    frame.triangulation.check_areas(dst)
    tri_index, bary = rasterize(dst, frame.triangulation, width, height)
    out = np.full((height, width), float(background))
    inside = tri_index >= 0
    if not inside.any():
        return out
    lam = bary[inside]
    verts = frame.mean_shape[frame.triangulation.triangles[tri_index[inside]]]
    xy = np.einsum("pk,pkd->pd", lam, verts)
    # Edge-extend the texture so bilinear taps at the mask border stay in-body.
    src = _fill_outside(np.asarray(texture, dtype=np.float64), frame.mask)
    out[inside] = bilinear_sample(src, xy[:, 0], xy[:, 1])
    return out
