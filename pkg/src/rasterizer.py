"""
Orthographic projection and z-buffer rasterization of morphable-model faces.

Pixel convention: image units span [-1, 1] on both axes (x to the right,
y up). A point (X, Y) lands at pixel coordinates

    px = (X + 1) / 2 * W - 0.5
    py = (1 - Y) / 2 * H - 0.5

so pixel (i, j) has its center at integer coordinates (j, i). Depth is the
rotated z coordinate; larger z is nearer to the viewer.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ShapeError

if TYPE_CHECKING:
    from .morphable import CameraParams, FaceShape, MorphableModel


BACKGROUND = -1

# VisibilityMask: (H, W) int32, triangle index or BACKGROUND
# FaceMap: (H, W, 3) float32, (0, 0, 0) on background
VisibilityMask = np.ndarray
FaceMap = np.ndarray

LANDMARK_COUNT = 68


@dataclass(frozen=True)
class Projection:
    """Per-vertex pixel coordinates (N, 2) and depth (N,)."""
    xy: np.ndarray
    depth: np.ndarray


@dataclass(frozen=True)
class MouthBox:
    """Square crop [y0:y0+size, x0:x0+size]."""
    x0: int
    y0: int
    size: int

    def crop(self, image: np.ndarray) -> np.ndarray:
        """Crop an (H, W, ...) image."""
        return image[self.y0:self.y0 + self.size, self.x0:self.x0 + self.size]

    @property
    def center(self) -> tuple[float, float]:
        half = (self.size - 1) / 2
        return self.x0 + half, self.y0 + half


def project(shape: "FaceShape", camera: "CameraParams", H: int, W: int) -> Projection:
    """
    Project vertices orthographically: v -> scale * R v, shift x/y by the
    camera translation, map to pixel coordinates. z is kept as depth.
    """
    points = shape.vertices.reshape(-1, 3)
    rotated = camera.scale * points @ camera.matrix.T
    X = rotated[:, 0] + camera.translation[0]
    Y = rotated[:, 1] + camera.translation[1]
    px = (X + 1.0) / 2.0 * W - 0.5
    py = (1.0 - Y) / 2.0 * H - 0.5
    return Projection(xy=np.stack([px, py], axis=1), depth=rotated[:, 2])


def _edge(ax, ay, bx, by, px, py):
    """Edge function of (a -> b) at p; positive on the inner side of a CCW-in-pixel-space triangle."""
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_boundary(ax, ay, bx, by):
    """Top-left fill rule: pixels exactly on an edge belong to it only for top or left edges."""
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize_triangles(
    xy: np.ndarray,
    depth: np.ndarray,
    triangles: np.ndarray,
    H: int,
    W: int,
) -> VisibilityMask:
    """
    Z-buffer rasterization of projected triangles.

    Candidate (triangle, pixel) pairs come from each triangle's bounding
    box; coverage uses edge functions with the top-left rule. The nearest
    depth (largest z) wins; exact ties go to the lower triangle index.
    Zero-area triangles are skipped.

    Args:
        xy: (N, 2) pixel coordinates.
        depth: (N,) depth values.
        triangles: (F, 3) vertex indices.
        H, W: Image size.

    Returns:
        (H, W) int32 triangle index per pixel, BACKGROUND where empty.
    """
    mask = np.full((H, W), BACKGROUND, dtype=np.int32)
    if triangles.size == 0:
        return mask

    p = xy[triangles]          # (F, 3, 2)
    z = depth[triangles]       # (F, 3)
    area = _edge(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])

    # Normalize orientation so area > 0
    flip = area < 0
    p[flip] = p[flip][:, [0, 2, 1]]
    z[flip] = z[flip][:, [0, 2, 1]]
    area = np.abs(area)

    valid = area > 1e-12
    x_lo = np.ceil(p[..., 0].min(axis=1)).clip(0, W)
    x_hi = np.floor(p[..., 0].max(axis=1)).clip(-1, W - 1)
    y_lo = np.ceil(p[..., 1].min(axis=1)).clip(0, H)
    y_hi = np.floor(p[..., 1].max(axis=1)).clip(-1, H - 1)
    widths = np.where(valid, x_hi - x_lo + 1, 0).clip(min=0).astype(np.int64)
    heights = np.where(valid, y_hi - y_lo + 1, 0).clip(min=0).astype(np.int64)
    counts = widths * heights
    total = int(counts.sum())
    if total == 0:
        return mask

    # Enumerate every (triangle, pixel) candidate in the bounding boxes
    tri = np.repeat(np.arange(len(triangles)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    w = widths[tri]
    cx = x_lo[tri] + local % w
    cy = y_lo[tri] + local // w

    a, b, c = p[tri, 0], p[tri, 1], p[tri, 2]
    e0 = _edge(b[:, 0], b[:, 1], c[:, 0], c[:, 1], cx, cy)  # opposite vertex 0
    e1 = _edge(c[:, 0], c[:, 1], a[:, 0], a[:, 1], cx, cy)  # opposite vertex 1
    e2 = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], cx, cy)  # opposite vertex 2

    inside = (
        ((e0 > 0) | ((e0 == 0) & _owns_boundary(b[:, 0], b[:, 1], c[:, 0], c[:, 1])))
        & ((e1 > 0) | ((e1 == 0) & _owns_boundary(c[:, 0], c[:, 1], a[:, 0], a[:, 1])))
        & ((e2 > 0) | ((e2 == 0) & _owns_boundary(a[:, 0], a[:, 1], b[:, 0], b[:, 1])))
    )
    if not inside.any():
        return mask

    tri, cx, cy = tri[inside], cx[inside], cy[inside]
    ar = area[tri]
    zt = z[tri]
    pixel_depth = (e0[inside] * zt[:, 0] + e1[inside] * zt[:, 1] + e2[inside] * zt[:, 2]) / ar

    pixel = cy.astype(np.int64) * W + cx.astype(np.int64)
    order = np.lexsort((tri, -pixel_depth, pixel))
    pixel, tri = pixel[order], tri[order]
    first = np.concatenate([[True], pixel[1:] != pixel[:-1]])
    mask.reshape(-1)[pixel[first]] = tri[first]
    return mask


def shade(mask: VisibilityMask, colors: np.ndarray, background) -> np.ndarray:
    """
    Color each pixel by its triangle's color, background elsewhere.

    Args:
        mask: (H, W) triangle indices.
        colors: (F, C) per-triangle colors.
        background: C values (or scalar) for empty pixels.

    Returns:
        (H, W, C) float32 image.
    """
    colors = np.asarray(colors, dtype=np.float32)
    out = np.empty(mask.shape + (colors.shape[1],), dtype=np.float32)
    out[...] = np.asarray(background, dtype=np.float32)
    face = mask != BACKGROUND
    out[face] = colors[mask[face]]
    return out


def rasterize(
    shape: "FaceShape",
    camera: "CameraParams",
    model: "MorphableModel",
    H: int,
    W: int,
) -> tuple[VisibilityMask, FaceMap]:
    """
    Render the semantic face map of a shape.

    Face pixels carry the model's semantic color of the visible triangle
    (normalized mean-shape triangle center), so a triangle has the same
    color under every pose and identity. Background is exactly zero.

    Raises:
        ShapeError: If the shape doesn't have 3N entries for this model.
    """
    if shape.vertices.shape != (3 * model.N,):
        raise ShapeError(f"Shape has {shape.vertices.shape[0]} entries, model expects {3 * model.N}")
    if H < 1 or W < 1:
        raise ShapeError(f"Image size must be positive, got {H}x{W}")
    proj = project(shape, camera, H, W)
    mask = rasterize_triangles(proj.xy, proj.depth, model.triangles, H, W)
    return mask, shade(mask, model.semantic_colors, 0.0)


def mouth_box(
    shape: "FaceShape",
    camera: "CameraParams",
    model: "MorphableModel",
    H: int,
    W: int,
    size: int,
) -> MouthBox:
    """
    Square crop of side `size` centered on the projected mouth centroid,
    shifted to lie fully inside the image.

    Raises:
        ShapeError: If size doesn't fit the image.
    """
    if not 0 < size <= min(H, W):
        raise ShapeError(f"Mouth box size {size} does not fit a {H}x{W} image")
    proj = project(shape, camera, H, W)
    cx, cy = proj.xy[model.mouth_vertex_indices].mean(axis=0)
    half = (size - 1) / 2
    x0 = int(np.clip(np.round(cx - half), 0, W - size))
    y0 = int(np.clip(np.round(cy - half), 0, H - size))
    return MouthBox(x0=x0, y0=y0, size=size)


def landmark_indices(model: "MorphableModel", count: int = LANDMARK_COUNT) -> np.ndarray:
    """Evenly spaced vertex subset used as sparse landmarks."""
    count = min(count, model.N)
    return np.unique(np.round(np.linspace(0, model.N - 1, count)).astype(np.int64))


def render_landmarks(
    shape: "FaceShape",
    camera: "CameraParams",
    model: "MorphableModel",
    H: int,
    W: int,
) -> np.ndarray:
    """
    Sparse landmark image: one pixel per landmark vertex, colored by its
    normalized mean-shape coordinate. Nearer landmarks overwrite farther
    ones. Background is zero.
    """
    idx = landmark_indices(model)
    proj = project(shape, camera, H, W)
    lo, hi = model.color_box
    colors = ((model.vertices[idx] - lo) / (hi - lo)).astype(np.float32)

    cols = np.round(proj.xy[idx, 0]).astype(np.int64)
    rows = np.round(proj.xy[idx, 1]).astype(np.int64)
    keep = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)

    image = np.zeros((H, W, 3), dtype=np.float32)
    order = np.argsort(proj.depth[idx][keep], kind="stable")
    image[rows[keep][order], cols[keep][order]] = colors[keep][order]
    return image
