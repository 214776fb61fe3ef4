"""Top-down orthographic RGB-D rendering of cloth states.

Image conventions, used everywhere downstream:

* pixel coordinates are ``(col, row)`` with ``(0, 0)`` at the top-left;
* world ``+x`` maps to image ``+col``, world ``+y`` maps to image ``-row``;
* the camera looks straight down from ``camera_height`` above the workspace
  plane, so ``depth = camera_height - surface_z`` and the background depth
  equals ``camera_height``.

Renders are deterministic: identical state and camera give identical bytes.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from PIL import Image

from .sim import ClothState

FABRIC_COLOR = (70, 130, 200)
BACKGROUND_COLOR = (40, 40, 40)
# Stacked layers darken with surface height: full darkening at SHADE_HEIGHT
# meters above the plane (roughly three cloth layers).
SHADE_HEIGHT = 0.012
SHADE_STRENGTH = 0.45
DEPTH_MARGIN = 0.001  # meters; mask threshold below the background depth


class RenderError(Exception):
    pass


class ClothOutOfView(RenderError):
    """Some cloth particle projects outside the image frame."""


class OutOfFrame(RenderError):
    """A pixel coordinate lies outside the image frame."""


@dataclass(frozen=True)
class Camera:
    """Orthographic top-down camera over the workspace plane."""

    height_px: int = 224
    width_px: int = 224
    meters_per_pixel: float = 0.00235
    world_origin_px: tuple[float, float] = (112.0, 112.0)  # (col, row) of world 0,0
    camera_height: float = 0.65

    def __post_init__(self) -> None:
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")
        if self.height_px < 2 or self.width_px < 2:
            raise ValueError("image must be at least 2x2")
        if self.camera_height <= 0:
            raise ValueError("camera_height must be positive")

    def fits(self, side_x: float, side_y: float, margin: float = 0.1) -> bool:
        """Whether an axis-aligned footprint fits with the given frame margin."""
        w = side_x / self.meters_per_pixel
        h = side_y / self.meters_per_pixel
        return w <= self.width_px * (1 - 2 * margin) and h <= self.height_px * (
            1 - 2 * margin
        )


@dataclass
class Observation:
    """Rendered RGB-D frame: ``rgb`` H x W x 3 uint8, ``depth`` H x W float32
    meters from the camera."""

    rgb: np.ndarray
    depth: np.ndarray
    camera: Camera


def world_to_pixel(camera: Camera, p) -> tuple[int, int]:
    """World point (x, y[, z]) to the nearest (col, row) pixel.

    Raises :class:`OutOfFrame` if the pixel lands outside the image.
    """
    p = np.asarray(p, dtype=float)
    col = int(round(camera.world_origin_px[0] + p[0] / camera.meters_per_pixel))
    row = int(round(camera.world_origin_px[1] - p[1] / camera.meters_per_pixel))
    if not (0 <= col < camera.width_px and 0 <= row < camera.height_px):
        raise OutOfFrame(f"world ({p[0]:.4f}, {p[1]:.4f}) m -> pixel ({col}, {row})")
    return col, row


def pixel_to_world(camera: Camera, q) -> np.ndarray:
    """Pixel (col, row) to the world xy point under that pixel center."""
    col, row = float(q[0]), float(q[1])
    if not (0 <= col < camera.width_px and 0 <= row < camera.height_px):
        raise OutOfFrame(f"pixel ({q[0]}, {q[1]}) outside {camera.width_px}x{camera.height_px}")
    x = (col - camera.world_origin_px[0]) * camera.meters_per_pixel
    y = (camera.world_origin_px[1] - row) * camera.meters_per_pixel
    return np.array([x, y])


def visible_world_bounds(camera: Camera, margin_frac: float = 0.0):
    """World-xy rectangle seen by the camera, optionally shrunk by a fraction
    of the frame on each side. Returns (xmin, ymin, xmax, ymax)."""
    mcol = camera.width_px * margin_frac
    mrow = camera.height_px * margin_frac
    x0 = (mcol - camera.world_origin_px[0]) * camera.meters_per_pixel
    x1 = (camera.width_px - 1 - mcol - camera.world_origin_px[0]) * camera.meters_per_pixel
    y0 = (camera.world_origin_px[1] - (camera.height_px - 1 - mrow)) * camera.meters_per_pixel
    y1 = (camera.world_origin_px[1] - mrow) * camera.meters_per_pixel
    return x0, y0, x1, y1


@njit(cache=True)
def _bary(c, r, c0, r0, c1, r1, c2, r2):
    """Barycentric weights of pixel center (c, r) in a projected triangle.

    Degenerate (zero-area) triangles report w0 = -1 so the inside test fails.
    """
    denom = (r1 - r2) * (c0 - c2) + (c2 - c1) * (r0 - r2)
    if abs(denom) < 1e-12:
        return -1.0, 0.0, 0.0
    w0 = ((r1 - r2) * (c - c2) + (c2 - c1) * (r - r2)) / denom
    w1 = ((r2 - r0) * (c - c2) + (c0 - c2) * (r - r2)) / denom
    return w0, w1, 1.0 - w0 - w1


@njit(cache=True)
def _raster_quads(cols, rows, z, quads, height_px, width_px, zbuf):
    """Depth-max rasterization of grid quads at integer pixel centers.

    Each quad rasterizes as two triangles; ``zbuf`` keeps the topmost surface
    height per pixel (init to -inf marks background).
    """
    for q in range(quads.shape[0]):
        a, b, cc, d = quads[q, 0], quads[q, 1], quads[q, 2], quads[q, 3]
        cmin = int(math.floor(min(min(cols[a], cols[b]), min(cols[cc], cols[d]))))
        cmax = int(math.ceil(max(max(cols[a], cols[b]), max(cols[cc], cols[d]))))
        rmin = int(math.floor(min(min(rows[a], rows[b]), min(rows[cc], rows[d]))))
        rmax = int(math.ceil(max(max(rows[a], rows[b]), max(rows[cc], rows[d]))))
        if cmin < 0:
            cmin = 0
        if rmin < 0:
            rmin = 0
        if cmax > width_px - 1:
            cmax = width_px - 1
        if rmax > height_px - 1:
            rmax = height_px - 1
        for r in range(rmin, rmax + 1):
            for c in range(cmin, cmax + 1):
                w0, w1, w2 = _bary(
                    c, r, cols[a], rows[a], cols[b], rows[b], cols[cc], rows[cc]
                )
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    zp = w0 * z[a] + w1 * z[b] + w2 * z[cc]
                    if zp > zbuf[r, c]:
                        zbuf[r, c] = zp
                v0, v1, v2 = _bary(
                    c, r, cols[b], rows[b], cols[d], rows[d], cols[cc], rows[cc]
                )
                if v0 >= 0.0 and v1 >= 0.0 and v2 >= 0.0:
                    zp = v0 * z[b] + v1 * z[d] + v2 * z[cc]
                    if zp > zbuf[r, c]:
                        zbuf[r, c] = zp


def _grid_quads(rows: int, cols: int) -> np.ndarray:
    idx = np.arange(rows * cols).reshape(rows, cols)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    return np.stack([a, b, c, d], axis=1).astype(np.int64)


_QUAD_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _quads(rows: int, cols: int) -> np.ndarray:
    key = (rows, cols)
    q = _QUAD_CACHE.get(key)
    if q is None:
        q = _grid_quads(rows, cols)
        _QUAD_CACHE[key] = q
    return q


def render_topdown(state: ClothState, camera: Camera | None = None) -> Observation:
    """Render the cloth seen from straight above.

    Cloth pixels take the fabric color, darkened per extra stacked layer;
    depth is the camera distance to the topmost surface. Raises
    :class:`ClothOutOfView` if any particle projects outside the frame.
    """
    camera = camera or Camera()
    pos = state.positions
    cols = camera.world_origin_px[0] + pos[:, 0] / camera.meters_per_pixel
    rows = camera.world_origin_px[1] - pos[:, 1] / camera.meters_per_pixel
    ic = np.round(cols)
    ir = np.round(rows)
    if (
        ic.min() < 0
        or ic.max() > camera.width_px - 1
        or ir.min() < 0
        or ir.max() > camera.height_px - 1
    ):
        raise ClothOutOfView(
            f"cloth spans cols [{ic.min():.0f}, {ic.max():.0f}], "
            f"rows [{ir.min():.0f}, {ir.max():.0f}] in a "
            f"{camera.width_px}x{camera.height_px} frame"
        )

    zbuf = np.full((camera.height_px, camera.width_px), -np.inf)
    _raster_quads(
        cols,
        rows,
        pos[:, 2].astype(np.float64),
        _quads(state.spec.rows, state.spec.cols),
        camera.height_px,
        camera.width_px,
        zbuf,
    )

    covered = np.isfinite(zbuf)
    depth = np.full(zbuf.shape, camera.camera_height, dtype=np.float32)
    depth[covered] = (camera.camera_height - zbuf[covered]).astype(np.float32)

    rgb = np.empty((camera.height_px, camera.width_px, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_COLOR
    shade = 1.0 - SHADE_STRENGTH * np.clip(zbuf[covered] / SHADE_HEIGHT, 0.0, 1.0)
    base = np.array(FABRIC_COLOR, dtype=np.float64)
    rgb[covered] = np.clip(shade[:, None] * base[None, :], 0, 255).astype(np.uint8)
    return Observation(rgb=rgb, depth=depth, camera=camera)


def mask_from_depth(obs: Observation, depth_margin: float = DEPTH_MARGIN) -> np.ndarray:
    """Boolean cloth mask: pixels measurably closer than the background."""
    return obs.depth < obs.camera.camera_height - depth_margin


def save_observation(obs: Observation, rgb_path, depth_path) -> None:
    """Write the frame as an 8-bit RGB PNG and a 16-bit PNG of depth in
    millimeters (lossless; depths up to 65.5 m)."""
    Image.fromarray(obs.rgb).save(rgb_path, format="PNG")
    mm = np.round(obs.depth * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(depth_path, format="PNG")


def load_observation(rgb_path, depth_path, camera: Camera) -> Observation:
    """Read a frame written by :func:`save_observation` (depth back in meters,
    quantized to the millimeter)."""
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.uint8)
    mm = np.asarray(Image.open(depth_path), dtype=np.uint16)
    return Observation(
        rgb=rgb, depth=(mm.astype(np.float32) / 1000.0), camera=camera
    )


__all__ = [
    "Camera",
    "Observation",
    "RenderError",
    "ClothOutOfView",
    "OutOfFrame",
    "render_topdown",
    "mask_from_depth",
    "world_to_pixel",
    "pixel_to_world",
    "visible_world_bounds",
    "save_observation",
    "load_observation",
    "FABRIC_COLOR",
    "BACKGROUND_COLOR",
]
