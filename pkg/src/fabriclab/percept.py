"""Corner detection on cloth masks and set-of-mark image annotation.

Both detectors score the blurred binary mask with the 2x2 structure tensor
(window-summed gradient products). Candidate pixels are 3x3 local maxima
above ``max(response_quantile * max_response, min_response)``; survivors are
greedily non-max suppressed in order of response (ties broken row-major) and
capped at ``max_corners``. All pixels are ``(col, row)``.

Annotation palette (fixed; the prompt legend in the policy module names it):

* corner markers: red outline circles with white index labels
* bounding box: yellow outline
* fabric center: green cross
* prior place point: magenta filled dot
* symmetric point of the prior place about the center: cyan filled dot
* pick-to-place arrows: black, with a filled head (a dot when degenerate)
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .render import Observation, OutOfFrame, mask_from_depth

CORNER_COLOR = (220, 40, 40)
LABEL_COLOR = (255, 255, 255)
BBOX_COLOR = (240, 220, 60)
CENTER_COLOR = (60, 220, 60)
PRIOR_PLACE_COLOR = (220, 60, 220)
SYMMETRIC_COLOR = (60, 220, 220)
ARROW_COLOR = (0, 0, 0)

CORNER_RADIUS = 4
POINT_RADIUS = 3
CENTER_ARM = 4
ARROW_WIDTH = 2
ARROW_HEAD_LEN = 10.0
ARROW_HEAD_HALF_ANGLE = 0.45  # radians


class EmptyMask(Exception):
    """The observation contains no cloth pixels."""


@dataclass(frozen=True)
class CornerParams:
    window_radius: int = 2
    harris_k: float = 0.04
    response_quantile: float = 0.2
    min_separation: int = 10
    max_corners: int = 8
    blur_size: int = 3
    min_response: float = 1e-4  # absolute floor; kills rank-one edge responses

    def __post_init__(self) -> None:
        if not 0 < self.response_quantile < 1:
            raise ValueError("response_quantile must be in (0, 1)")
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1")


@dataclass
class PerceptSummary:
    """Detected corners plus the mask-derived box and center."""

    corners: list[tuple[int, int]]
    bbox: tuple[tuple[int, int], tuple[int, int]]  # ((cmin, rmin), (cmax, rmax))
    center: tuple[int, int]
    mask: np.ndarray

    def to_record(self) -> dict:
        return {
            "corners": [list(c) for c in self.corners],
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
            "center": list(self.center),
            "mask_pixels": int(self.mask.sum()),
        }


@dataclass
class AnnotatedImage:
    rgb: np.ndarray
    metadata: dict = field(default_factory=dict)


def _structure_tensor(mask: np.ndarray, params: CornerParams):
    if not mask.any():
        raise EmptyMask("no cloth pixels in mask")
    f = mask.astype(np.float64)
    if params.blur_size > 1:
        f = ndimage.uniform_filter(f, params.blur_size)
    gy, gx = np.gradient(f)
    w = 2 * params.window_radius + 1
    gxx = ndimage.uniform_filter(gx * gx, w)
    gyy = ndimage.uniform_filter(gy * gy, w)
    gxy = ndimage.uniform_filter(gx * gy, w)
    return gxx, gyy, gxy


def _peaks(resp: np.ndarray, params: CornerParams) -> list[tuple[int, int]]:
    thresh = max(params.response_quantile * float(resp.max()), params.min_response)
    local_max = resp == ndimage.maximum_filter(resp, size=3)
    cand = np.argwhere(local_max & (resp >= thresh))
    if len(cand) == 0:
        return []
    scores = resp[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
    kept: list[tuple[int, int]] = []
    min_sep2 = params.min_separation**2
    for i in order:
        r, c = int(cand[i, 0]), int(cand[i, 1])
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_sep2 for kc, kr in kept):
            kept.append((c, r))
        if len(kept) >= params.max_corners:
            break
    return kept


def detect_corners_shi_tomasi(
    mask: np.ndarray, params: CornerParams | None = None
) -> list[tuple[int, int]]:
    """Corners as local maxima of the smaller structure-tensor eigenvalue."""
    params = params or CornerParams()
    gxx, gyy, gxy = _structure_tensor(mask, params)
    resp = (gxx + gyy) / 2 - np.sqrt(((gxx - gyy) / 2) ** 2 + gxy**2)
    return _peaks(resp, params)


def detect_corners_harris(
    mask: np.ndarray, params: CornerParams | None = None
) -> list[tuple[int, int]]:
    """Corners as local maxima of det(M) - k * trace(M)^2."""
    params = params or CornerParams()
    gxx, gyy, gxy = _structure_tensor(mask, params)
    resp = gxx * gyy - gxy**2 - params.harris_k * (gxx + gyy) ** 2
    return _peaks(resp, params)


_DETECTORS = {
    "shi_tomasi": detect_corners_shi_tomasi,
    "harris": detect_corners_harris,
}


def summarize(
    obs: Observation,
    detector: str = "shi_tomasi",
    params: CornerParams | None = None,
) -> PerceptSummary:
    """Mask the background, box the fabric, and detect corners.

    Corners falling outside the mask's bounding box are discarded.
    """
    if detector not in _DETECTORS:
        raise ValueError(f"unknown detector {detector!r}; options: {sorted(_DETECTORS)}")
    mask = mask_from_depth(obs)
    if not mask.any():
        raise EmptyMask("no cloth pixels in observation")
    rows_any = np.flatnonzero(mask.any(axis=1))
    cols_any = np.flatnonzero(mask.any(axis=0))
    rmin, rmax = int(rows_any[0]), int(rows_any[-1])
    cmin, cmax = int(cols_any[0]), int(cols_any[-1])
    center = (round((cmin + cmax) / 2), round((rmin + rmax) / 2))
    corners = _DETECTORS[detector](mask, params)
    corners = [
        (c, r) for c, r in corners if cmin <= c <= cmax and rmin <= r <= rmax
    ]
    return PerceptSummary(
        corners=corners, bbox=((cmin, rmin), (cmax, rmax)), center=center, mask=mask
    )


def _dot(draw: ImageDraw.ImageDraw, px: tuple[float, float], radius: int, color):
    c, r = px
    draw.ellipse([c - radius, r - radius, c + radius, r + radius], fill=color)


def annotate_smoothing(
    obs: Observation,
    summary: PerceptSummary,
    prior_place: tuple[int, int] | None = None,
) -> AnnotatedImage:
    """Draw the set-of-mark overlay used by the smoothing prompt.

    Layers: labeled corner markers, bounding box, center cross; when
    ``prior_place`` is given, that point and its reflection about the center
    are marked as well. Pixels not under a marker are unchanged.
    """
    img = Image.fromarray(obs.rgb.copy())
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()

    (cmin, rmin), (cmax, rmax) = summary.bbox
    draw.rectangle([cmin, rmin, cmax, rmax], outline=BBOX_COLOR, width=1)

    cc, cr = summary.center
    draw.line([cc - CENTER_ARM, cr, cc + CENTER_ARM, cr], fill=CENTER_COLOR, width=1)
    draw.line([cc, cr - CENTER_ARM, cc, cr + CENTER_ARM], fill=CENTER_COLOR, width=1)

    for i, (c, r) in enumerate(summary.corners):
        draw.ellipse(
            [c - CORNER_RADIUS, r - CORNER_RADIUS, c + CORNER_RADIUS, r + CORNER_RADIUS],
            outline=CORNER_COLOR,
            width=1,
        )
        lx = min(max(c + CORNER_RADIUS + 1, 0), img.width - 7)
        ly = min(max(r - CORNER_RADIUS - 10, 0), img.height - 11)
        draw.text((lx, ly), str(i), fill=LABEL_COLOR, font=font)

    symmetric = None
    if prior_place is not None:
        symmetric = (2 * summary.center[0] - prior_place[0], 2 * summary.center[1] - prior_place[1])
        _dot(draw, prior_place, POINT_RADIUS, PRIOR_PLACE_COLOR)
        _dot(draw, symmetric, POINT_RADIUS, SYMMETRIC_COLOR)

    meta = {
        "kind": "smoothing",
        "corners": [list(c) for c in summary.corners],
        "bbox": [list(summary.bbox[0]), list(summary.bbox[1])],
        "center": list(summary.center),
        "prior_place": None if prior_place is None else list(prior_place),
        "symmetric_point": None if symmetric is None else list(symmetric),
    }
    return AnnotatedImage(rgb=np.asarray(img, dtype=np.uint8), metadata=meta)


def annotate_subgoal_arrow(
    img: np.ndarray, pick_px: tuple[int, int], place_px: tuple[int, int]
) -> AnnotatedImage:
    """Draw a black pick-to-place arrow (a dot if pick equals place)."""
    h, w = img.shape[:2]
    for name, (c, r) in (("pick", pick_px), ("place", place_px)):
        if not (0 <= c < w and 0 <= r < h):
            raise OutOfFrame(f"{name} pixel ({c}, {r}) outside {w}x{h}")
    out = Image.fromarray(np.ascontiguousarray(img[:, :, :3], dtype=np.uint8).copy())
    draw = ImageDraw.Draw(out)
    if tuple(pick_px) == tuple(place_px):
        _dot(draw, pick_px, POINT_RADIUS, ARROW_COLOR)
    else:
        p = np.asarray(pick_px, dtype=float)
        q = np.asarray(place_px, dtype=float)
        draw.line([*p, *q], fill=ARROW_COLOR, width=ARROW_WIDTH)
        d = q - p
        ang = np.arctan2(d[1], d[0])
        left = q - ARROW_HEAD_LEN * np.array(
            [np.cos(ang - ARROW_HEAD_HALF_ANGLE), np.sin(ang - ARROW_HEAD_HALF_ANGLE)]
        )
        right = q - ARROW_HEAD_LEN * np.array(
            [np.cos(ang + ARROW_HEAD_HALF_ANGLE), np.sin(ang + ARROW_HEAD_HALF_ANGLE)]
        )
        draw.polygon([*q, *left, *right], fill=ARROW_COLOR)
    meta = {
        "kind": "arrow",
        "pick": [int(pick_px[0]), int(pick_px[1])],
        "place": [int(place_px[0]), int(place_px[1])],
    }
    return AnnotatedImage(rgb=np.asarray(out, dtype=np.uint8), metadata=meta)


__all__ = [
    "CornerParams",
    "PerceptSummary",
    "AnnotatedImage",
    "EmptyMask",
    "detect_corners_shi_tomasi",
    "detect_corners_harris",
    "summarize",
    "annotate_smoothing",
    "annotate_subgoal_arrow",
]
