"""Translation-only image registration: corner detection, patch matching, crop.

The geometric model is deliberately restricted to integer pixel translation.
The shift between a tile pair is estimated as the component-wise median of
displacement vectors from normalized cross-correlation matches, which
tolerates a large fraction of outlier matches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import GeoTile, translate_reflect

HARRIS_K = 0.04
HARRIS_SIGMA = 1.0
NMS_RADIUS = 5
PATCH_HALF = 5  # 11x11 correlation patches
DEFAULT_SEARCH_RADIUS = 32
DEFAULT_NCC_THRESHOLD = 0.7
DEFAULT_MAX_KEYPOINTS = 200
MIN_MATCHES = 4
CROP_LINEAR_FACTOR = 0.8  # 0.64 area ratio
MIN_CROP_SIDE = 256


class RegistrationError(Exception):
    """Base error for registration failures."""


class InsufficientMatchesError(RegistrationError):
    def __init__(self, n_pairs: int):
        super().__init__(f"insufficient matches: {n_pairs} accepted pairs (need {MIN_MATCHES})")
        self.n_pairs = n_pairs


class CropTooSmallError(RegistrationError):
    """Common-coverage crop would fall below the minimum usable side."""


@dataclass(frozen=True)
class KeyPoint:
    x: int
    y: int
    response: float


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple  # of (KeyPoint in a, KeyPoint in b, ncc score)
    estimated_shift: tuple[int, int]
    residual: float


def to_gray(image: np.ndarray) -> np.ndarray:
    """RGB uint8 -> float64 luminance; grayscale passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    return arr


def detect_keypoints(image: np.ndarray, max_points: int = DEFAULT_MAX_KEYPOINTS):
    """Harris corners with non-maximum suppression, strongest first."""
    gray = to_gray(image)
    if gray.shape[0] < 16 or gray.shape[1] < 16:
        raise ValueError(f"image too small for keypoint detection: {gray.shape}")
    iy, ix = np.gradient(gray)
    sxx = ndimage.gaussian_filter(ix * ix, HARRIS_SIGMA)
    syy = ndimage.gaussian_filter(iy * iy, HARRIS_SIGMA)
    sxy = ndimage.gaussian_filter(ix * iy, HARRIS_SIGMA)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    response = det - HARRIS_K * trace * trace

    local_max = ndimage.maximum_filter(response, size=2 * NMS_RADIUS + 1, mode="nearest")
    threshold = max(1e-10, 0.005 * float(response.max(initial=0.0)))
    ys, xs = np.nonzero((response >= local_max) & (response > threshold))
    if len(ys) == 0:
        return []
    scores = response[ys, xs]
    order = np.argsort(-scores, kind="stable")[:max_points]
    return [KeyPoint(x=int(xs[i]), y=int(ys[i]), response=float(scores[i])) for i in order]


def _patch(gray: np.ndarray, kp: KeyPoint):
    """11x11 patch around a keypoint, or None when it sticks out of bounds."""
    y0, y1 = kp.y - PATCH_HALF, kp.y + PATCH_HALF + 1
    x0, x1 = kp.x - PATCH_HALF, kp.x + PATCH_HALF + 1
    if y0 < 0 or x0 < 0 or y1 > gray.shape[0] or x1 > gray.shape[1]:
        return None
    return gray[y0:y1, x0:x1]


def _ncc(p: np.ndarray, q: np.ndarray) -> float:
    pc = p - p.mean()
    qc = q - q.mean()
    denom = np.sqrt((pc * pc).sum() * (qc * qc).sum())
    if denom == 0:
        return 0.0
    return float((pc * qc).sum() / denom)


def match_keypoints(
    a: np.ndarray,
    kps_a,
    b: np.ndarray,
    kps_b,
    search_radius: int = DEFAULT_SEARCH_RADIUS,
    ncc_threshold: float = DEFAULT_NCC_THRESHOLD,
) -> MatchSet:
    """Match corners by normalized cross-correlation of 11x11 patches.

    For each keypoint in ``a`` the best-correlating candidate in ``b`` within
    ``search_radius`` pixels is accepted when its NCC clears the threshold.
    The shift estimate is the component-wise median of displacements.
    """
    if not kps_a or not kps_b:
        raise ValueError("both keypoint sets must be nonempty")
    ga, gb = to_gray(a), to_gray(b)
    pairs = []
    r2 = search_radius * search_radius
    for ka in kps_a:
        pa = _patch(ga, ka)
        if pa is None:
            continue
        best, best_kb = -2.0, None
        for kb in kps_b:
            ddx, ddy = kb.x - ka.x, kb.y - ka.y
            if ddx * ddx + ddy * ddy > r2:
                continue
            pb = _patch(gb, kb)
            if pb is None:
                continue
            score = _ncc(pa, pb)
            if score > best:
                best, best_kb = score, kb
        if best_kb is not None and best >= ncc_threshold:
            pairs.append((ka, best_kb, best))
    if len(pairs) < MIN_MATCHES:
        raise InsufficientMatchesError(len(pairs))
    dxs = np.array([kb.x - ka.x for ka, kb, _ in pairs], dtype=np.float64)
    dys = np.array([kb.y - ka.y for ka, kb, _ in pairs], dtype=np.float64)
    dx = int(round(float(np.median(dxs))))
    dy = int(round(float(np.median(dys))))
    residual = float(np.median(np.abs(dxs - dx)) + np.median(np.abs(dys - dy))) / 2.0
    return MatchSet(pairs=tuple(pairs), estimated_shift=(dx, dy), residual=residual)


def apply_translation(tile: GeoTile, shift: tuple[int, int]) -> GeoTile:
    """Integer translation with mirror fill at exposed borders; metadata kept."""
    dx, dy = shift
    if abs(dx) >= tile.width or abs(dy) >= tile.height:
        raise ValueError(f"shift {shift} out of range for {tile.width}x{tile.height} tile")
    if (dx, dy) == (0, 0):
        return tile
    return tile.with_pixels(translate_reflect(np.asarray(tile.pixels), dx, dy))


def crop_window(
    shape: tuple[int, int],
    anchor: tuple[int, int],
    factor: float = CROP_LINEAR_FACTOR,
) -> tuple[slice, slice]:
    """Centered square window around the anchor, clamped inside bounds."""
    h, w = shape
    side = int(factor * min(h, w))
    ax, ay = anchor
    x0 = min(max(ax - side // 2, 0), w - side)
    y0 = min(max(ay - side // 2, 0), h - side)
    return slice(y0, y0 + side), slice(x0, x0 + side)


def common_crop(
    before: GeoTile,
    after: GeoTile,
    matches: MatchSet,
    min_side: int = MIN_CROP_SIDE,
):
    """Crop both tiles to the common-coverage square around the central match.

    The anchor is the matched point in ``after`` closest to its center; the
    window side is 0.8x the smaller tile dimension (area ratio 0.64). The
    ``before`` tile must already be translated into ``after``'s frame.
    """
    if (before.height, before.width) != (after.height, after.width):
        raise ValueError("before/after must share dimensions before cropping")
    cx, cy = after.width / 2.0, after.height / 2.0
    anchor_kp = min(matches.pairs, key=lambda p: (p[1].x - cx) ** 2 + (p[1].y - cy) ** 2)[1]
    rows, cols = crop_window((after.height, after.width), (anchor_kp.x, anchor_kp.y))
    side = rows.stop - rows.start
    if side < min_side:
        raise CropTooSmallError(f"tile too small after crop: side {side} < {min_side}")
    return (
        before.with_pixels(np.asarray(before.pixels)[rows, cols]),
        after.with_pixels(np.asarray(after.pixels)[rows, cols]),
        (rows, cols),
    )


def register_pair(before: GeoTile, after: GeoTile, max_keypoints=DEFAULT_MAX_KEYPOINTS,
                  search_radius=DEFAULT_SEARCH_RADIUS, ncc_threshold=DEFAULT_NCC_THRESHOLD):
    """Detect, match, and estimate the before->after shift in one call."""
    kps_a = detect_keypoints(np.asarray(before.pixels), max_keypoints)
    kps_b = detect_keypoints(np.asarray(after.pixels), max_keypoints)
    if not kps_a or not kps_b:
        raise InsufficientMatchesError(0)
    return match_keypoints(
        np.asarray(before.pixels), kps_a,
        np.asarray(after.pixels), kps_b,
        search_radius=search_radius, ncc_threshold=ncc_threshold,
    )
