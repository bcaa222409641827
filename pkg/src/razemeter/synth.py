"""Deterministic synthetic before/after scene generator with exact ground truth.

Scenes are flat-shaded land-cover compositions: a tan background, vegetation
patches, a road with cars, scattered trees, and axis-aligned rectangular
buildings with a distinctive roof color. The after-scene removes a random
subset of buildings (replaced by rubble texture), applies an illumination
gain/bias, adds Gaussian noise, and shifts content by an integer jitter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .raster import GeoTile, translate_reflect

# land cover class ids
CLASS_IMPERVIOUS = 0
CLASS_BUILDING = 1
CLASS_LOW_VEG = 2
CLASS_TREES = 3
CLASS_CARS = 4
CLASS_BACKGROUND = 5
NUM_CLASSES = 6

CLASS_NAMES = ("impervious", "building", "low_vegetation", "trees", "cars", "background")

# flat base colors per class; per-pixel texture jitter is added on top
COLOR_BACKGROUND = (150, 140, 120)
COLOR_IMPERVIOUS = (96, 96, 96)
COLOR_BUILDING = (190, 70, 55)
COLOR_LOW_VEG = (110, 170, 85)
COLOR_TREES = (35, 95, 40)
COLOR_CARS = (45, 70, 185)


class SceneTooDenseError(Exception):
    """Rejection sampling could not place all requested buildings."""


class Footprint(NamedTuple):
    x: int
    y: int
    w: int
    h: int
    fid: int


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic before/after scene pair."""

    seed: int
    width: int = 512
    height: int = 512
    building_count: int = 40
    building_size_range: tuple[int, int] = (6, 14)
    destruction_rate: float = 0.3
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    jitter: tuple[int, int] = (0, 0)
    # buildings are kept this fraction of min(width, height) away from each
    # border so that jitter and the downstream centered crop never clip one
    edge_margin_frac: float = 0.22

    def __post_init__(self):
        if not 0.0 <= self.destruction_rate <= 1.0:
            raise ValueError("destruction_rate must be in [0, 1]")
        lo, hi = self.building_size_range
        if lo < 4 or hi < lo:
            raise ValueError("building sides must be >= 4 px and min <= max")
        if any(not 0.7 <= g <= 1.3 for g in self.gain):
            raise ValueError("per-channel gain must be in [0.7, 1.3]")
        if any(not -20.0 <= b <= 20.0 for b in self.bias):
            raise ValueError("per-channel bias must be in [-20, 20]")
        if any(not -10 <= j <= 10 for j in self.jitter):
            raise ValueError("jitter components must be in [-10, 10]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.width < 32 or self.height < 32:
            raise ValueError("scene must be at least 32x32")


@dataclass(frozen=True)
class SceneTruth:
    """Exact ground truth for one synthetic scene pair."""

    footprints_before: tuple[Footprint, ...]
    destroyed_ids: frozenset[int]
    label_map_before: np.ndarray
    label_map_after: np.ndarray

    @property
    def true_counts(self) -> tuple[int, int]:
        n = len(self.footprints_before)
        return n, n - len(self.destroyed_ids)


def truth_diff(truth: SceneTruth) -> int:
    """Number of buildings missing after the disaster."""
    n_before, n_after = truth.true_counts
    return n_before - n_after


def _texture(rng, shape, base, jitter=24):
    """Flat color plus per-pixel uniform jitter, clipped to uint8.

    The jitter is deliberately wide: real imagery has continuous intensity
    distributions, and downstream histogram specification misbehaves badly on
    histograms with empty gaps between class colors (tiny mass differences
    then teleport values across the gap).
    """
    arr = np.asarray(base, dtype=np.float64) + rng.integers(-jitter, jitter + 1, size=shape + (3,))
    return np.clip(arr, 0, 255).astype(np.uint8)


def _place_buildings(rng, spec: SceneSpec):
    """Rejection-sample non-overlapping building rectangles inside the safe region."""
    margin = max(12, round(spec.edge_margin_frac * min(spec.width, spec.height)))
    lo, hi = spec.building_size_range
    x_max = spec.width - margin
    y_max = spec.height - margin
    if x_max - margin < hi or y_max - margin < hi:
        raise SceneTooDenseError("scene too small for the building safe region")
    placed: list[Footprint] = []
    attempts = 0
    while len(placed) < spec.building_count:
        if attempts >= 10_000:
            raise SceneTooDenseError(
                f"scene too dense: placed {len(placed)}/{spec.building_count} buildings"
            )
        attempts += 1
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(margin, x_max - w + 1))
        y = int(rng.integers(margin, y_max - h + 1))
        # require >= 2 px separation from every existing building
        ok = all(
            x - 2 >= b.x + b.w or b.x - 2 >= x + w or y - 2 >= b.y + b.h or b.y - 2 >= y + h
            for b in placed
        )
        if ok:
            placed.append(Footprint(x, y, w, h, len(placed)))
    return placed


def _render_base(rng, spec: SceneSpec):
    """Background, vegetation, road, trees, and cars; returns (image, labels)."""
    h, w = spec.height, spec.width
    img = _texture(rng, (h, w), COLOR_BACKGROUND)
    labels = np.full((h, w), CLASS_BACKGROUND, dtype=np.uint8)

    yy, xx = np.mgrid[0:h, 0:w]

    # low vegetation: a few soft-edged ellipses. Radii are absolute, not
    # proportional to the scene: tiles share one ground resolution, so object
    # sizes must not depend on how large a window was rendered
    for _ in range(max(2, (h * w) // 40_000)):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        ry, rx = rng.integers(12, 80), rng.integers(12, 80)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[inside] = _texture(rng, (h, w), COLOR_LOW_VEG)[inside]
        labels[inside] = CLASS_LOW_VEG

    # one road strip, horizontal or vertical
    road_w = int(rng.integers(8, 15))
    horizontal = rng.random() < 0.5
    if horizontal:
        pos = int(rng.integers(0, h - road_w))
        road = (yy >= pos) & (yy < pos + road_w)
    else:
        pos = int(rng.integers(0, w - road_w))
        road = (xx >= pos) & (xx < pos + road_w)
    img[road] = _texture(rng, (h, w), COLOR_IMPERVIOUS, jitter=12)[road]
    labels[road] = CLASS_IMPERVIOUS

    # cars on the road
    for _ in range(int(rng.integers(2, 6))):
        if horizontal:
            cy = pos + int(rng.integers(1, max(2, road_w - 3)))
            cx = int(rng.integers(0, w - 4))
            car = (slice(cy, cy + 2), slice(cx, cx + 4))
        else:
            cx = pos + int(rng.integers(1, max(2, road_w - 3)))
            cy = int(rng.integers(0, h - 4))
            car = (slice(cy, cy + 4), slice(cx, cx + 2))
        img[car] = np.clip(
            np.asarray(COLOR_CARS) + rng.integers(-15, 16, size=3), 0, 255
        ).astype(np.uint8)
        labels[car] = CLASS_CARS

    # scattered trees
    for _ in range(max(4, (h * w) // 10_000)):
        r = int(rng.integers(2, 5))
        cy, cx = int(rng.integers(r, h - r)), int(rng.integers(r, w - r))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[disk] = _texture(rng, (h, w), COLOR_TREES, jitter=20)[disk]
        labels[disk] = CLASS_TREES

    return img, labels


def _draw_building(rng, img, labels, fp: Footprint):
    # moderate per-building color jitter: enough variety for matching to be
    # nontrivial, small enough that roofs stay a coherent color family. On
    # top of that, per-pixel texture keeps roofs from being histogram atoms
    color = np.asarray(COLOR_BUILDING) + rng.integers(-12, 13, size=3)
    img[fp.y:fp.y + fp.h, fp.x:fp.x + fp.w] = _texture(
        rng, (fp.h, fp.w), color, jitter=10
    )
    labels[fp.y:fp.y + fp.h, fp.x:fp.x + fp.w] = CLASS_BUILDING


def _rubble_fill(rng, img, labels, fp: Footprint):
    """Replace a destroyed building with background texture plus gray speckle."""
    region = (slice(fp.y, fp.y + fp.h), slice(fp.x, fp.x + fp.w))
    patch = _texture(rng, (fp.h, fp.w), COLOR_BACKGROUND)
    speckle = rng.random((fp.h, fp.w)) < 0.25
    gray = rng.integers(70, 140, size=(fp.h, fp.w, 1)).astype(np.uint8)
    patch = np.where(speckle[..., None], np.repeat(gray, 3, axis=2), patch)
    img[region] = patch
    labels[region] = CLASS_BACKGROUND


def synth_scene(spec: SceneSpec):
    """Generate (before tile, after tile, truth) deterministically from the spec seed."""
    rng = np.random.default_rng(spec.seed)

    base_img, base_labels = _render_base(rng, spec)
    footprints = _place_buildings(rng, spec)

    before_img = base_img.copy()
    before_labels = base_labels.copy()
    for fp in footprints:
        _draw_building(rng, before_img, before_labels, fp)

    destroyed_mask = rng.random(len(footprints)) < spec.destruction_rate
    destroyed = frozenset(fp.fid for fp, d in zip(footprints, destroyed_mask) if d)

    after_img = before_img.copy()
    after_labels = before_labels.copy()
    for fp, dead in zip(footprints, destroyed_mask):
        if dead:
            _rubble_fill(rng, after_img, after_labels, fp)

    # illumination change, sensor noise, then registration jitter
    after_f = after_img.astype(np.float64) * np.asarray(spec.gain) + np.asarray(spec.bias)
    if spec.noise_sigma > 0:
        after_f = after_f + rng.normal(0.0, spec.noise_sigma, size=after_f.shape)
    after_img = np.clip(np.rint(after_f), 0, 255).astype(np.uint8)

    dx, dy = spec.jitter
    if (dx, dy) != (0, 0):
        after_img = translate_reflect(after_img, dx, dy)
        after_labels = translate_reflect(after_labels, dx, dy)

    before = GeoTile(pixels=before_img, epoch="before")
    after = GeoTile(pixels=after_img, epoch="after")
    truth = SceneTruth(
        footprints_before=tuple(footprints),
        destroyed_ids=destroyed,
        label_map_before=before_labels,
        label_map_after=after_labels,
    )
    return before, after, truth


def truth_to_doc(truth: SceneTruth) -> dict:
    """JSON-serializable summary of a scene's ground truth."""
    n_before, n_after = truth.true_counts
    return {
        "footprints": [[fp.x, fp.y, fp.w, fp.h, fp.fid] for fp in truth.footprints_before],
        "destroyed_ids": sorted(truth.destroyed_ids),
        "counts": {"before": n_before, "after": n_after},
    }


# Sample disaster metadata used to seed synthetic manifests: (country, year,
# type, total deaths, total affected).
DISASTER_CATALOG = (
    ("Afghanistan", 2010, "flood", 70, 40000),
    ("Afghanistan", 2011, "flood", 25, 3000),
    ("Afghanistan", 2013, "flood", 20, 9500),
    ("Afghanistan", 2014, "flood", 431, 140000),
    ("Afghanistan", 2015, "earthquake", None, None),
    ("Afghanistan", 2018, "flood", 72, 4000),
    ("Bangladesh", 2018, "flood", 21, 14000),
    ("Burkina Faso", 2010, "flood", 16, 133362),
    ("Burundi", 2018, "flood", None, 2576),
    ("Cameroon", 2015, "flood", 4, 30000),
    ("Central African Republic", 2017, "flood", None, 3500),
    ("Democratic Republic Congo", 2018, "flood", 51, None),
    ("Ecuador", 2016, "flood", 9, 10000),
    ("Haiti", 2010, "earthquake", 222570, 3.4e9),
    ("Haiti", 2016, "flood", 13, None),
    ("Haiti", 2018, "earthquake", 17, 38915),
    ("Indonesia", 2018, "flood", None, 3000),
    ("Iraq", 2017, "earthquake", 10, 5500),
    ("Kenya", 2010, "flood", 100, 70000),
    ("Kenya", 2011, "flood", 25, 91692),
    ("Kenya", 2012, "flood", 73, 280670),
    ("Kenya", 2013, "flood", 18, 10780),
    ("Libya", 2019, "flood", 4, 20000),
    ("Mozambique", 2019, "flood", 28, 58000),
    ("Myanmar", 2012, "flood", 2, 85000),
    ("Myanmar", 2013, "flood", 7, 73300),
    ("Myanmar", 2015, "flood", 149, 1.6217e9),
    ("Myanmar", 2016, "earthquake", 4, 1150),
    ("Myanmar", 2018, "flood", 16, 109650),
    ("Namibia", 2011, "flood", 108, 500000),
    ("Nepal", 2015, "earthquake", 138, None),
    ("Niger", 2015, "flood", 27, 87037),
    ("Niger", 2017, "flood", 56, 206513),
    ("Nigeria", 2017, "flood", None, 10000),
    ("Nigeria", 2018, "flood", 199, 1.92103e9),
    ("Pakistan", 2010, "flood", 46, None),
    ("Pakistan", 2011, "flood", 509, 5.4e9),
    ("Pakistan", 2012, "flood", 26, 1200),
    ("Peru", 2017, "flood", 1, 12000),
    ("Philippines", 2012, "flood", None, 25000),
    ("Philippines", 2013, "earthquake", 230, 3.22125e9),
    ("Somalia", 2010, "flood", None, 16000),
    ("Somalia", 2012, "flood", 6, 12200),
    ("Somalia", 2013, "flood", 7, 50000),
    ("South Korea", 2016, "earthquake", None, 29800),
    ("South Sudan", 2012, "flood", 32, 154000),
    ("Sri Lanka", 2010, "flood", 28, 606072),
    ("Sri Lanka", 2011, "flood", 18, 225000),
)
