"""Core raster types: tiles, manifests, geo-grids, and patch tiling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

METERS_PER_DEGREE = 111_320.0
DEFAULT_METERS_PER_PIXEL = 2.0
DEFAULT_PATCH_SIZE = 256

EPOCHS = ("before", "after")
DISASTER_TYPES = ("flood", "earthquake")


class TileError(Exception):
    """Base error for tile loading/decoding problems."""


class TileDecodeError(TileError):
    """File exists but cannot be decoded as a raster."""


class EmptyTileError(TileError):
    """Raster decoded to zero area."""


class ManifestError(ValueError):
    """Manifest document violates its schema."""


@dataclass(frozen=True)
class GeoTile:
    """An RGB raster with geospatial and epoch metadata.

    ``pixels`` is a read-only (height, width, 3) uint8 array.
    """

    pixels: np.ndarray
    disaster_id: str = ""
    epoch: str = "before"
    center: tuple[float, float] = (0.0, 0.0)
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL
    capture_date: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be (h, w, 3) uint8, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise EmptyTileError("zero-area tile")
        if self.epoch not in EPOCHS:
            raise ValueError(f"epoch must be one of {EPOCHS}, got {self.epoch!r}")
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be > 0")
        px = px.copy() if px.flags.writeable else px
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "GeoTile":
        """Same metadata, new pixel data."""
        return GeoTile(
            pixels=pixels,
            disaster_id=self.disaster_id,
            epoch=self.epoch,
            center=self.center,
            meters_per_pixel=self.meters_per_pixel,
            capture_date=self.capture_date,
        )


@dataclass(frozen=True)
class DisasterMeta:
    country: str
    year: int
    disaster_type: str
    total_deaths: Optional[int] = None
    total_affected: Optional[float] = None

    def __post_init__(self):
        if not 1900 <= self.year <= 2100:
            raise ValueError(f"year out of range [1900, 2100]: {self.year}")
        if self.disaster_type not in DISASTER_TYPES:
            raise ValueError(f"disaster_type must be one of {DISASTER_TYPES}")
        if self.total_deaths is not None and self.total_deaths < 0:
            raise ValueError("total_deaths must be >= 0")
        if self.total_affected is not None and self.total_affected < 0:
            raise ValueError("total_affected must be >= 0")


@dataclass(frozen=True)
class ManifestEntry:
    disaster_id: str
    meta: DisasterMeta
    before_path: Path
    after_path: Path
    center: tuple[float, float] = (0.0, 0.0)
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL
    date_before: str = ""
    date_after: str = ""


@dataclass(frozen=True)
class Manifest:
    disasters: tuple[ManifestEntry, ...]

    def __post_init__(self):
        ids = [d.disaster_id for d in self.disasters]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ManifestError(f"duplicate disaster ids: {sorted(dupes)}")

    def __len__(self) -> int:
        return len(self.disasters)

    def __iter__(self):
        return iter(self.disasters)


def parse_manifest(doc: dict, base_dir: Path | str = ".") -> Manifest:
    """Build a Manifest from its JSON document form.

    Relative tile paths are resolved against ``base_dir``.
    """
    base = Path(base_dir)
    if not isinstance(doc, dict) or "disasters" not in doc:
        raise ManifestError("manifest must be an object with a 'disasters' list")
    entries = []
    for raw in doc["disasters"]:
        for key in ("id", "country", "year", "type", "before", "after"):
            if key not in raw:
                raise ManifestError(f"manifest entry missing '{key}': {raw.get('id', '?')}")
        if not raw["before"] or not raw["after"]:
            raise ManifestError(f"entry {raw['id']!r} missing an epoch path")
        meta = DisasterMeta(
            country=raw["country"],
            year=int(raw["year"]),
            disaster_type=raw["type"],
            total_deaths=raw.get("total_deaths"),
            total_affected=raw.get("total_affected"),
        )
        dates = raw.get("dates", {})
        entries.append(
            ManifestEntry(
                disaster_id=raw["id"],
                meta=meta,
                before_path=base / raw["before"],
                after_path=base / raw["after"],
                center=tuple(raw.get("center", (0.0, 0.0))),
                meters_per_pixel=float(raw.get("meters_per_pixel", DEFAULT_METERS_PER_PIXEL)),
                date_before=dates.get("before", ""),
                date_after=dates.get("after", ""),
            )
        )
    return Manifest(disasters=tuple(entries))


def load_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return parse_manifest(doc, base_dir=path.parent)


def manifest_to_doc(manifest: Manifest, base_dir: Path | str = ".") -> dict:
    """Inverse of parse_manifest; paths written relative to ``base_dir`` when possible."""
    base = Path(base_dir)

    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    return {
        "disasters": [
            {
                "id": e.disaster_id,
                "country": e.meta.country,
                "year": e.meta.year,
                "type": e.meta.disaster_type,
                "total_deaths": e.meta.total_deaths,
                "total_affected": e.meta.total_affected,
                "before": rel(e.before_path),
                "after": rel(e.after_path),
                "center": list(e.center),
                "meters_per_pixel": e.meters_per_pixel,
                "dates": {"before": e.date_before, "after": e.date_after},
            }
            for e in manifest
        ]
    }


def make_grid(center: tuple[float, float], spacing_m: float = 100.0, per_side: int = 10):
    """Square per_side x per_side lattice of (lat, lon) around ``center``.

    Uses a local equirectangular approximation: one degree of latitude is
    111,320 m and one degree of longitude is 111,320*cos(lat) m.
    """
    lat0, lon0 = center
    if spacing_m <= 0:
        raise ValueError("spacing_m must be > 0")
    if per_side < 1:
        raise ValueError("per_side must be >= 1")
    if abs(lat0) >= 89.0:
        raise ValueError("grid center too close to a pole; longitude scaling degenerate")
    lat_step = spacing_m / METERS_PER_DEGREE
    lon_step = spacing_m / (METERS_PER_DEGREE * math.cos(math.radians(lat0)))
    half = (per_side - 1) / 2.0
    coords = []
    for i in range(per_side):  # north to south
        for j in range(per_side):  # west to east
            coords.append((lat0 + (half - i) * lat_step, lon0 + (j - half) * lon_step))
    return coords


def load_tile(
    path: Path | str,
    disaster_id: str = "",
    epoch: str = "before",
    center: tuple[float, float] = (0.0, 0.0),
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL,
    capture_date: str = "",
) -> GeoTile:
    """Decode a PNG into a GeoTile; alpha, if present, is dropped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tile not found: {path}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise TileDecodeError(f"cannot decode raster {path}: {exc}") from exc
    if arr.size == 0:
        raise EmptyTileError(f"zero-area image: {path}")
    return GeoTile(
        pixels=arr,
        disaster_id=disaster_id,
        epoch=epoch,
        center=center,
        meters_per_pixel=meters_per_pixel,
        capture_date=capture_date,
    )


def save_tile(tile: GeoTile, path: Path | str) -> None:
    Image.fromarray(np.asarray(tile.pixels)).save(Path(path), format="PNG")


def mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map arbitrary integer indices into [0, n) by mirror tiling.

    Mirroring does not repeat the edge sample. Degenerates gracefully for
    n == 1 and for offsets larger than n.
    """
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def reflect_indices(n: int, pad_before: int, pad_after: int) -> np.ndarray:
    """Index vector of length pad_before+n+pad_after that mirror-tiles [0, n)."""
    return mirror_index(np.arange(-pad_before, n + pad_after), n)


def translate_reflect(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx right, dy down), mirror-filling exposed borders."""
    rows = mirror_index(np.arange(arr.shape[0]) - dy, arr.shape[0])
    cols = mirror_index(np.arange(arr.shape[1]) - dx, arr.shape[1])
    return arr[np.ix_(rows, cols)]


def reflect_pad(arr: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Mirror-pad the first two axes of ``arr``."""
    rows = reflect_indices(arr.shape[0], top, bottom)
    cols = reflect_indices(arr.shape[1], left, right)
    return arr[np.ix_(rows, cols)]


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping patches cut from a padded tile, with pad bookkeeping."""

    patch_size: int
    pad_left: int
    pad_right: int
    pad_top: int
    pad_bottom: int
    patches: tuple  # of (row, col, ndarray)

    @property
    def padded_shape(self) -> tuple[int, int]:
        rows = 1 + max(r for r, _, _ in self.patches)
        cols = 1 + max(c for _, c, _ in self.patches)
        return rows * self.patch_size, cols * self.patch_size

    @property
    def original_shape(self) -> tuple[int, int]:
        ph, pw = self.padded_shape
        return ph - self.pad_top - self.pad_bottom, pw - self.pad_left - self.pad_right


def to_patches(tile: GeoTile, patch_size: int = DEFAULT_PATCH_SIZE) -> PatchGrid:
    """Reflect-pad the tile to multiples of patch_size and cut it row-major."""
    if patch_size <= 0:
        raise ValueError("patch_size must be >= 1")
    arr = np.asarray(tile.pixels)
    h, w = arr.shape[:2]
    pad_bottom = (-h) % patch_size
    pad_right = (-w) % patch_size
    padded = reflect_pad(arr, 0, pad_bottom, 0, pad_right)
    patches = []
    for r in range(padded.shape[0] // patch_size):
        for c in range(padded.shape[1] // patch_size):
            sub = padded[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            patches.append((r, c, np.ascontiguousarray(sub)))
    return PatchGrid(
        patch_size=patch_size,
        pad_left=0,
        pad_right=pad_right,
        pad_top=0,
        pad_bottom=pad_bottom,
        patches=tuple(patches),
    )


def stitch_patches(grid: PatchGrid, per_patch_results: Sequence[np.ndarray]) -> np.ndarray:
    """Reassemble per-patch results at their recorded positions and crop the pads.

    Inverse of to_patches: feeding the grid's own patches back reproduces the
    original raster bit-exactly. Results may have a different channel count
    than the source (e.g. label maps from RGB patches).
    """
    if len(per_patch_results) != len(grid.patches):
        raise ValueError(
            f"expected {len(grid.patches)} results, got {len(per_patch_results)}"
        )
    ps = grid.patch_size
    ph, pw = grid.padded_shape
    first = np.asarray(per_patch_results[0])
    extra = first.shape[2:]
    canvas = np.zeros((ph, pw) + extra, dtype=first.dtype)
    for (r, c, _), result in zip(grid.patches, per_patch_results):
        result = np.asarray(result)
        if result.shape[:2] != (ps, ps):
            raise ValueError(f"result shape {result.shape} does not match patch size {ps}")
        canvas[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] = result
    h, w = grid.original_shape
    return canvas[grid.pad_top:grid.pad_top + h, grid.pad_left:grid.pad_left + w]
