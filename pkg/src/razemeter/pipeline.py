"""End-to-end orchestration: synthesize collections, run the per-disaster
register -> crop -> histogram-match -> segment -> count chain, and aggregate
coefficients into reports."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import change, register, synth
from .histmatch import histogram_match
from .raster import (
    DisasterMeta, GeoTile, Manifest, ManifestEntry, load_tile, manifest_to_doc,
    save_tile, translate_reflect,
)
from .segnet import SegNetModel, predict_labelmap


@dataclass(frozen=True)
class PipelineConfig:
    use_truth_labels: bool = False
    do_register: bool = True
    do_match_hist: bool = True
    connectivity: int = change.DEFAULT_CONNECTIVITY
    min_area: int = change.DEFAULT_MIN_AREA
    max_keypoints: int = register.DEFAULT_MAX_KEYPOINTS
    search_radius: int = register.DEFAULT_SEARCH_RADIUS
    ncc_threshold: float = register.DEFAULT_NCC_THRESHOLD
    min_crop_side: int = register.MIN_CROP_SIDE
    threads: int = 1


@dataclass(frozen=True)
class DisasterFailure:
    disaster_id: str
    stage: str
    message: str


def truth_label_path(tile_path: Path, disaster_id: str, epoch: str) -> Path:
    """Convention: label maps sit next to the tiles as <id>_labels_<epoch>.png."""
    return Path(tile_path).with_name(f"{disaster_id}_labels_{epoch}.png")


def _load_labels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def process_disaster(entry: ManifestEntry, model: Optional[SegNetModel],
                     config: PipelineConfig):
    """Counts (n_before, n_after) for one disaster; raises tagged on failure."""
    stage = "load"
    try:
        before = load_tile(entry.before_path, entry.disaster_id, "before",
                           entry.center, entry.meters_per_pixel, entry.date_before)
        after = load_tile(entry.after_path, entry.disaster_id, "after",
                          entry.center, entry.meters_per_pixel, entry.date_after)

        shift = (0, 0)
        window = (slice(0, after.height), slice(0, after.width))
        if config.do_register:
            stage = "register"
            matches = register.register_pair(
                before, after, config.max_keypoints, config.search_radius,
                config.ncc_threshold,
            )
            shift = matches.estimated_shift
            before = register.apply_translation(before, shift)
            stage = "crop"
            before, after, window = register.common_crop(
                before, after, matches, config.min_crop_side
            )

        if config.do_match_hist:
            stage = "match-hist"
            before = histogram_match(before, after)

        stage = "segment"
        if config.use_truth_labels:
            rows, cols = window
            lb = _load_labels(truth_label_path(entry.before_path, entry.disaster_id, "before"))
            la = _load_labels(truth_label_path(entry.after_path, entry.disaster_id, "after"))
            lb = translate_reflect(lb, *shift)[rows, cols]
            la = la[rows, cols]
        else:
            if model is None:
                raise ValueError("no model given and use_truth_labels is off")
            lb = predict_labelmap(model, before)
            la = predict_labelmap(model, after)

        stage = "count"
        n_before = change.count_buildings(
            change.extract_building_mask(lb), config.connectivity, config.min_area
        )
        n_after = change.count_buildings(
            change.extract_building_mask(la), config.connectivity, config.min_area
        )
        return n_before, n_after
    except Exception as exc:
        raise PipelineStageError(entry.disaster_id, stage, str(exc)) from exc


class PipelineStageError(Exception):
    def __init__(self, disaster_id: str, stage: str, message: str):
        super().__init__(f"disaster {disaster_id!r} failed at stage {stage!r}: {message}")
        self.disaster_id = disaster_id
        self.stage = stage
        self.message = message


def run_pipeline(manifest: Manifest, model: Optional[SegNetModel],
                 config: PipelineConfig = PipelineConfig()):
    """Process every disaster; failures do not abort the collection.

    Returns (records, failures). Coefficients are normalized over the
    disasters that succeeded; records are ordered by disaster_id.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    entries = sorted(manifest, key=lambda e: e.disaster_id)

    def work(entry):
        try:
            return entry.disaster_id, process_disaster(entry, model, config), None
        except PipelineStageError as err:
            return entry.disaster_id, None, err

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]

    counts = {}
    failures = []
    for disaster_id, pair, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            failures.append(DisasterFailure(disaster_id, err.stage, err.message))
        else:
            counts[disaster_id] = pair
    ok_entries = [e for e in entries if e.disaster_id in counts]
    records = []
    if ok_entries:
        records = change.build_change_report(Manifest(tuple(ok_entries)), counts)
    return records, failures


# -- synthetic collection generation ----------------------------------------


def sample_scene_spec(rng: np.random.Generator, size: int = 512,
                      building_count: int = 40,
                      destruction_rate: Optional[float] = None) -> synth.SceneSpec:
    """Draw one disaster's scene parameters from a master generator."""
    rate = destruction_rate if destruction_rate is not None else float(rng.uniform(0.05, 0.7))
    return synth.SceneSpec(
        seed=int(rng.integers(0, 2**63 - 1)),
        width=size,
        height=size,
        building_count=building_count,
        destruction_rate=rate,
        gain=tuple(np.round(rng.uniform(0.85, 1.15, size=3), 4)),
        bias=tuple(np.round(rng.uniform(-10.0, 10.0, size=3), 4)),
        noise_sigma=float(np.round(rng.uniform(1.0, 4.0), 4)),
        jitter=(int(rng.integers(-8, 9)), int(rng.integers(-8, 9))),
    )


def synthesize_collection(out_dir: Path | str, n_disasters: int, seed: int,
                          size: int = 512, building_count: int = 40):
    """Write tiles, label maps, manifest.json, and truth.json for a collection.

    Returns (manifest, truths by disaster id).
    """
    if n_disasters < 1:
        raise ValueError("need at least one disaster")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    truths = {}
    truth_doc = {}
    for i in range(n_disasters):
        disaster_id = f"d{i:03d}"
        spec = sample_scene_spec(rng, size=size, building_count=building_count)
        before, after, truth = synth.synth_scene(spec)
        country, year, dtype, deaths, affected = synth.DISASTER_CATALOG[
            i % len(synth.DISASTER_CATALOG)
        ]
        before_path = out / f"{disaster_id}_before.png"
        after_path = out / f"{disaster_id}_after.png"
        save_tile(before, before_path)
        save_tile(after, after_path)
        Image.fromarray(truth.label_map_before).save(
            truth_label_path(before_path, disaster_id, "before")
        )
        Image.fromarray(truth.label_map_after).save(
            truth_label_path(after_path, disaster_id, "after")
        )
        entries.append(ManifestEntry(
            disaster_id=disaster_id,
            meta=DisasterMeta(country, year, dtype, deaths, affected),
            before_path=before_path,
            after_path=after_path,
            center=(0.0, round(0.1 * i, 4)),
            date_before=f"{year - 1}-06-01",
            date_after=f"{year + 1}-06-01",
        ))
        truths[disaster_id] = truth
        truth_doc[disaster_id] = synth.truth_to_doc(truth)

    manifest = Manifest(tuple(entries))
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest_to_doc(manifest, base_dir=out), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "truth.json", "w") as fh:
        json.dump(truth_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, truths


def _matched_crop_pool(rng: np.random.Generator, size: int, count: int):
    """Crops of before renders histogram-matched at full-scene statistics.

    The pipeline matches the whole before tile onto the whole after tile, so
    the colors a surviving roof ends up with depend on scene-level histogram
    structure, not on any local patch. When destruction is heavy the after
    tile has lost most of its roof-colored mass and the per-channel quantile
    map pushes the remaining roofs far from the raw palette. Patches matched
    against themselves never reproduce that regime, so this pool renders full
    scenes at the heavy end of the destruction range, matches them whole, and
    crops around the roofs that moved furthest.
    """
    scene_side = max(512, size)
    crops = []
    tries = 0
    while len(crops) < count:
        tries += 1
        rate = float(rng.uniform(0.5, 0.7))
        spec = sample_scene_spec(rng, size=scene_side, building_count=40,
                                 destruction_rate=rate)
        try:
            before, after, truth = synth.synth_scene(spec)
        except synth.SceneTooDenseError:
            continue
        raw = np.asarray(before.pixels)
        matched = np.asarray(histogram_match(before, after).pixels)
        label_map = truth.label_map_before

        def color_shift(fp):
            box = (slice(fp.y, fp.y + fp.h), slice(fp.x, fp.x + fp.w))
            return float(np.abs(matched[box].astype(float).mean(axis=(0, 1))
                                - raw[box].astype(float).mean(axis=(0, 1))).sum())

        fps = sorted(truth.footprints_before, key=color_shift, reverse=True)
        # only scenes where matching actually moved several roofs teach
        # anything new; stop being picky if acceptable scenes are rare
        if tries < 200 and (len(fps) < 4 or color_shift(fps[3]) < 50.0):
            continue
        for fp in fps[:8]:
            if len(crops) >= count:
                break
            cy = fp.y + fp.h // 2 + int(rng.integers(-size // 4, size // 4 + 1))
            cx = fp.x + fp.w // 2 + int(rng.integers(-size // 4, size // 4 + 1))
            y0 = int(np.clip(cy - size // 2, 0, scene_side - size))
            x0 = int(np.clip(cx - size // 2, 0, scene_side - size))
            window = (slice(y0, y0 + size), slice(x0, x0 + size))
            crops.append((matched[window], label_map[window]))
    return crops


def training_patches(n_patches: int, seed: int, size: int = 256,
                     building_count: int = 10):
    """Synthetic (image, label map) pairs for segmentation training.

    Each scene contributes its before render and its after render, and every
    third patch is drawn from a pool of scene-level histogram-matched crops
    (see _matched_crop_pool), so the set covers clean, noisy, relit,
    rubble-bearing, and tone-mapped appearances. The matched crops are what
    the pipeline actually feeds the model for the before epoch.
    """
    rng = np.random.default_rng(seed)
    pool = iter(_matched_crop_pool(rng, size, (n_patches + 2) // 3))
    images, labels = [], []
    while len(images) < n_patches:
        spec = sample_scene_spec(rng, size=size, building_count=building_count)
        spec = synth.SceneSpec(
            seed=spec.seed, width=size, height=size, building_count=building_count,
            destruction_rate=spec.destruction_rate, gain=spec.gain, bias=spec.bias,
            noise_sigma=spec.noise_sigma, jitter=spec.jitter, edge_margin_frac=0.06,
        )
        try:
            before, after, truth = synth.synth_scene(spec)
        except synth.SceneTooDenseError:
            # small patches occasionally cannot fit every building; skip
            continue
        images.append(np.asarray(before.pixels))
        labels.append(truth.label_map_before)
        if len(images) < n_patches:
            images.append(np.asarray(after.pixels))
            labels.append(truth.label_map_after)
        if len(images) < n_patches:
            img, lab = next(pool)
            images.append(img)
            labels.append(lab)
    return np.stack(images), np.stack(labels)
