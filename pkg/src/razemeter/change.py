"""Building-mask extraction, object counting, and the coefficient of change."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .raster import Manifest
from .synth import CLASS_BUILDING

DEFAULT_MIN_AREA = 6  # px; ~24 m^2 at 2 m/px, suppresses speckle
DEFAULT_CONNECTIVITY = 8

REPORT_COLUMNS = (
    "disaster_id", "country", "year", "type",
    "n_before", "n_after", "signed_diff", "clamped_diff", "coefficient",
)


@dataclass(frozen=True)
class ChangeRecord:
    disaster_id: str
    n_before: int
    n_after: int
    coefficient: float

    @property
    def signed_diff(self) -> int:
        return self.n_before - self.n_after

    @property
    def clamped_diff(self) -> int:
        return max(0, self.signed_diff)


def extract_building_mask(labels: np.ndarray, building_class: int = CLASS_BUILDING) -> np.ndarray:
    """Binary mask (uint8) that is 1 exactly where the label map says building."""
    return (np.asarray(labels) == building_class).astype(np.uint8)


class _UnionFind:
    def __init__(self):
        self.parent = [0]  # slot 0 unused; labels start at 1

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]  # path halving
            a = parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra > rb:
                ra, rb = rb, ra
            self.parent[rb] = ra


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY,
                         min_area: int = 1):
    """Two-pass union-find labeling of foreground pixels.

    Components smaller than ``min_area`` are discarded; surviving components
    are relabeled contiguously from 1 in scan order. Returns (labels, count).
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    mask = np.asarray(mask)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    uf = _UnionFind()
    fg = mask != 0

    # first pass: provisional labels, union with already-visited neighbors
    for y in range(h):
        row_fg = fg[y]
        row_lab = labels[y]
        prev_lab = labels[y - 1] if y > 0 else None
        for x in range(w):
            if not row_fg[x]:
                continue
            neighbors = []
            if x > 0 and row_lab[x - 1]:
                neighbors.append(row_lab[x - 1])
            if prev_lab is not None:
                if prev_lab[x]:
                    neighbors.append(prev_lab[x])
                if connectivity == 8:
                    if x > 0 and prev_lab[x - 1]:
                        neighbors.append(prev_lab[x - 1])
                    if x + 1 < w and prev_lab[x + 1]:
                        neighbors.append(prev_lab[x + 1])
            if not neighbors:
                row_lab[x] = uf.make()
            else:
                m = min(neighbors)
                row_lab[x] = m
                for n in neighbors:
                    uf.union(m, n)

    # second pass: resolve roots, measure areas
    n_prov = len(uf.parent)
    root = np.zeros(n_prov, dtype=np.int32)
    for i in range(1, n_prov):
        root[i] = uf.find(i)
    resolved = root[labels]
    areas = np.bincount(resolved.ravel(), minlength=n_prov)
    areas[0] = 0

    # relabel surviving components contiguously in scan order
    remap = np.zeros(n_prov, dtype=np.int32)
    next_label = 1
    flat = resolved.ravel()
    for v in flat:
        if v and areas[v] >= min_area and remap[v] == 0:
            remap[v] = next_label
            next_label += 1
    out = remap[resolved]
    return out, next_label - 1


def count_buildings(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY,
                    min_area: int = DEFAULT_MIN_AREA) -> int:
    return connected_components(mask, connectivity, min_area)[1]


def count_difference(n_before: int, n_after: int):
    """(signed, clamped) missing-building difference for one disaster."""
    if n_before < 0 or n_after < 0:
        raise ValueError("counts must be >= 0")
    signed = n_before - n_after
    return signed, max(0, signed)


def coefficient_of_change(clamped_diffs: Sequence[int]):
    """Normalize each diff by the collection maximum into [0, 1].

    The most-changed disaster gets exactly 1; an all-zero collection gets all
    zeros. Coefficients are only comparable within their collection.
    """
    if len(clamped_diffs) == 0:
        raise ValueError("collection must be nonempty")
    top = max(clamped_diffs)
    if top == 0:
        return [0.0 for _ in clamped_diffs]
    return [d / top for d in clamped_diffs]


def build_change_report(manifest: Manifest, counts: Mapping[str, tuple[int, int]]):
    """One ChangeRecord per disaster, coefficient-normalized over the collection.

    ``counts`` maps disaster_id -> (n_before, n_after). Records come back
    sorted by disaster_id.
    """
    if len(manifest) == 0:
        raise ValueError("collection must be nonempty")
    entries = sorted(manifest, key=lambda e: e.disaster_id)
    missing = [e.disaster_id for e in entries if e.disaster_id not in counts]
    if missing:
        raise KeyError(f"missing counts for disasters: {missing}")
    diffs = [count_difference(*counts[e.disaster_id])[1] for e in entries]
    coeffs = coefficient_of_change(diffs)
    return [
        ChangeRecord(
            disaster_id=e.disaster_id,
            n_before=counts[e.disaster_id][0],
            n_after=counts[e.disaster_id][1],
            coefficient=c,
        )
        for e, c in zip(entries, coeffs)
    ]


def write_report_csv(records, manifest: Manifest, path: Path | str) -> None:
    by_id = {e.disaster_id: e for e in manifest}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in records:
            meta = by_id[r.disaster_id].meta
            writer.writerow([
                r.disaster_id, meta.country, meta.year, meta.disaster_type,
                r.n_before, r.n_after, r.signed_diff, r.clamped_diff,
                f"{r.coefficient:.6f}",
            ])


def write_report_json(records, manifest: Manifest, path: Path | str,
                      complete: bool = True, failures=()) -> None:
    by_id = {e.disaster_id: e for e in manifest}
    doc = {
        "complete": complete,
        "failures": list(failures),
        "disasters": [
            {
                "disaster_id": r.disaster_id,
                "country": by_id[r.disaster_id].meta.country,
                "year": by_id[r.disaster_id].meta.year,
                "type": by_id[r.disaster_id].meta.disaster_type,
                "n_before": r.n_before,
                "n_after": r.n_after,
                "signed_diff": r.signed_diff,
                "clamped_diff": r.clamped_diff,
                "coefficient": r.coefficient,
            }
            for r in records
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def change_overlay(mask_before: np.ndarray, mask_after: np.ndarray) -> np.ndarray:
    """RGB overlay: before-only in red, after-only in blue, agreement in white."""
    mb = np.asarray(mask_before, dtype=bool)
    ma = np.asarray(mask_after, dtype=bool)
    out = np.zeros(mb.shape + (3,), dtype=np.uint8)
    out[mb & ~ma] = (220, 60, 60)
    out[~mb & ma] = (60, 90, 220)
    out[mb & ma] = (240, 240, 240)
    return out
