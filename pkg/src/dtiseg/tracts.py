"""Streamline-density tract masks and label-merging operations.

density_mask voxelizes each streamline with Amanatides-Woo segment
traversal (so thin diagonal streamlines leave no gaps), counts each
streamline once per voxel, and keeps voxels at or above the 5th percentile
of the non-zero densities ("less than" the threshold is removed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nifti import VolumeMeta
from .schemas import bilateral_tract_abbreviations, commissural_tract_abbreviations
from .tck import StreamlineSet

log = logging.getLogger(__name__)


def _segment_voxels(p0: np.ndarray, p1: np.ndarray, dims) -> tuple[set, bool]:
    """Voxel indices crossed by the segment p0 -> p1 (voxel-unit coordinates)."""
    out = set()
    d = p1 - p0
    v = np.floor(p0).astype(np.int64)
    end = np.floor(p1).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for i in range(3):
        if d[i] != 0:
            nxt = v[i] + (1 if step[i] > 0 else 0)
            t_max[i] = (nxt - p0[i]) / d[i]
            t_delta[i] = abs(1.0 / d[i])

    def emit(vv):
        if np.all(vv >= 0) and np.all(vv < dims):
            out.add((int(vv[0]), int(vv[1]), int(vv[2])))
            return True
        return False

    skipped = not emit(v)
    guard = int(np.abs(end - v).sum()) + 6
    for _ in range(guard):
        if np.all(v == end):
            break
        ax = int(np.argmin(t_max))
        v[ax] += step[ax]
        t_max[ax] += t_delta[ax]
        if not emit(v):
            skipped = True
    if not emit(end):
        skipped = True
    return out, skipped


def streamline_density(streamlines: StreamlineSet, meta: VolumeMeta) -> np.ndarray:
    """Per-voxel count of distinct traversing streamlines."""
    if len(streamlines) < 1:
        raise DataError("need at least one streamline")
    dims = np.asarray(meta.dims[:3])
    h = np.asarray(meta.voxel_size_mm)
    density = np.zeros(tuple(dims), dtype=np.int32)
    n_skipped = 0
    for s in streamlines:
        pts = np.asarray(s, dtype=np.float64) / h
        voxels = set()
        for a, b in zip(pts[:-1], pts[1:]):
            vs, skipped = _segment_voxels(a, b, dims)
            voxels |= vs
            n_skipped += skipped
        if voxels:
            ix = np.array(sorted(voxels))
            density[ix[:, 0], ix[:, 1], ix[:, 2]] += 1
    if n_skipped:
        log.warning("%d streamline segment(s) left the %s grid; points skipped",
                    n_skipped, tuple(dims))
    return density


def density_mask(streamlines: StreamlineSet, meta: VolumeMeta,
                 percentile: float = 5.0) -> tuple[np.ndarray, float]:
    """Binary tract mask: density >= the percentile of non-zero densities.

    Returns (mask, threshold). The threshold uses linear interpolation
    between closest ranks on the sorted non-zero densities.
    """
    density = streamline_density(streamlines, meta)
    nonzero = density[density > 0]
    if nonzero.size == 0:
        raise DataError("empty density map: no streamline crossed the grid")
    threshold = float(np.percentile(nonzero, percentile))
    mask = (density >= threshold) & (density > 0)
    return mask, threshold


@dataclass
class TractMaskSet:
    """31 binary tract channels with presence flags m_tr."""

    names: list
    channels: np.ndarray   # (31, X, Y, Z) uint8
    present: np.ndarray    # (31,) bool; False = tract missing from this case
    partial: np.ndarray    # (31,) bool; True = only one side of a pair available

    def __post_init__(self):
        if self.channels.shape[0] != len(self.names):
            raise ValueError("channel count does not match names")
        if self.present.shape != (len(self.names),) or self.partial.shape != (len(self.names),):
            raise ValueError("flag vectors must have one entry per tract")


def expected_input_names() -> list:
    """The 55 per-side mask names the merge step consumes."""
    names = []
    for abbr in bilateral_tract_abbreviations():
        names.extend([f"{abbr}_left", f"{abbr}_right"])
    names.extend(commissural_tract_abbreviations())
    return names


def merge_bilateral(masks: dict) -> TractMaskSet:
    """Merge 55 per-side masks into 31 channels (24 pairs + 7 commissural).

    ``masks`` maps input name -> binary array or None (tract marked missing).
    A pair with one side present is merged from that side and flagged
    partial; a tract with no sides present gets an empty channel and
    m_tr = 0. Unknown names are an error.
    """
    valid = set(expected_input_names())
    unknown = sorted(set(masks) - valid)
    if unknown:
        raise DataError(f"unknown tract name(s): {unknown}")

    shape = None
    for v in masks.values():
        if v is not None:
            shape = np.asarray(v).shape
            break
    if shape is None:
        raise DataError("all 55 input masks are missing")

    def fetch(name):
        m = masks.get(name)
        if m is None:
            return None
        m = np.asarray(m)
        if m.shape != shape:
            raise DataError(f"mask {name!r} has shape {m.shape}, expected {shape}")
        return m.astype(bool)

    names, chans, present, partial = [], [], [], []
    for abbr in bilateral_tract_abbreviations():
        left, right = fetch(f"{abbr}_left"), fetch(f"{abbr}_right")
        names.append(abbr)
        if left is None and right is None:
            chans.append(np.zeros(shape, dtype=np.uint8))
            present.append(False)
            partial.append(False)
        else:
            merged = np.zeros(shape, dtype=bool)
            if left is not None:
                merged |= left
            if right is not None:
                merged |= right
            chans.append(merged.astype(np.uint8))
            present.append(True)
            partial.append(left is None or right is None)
    for abbr in commissural_tract_abbreviations():
        m = fetch(abbr)
        names.append(abbr)
        if m is None:
            chans.append(np.zeros(shape, dtype=np.uint8))
            present.append(False)
            partial.append(False)
        else:
            chans.append(m.astype(np.uint8))
            present.append(True)
            partial.append(False)
    return TractMaskSet(names=names, channels=np.stack(chans),
                        present=np.array(present), partial=np.array(partial))


def merge_tissue_labels(atlas_labels: np.ndarray, mapping: dict) -> np.ndarray:
    """Relabel an atlas map onto {0: background, 1: WM, 2: CGM, 3: SGM, 4: CSF}.

    ``mapping`` must cover every id present in the volume (background 0 maps
    to 0 implicitly). Voxel counts are conserved per construction.
    """
    atlas_labels = np.asarray(atlas_labels)
    mapping = {int(k): int(v) for k, v in mapping.items()}
    mapping.setdefault(0, 0)
    bad_targets = {k: v for k, v in mapping.items() if not 0 <= v <= 4}
    if bad_targets:
        raise DataError(f"mapping targets outside tissue ids 0..4: {bad_targets}")
    present = np.unique(atlas_labels)
    if present.min() < 0:
        raise DataError(f"negative label ids in atlas volume: {present[present < 0].tolist()}")
    unmapped = sorted(int(v) for v in present if int(v) not in mapping)
    if unmapped:
        raise DataError(f"atlas ids without a tissue mapping: {unmapped}")
    lut = np.zeros(int(present.max()) + 1, dtype=np.uint8)
    for k, v in mapping.items():
        if k <= present.max():
            lut[k] = v
    return lut[atlas_labels]
