"""Segmentation metrics: Dice overlap and symmetric surface distances.

Surfaces are foreground voxels with at least one 6-connected background
neighbor (volume borders count as background). Distances are Euclidean
voxel-center to voxel-center in mm, pooled over both directions; HD95 is
the 95th percentile with linear interpolation, ASD the mean. Pairs where
either mask is empty are flagged undefined and excluded from aggregates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .schemas import LabelSchema


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); NaN (undefined) when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask grids differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return float("nan")
    return 2.0 * int((a & b).sum()) / (sa + sb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """(n, 3) indices of foreground voxels with a 6-connected background face."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    surf = m & ~interior
    return np.argwhere(surf)


def surface_distances(a: np.ndarray, b: np.ndarray,
                      voxel_size_mm=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Sorted pooled symmetric nearest-surface distances in mm."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError("mask grids differ")
    sa = surface_voxels(a)
    sb = surface_voxels(b)
    if sa.shape[0] == 0 or sb.shape[0] == 0:
        raise ValueError("surface distances need two nonempty masks")
    h = np.asarray(voxel_size_mm, dtype=np.float64)
    pa = sa * h
    pb = sb * h
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return np.sort(np.concatenate([d_ab, d_ba]))


def hd95(a: np.ndarray, b: np.ndarray, voxel_size_mm=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(surface_distances(a, b, voxel_size_mm), 95))


def asd(a: np.ndarray, b: np.ndarray, voxel_size_mm=(1.0, 1.0, 1.0)) -> float:
    return float(np.mean(surface_distances(a, b, voxel_size_mm)))


@dataclass
class LabelMetrics:
    label_id: int
    name: str
    dsc: float
    hd95_mm: float
    asd_mm: float
    hd95_vox: float
    asd_vox: float
    defined: bool


@dataclass
class MetricReport:
    case_id: str
    schema_name: str
    voxel_size_mm: tuple
    labels: list = field(default_factory=list)

    def defined_labels(self) -> list:
        return [l for l in self.labels if l.defined]

    def aggregate(self) -> dict:
        """Mean +- std per metric over the labels where it is defined.

        Dice is undefined only when both masks are empty; distances need
        both masks nonempty. Undefined values are excluded, never zeroed.
        """
        out = {}
        for key in ("dsc", "hd95_mm", "asd_mm"):
            vals = np.array([getattr(l, key) for l in self.labels], dtype=float)
            vals = vals[~np.isnan(vals)]
            out[key] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"),) * 2
            out[f"n_{key}"] = int(vals.size)
        out["n_defined"] = len(self.defined_labels())
        out["n_labels"] = len(self.labels)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label_id", "name", "dsc", "hd95_mm", "asd_mm",
                        "hd95_vox", "asd_vox", "defined"])
            for l in self.labels:
                w.writerow([l.label_id, l.name, l.dsc, l.hd95_mm, l.asd_mm,
                            l.hd95_vox, l.asd_vox, int(l.defined)])

    def to_json(self, path=None):
        agg = self.aggregate()
        doc = {
            "case_id": self.case_id,
            "schema": self.schema_name,
            "voxel_size_mm": list(self.voxel_size_mm),
            "aggregate": {
                "dsc": {"mean": agg["dsc"][0], "std": agg["dsc"][1]},
                "hd95_mm": {"mean": agg["hd95_mm"][0], "std": agg["hd95_mm"][1]},
                "asd_mm": {"mean": agg["asd_mm"][0], "std": agg["asd_mm"][1]},
                "n_defined": agg["n_defined"],
                "n_labels": agg["n_labels"],
            },
            "labels": [{
                "id": l.label_id, "name": l.name, "dsc": _j(l.dsc),
                "hd95_mm": _j(l.hd95_mm), "asd_mm": _j(l.asd_mm),
                "defined": l.defined,
            } for l in self.labels],
        }
        if path is not None:
            with open(path, "w") as f:
                json.dump(doc, f, indent=2)
        return doc

    def format_summary(self) -> str:
        agg = self.aggregate()
        lines = [f"case {self.case_id} [{self.schema_name}] "
                 f"({agg['n_defined']}/{agg['n_labels']} labels defined)"]
        for key, label in (("dsc", "DSC"), ("hd95_mm", "HD95 (mm)"), ("asd_mm", "ASD (mm)")):
            mean, std = agg[key]
            lines.append(f"  {label:<10} {mean:.3f} ± {std:.3f}")
        return "\n".join(lines)


def _j(x):
    return None if (isinstance(x, float) and math.isnan(x)) else x


def _label_metrics(label_id, name, pred_mask, ref_mask, voxel_size_mm) -> LabelMetrics:
    d = dsc(pred_mask, ref_mask)
    both = pred_mask.any() and ref_mask.any()
    if both:
        dist_mm = surface_distances(pred_mask, ref_mask, voxel_size_mm)
        dist_vox = surface_distances(pred_mask, ref_mask, (1.0, 1.0, 1.0))
        return LabelMetrics(label_id, name, d,
                            float(np.percentile(dist_mm, 95)), float(dist_mm.mean()),
                            float(np.percentile(dist_vox, 95)), float(dist_vox.mean()),
                            defined=True)
    nan = float("nan")
    # a one-sided empty mask still has a defined (zero) Dice; distances do
    # not exist, so the label is flagged and excluded from distance means
    return LabelMetrics(label_id, name, d, nan, nan, nan, nan, defined=False)


def evaluate_labels(pred: np.ndarray, ref: np.ndarray, schema: LabelSchema,
                    voxel_size_mm=(1.0, 1.0, 1.0), case_id: str = "case") -> MetricReport:
    """Per-label metrics for exclusive label volumes under ``schema``."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"pred grid {pred.shape} != ref grid {ref.shape}")
    report = MetricReport(case_id=case_id, schema_name=schema.name,
                          voxel_size_mm=tuple(voxel_size_mm))
    for label in schema.labels:
        pm = pred == label.id
        rm = ref == label.id
        report.labels.append(_label_metrics(label.id, label.abbreviation, pm, rm, voxel_size_mm))
    return report


def evaluate_masks(pred: np.ndarray, ref: np.ndarray, schema: LabelSchema,
                   voxel_size_mm=(1.0, 1.0, 1.0), case_id: str = "case") -> MetricReport:
    """Per-channel metrics for (L, ...) binary mask stacks (tract task)."""
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"pred grid {pred.shape} != ref grid {ref.shape}")
    if pred.shape[0] != len(schema):
        raise ValueError(f"{pred.shape[0]} channels != schema size {len(schema)}")
    report = MetricReport(case_id=case_id, schema_name=schema.name,
                          voxel_size_mm=tuple(voxel_size_mm))
    for i, label in enumerate(schema.labels):
        report.labels.append(_label_metrics(label.id, label.abbreviation,
                                            pred[i], ref[i], voxel_size_mm))
    return report


def evaluate_case(pred, ref, schema: LabelSchema, voxel_size_mm=(1.0, 1.0, 1.0),
                  case_id: str = "case") -> MetricReport:
    """Dispatch on schema exclusivity: label volumes vs mask stacks."""
    if schema.exclusive:
        return evaluate_labels(pred, ref, schema, voxel_size_mm, case_id)
    return evaluate_masks(pred, ref, schema, voxel_size_mm, case_id)
