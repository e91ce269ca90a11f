"""Sliding-window whole-volume inference with overlap averaging."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelParams, cascade_forward

log = logging.getLogger(__name__)


@dataclass
class WindowPlan:
    corners: list           # (i, j, k) window corners
    window: int
    stride: int
    volume_dims: tuple

    def __len__(self) -> int:
        return len(self.corners)


def plan_windows(volume_dims, window: int, overlap_fraction: float = 0.25) -> WindowPlan:
    """Corners at 0, stride, 2*stride, ...; the final corner is clamped to
    dim - window so every voxel is covered and no window leaves the volume.

    stride = window - round(overlap_fraction * window).
    """
    dims = tuple(int(d) for d in volume_dims)
    if len(dims) != 3:
        raise ValueError(f"volume_dims must be 3 extents, got {dims}")
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if any(window > d for d in dims):
        raise ValueError(f"window {window} exceeds volume dims {dims}")
    stride = window - int(round(overlap_fraction * window))
    stride = max(stride, 1)
    per_axis = []
    for d in dims:
        corners = list(range(0, d - window + 1, stride))
        if corners[-1] != d - window:
            corners.append(d - window)
        per_axis.append(sorted(set(corners)))
    corners = [tuple(c) for c in itertools.product(*per_axis)]
    return WindowPlan(corners=corners, window=window, stride=stride, volume_dims=dims)


def sliding_window_infer(volume: np.ndarray, predict_fn, plan: WindowPlan,
                         out_channels: dict) -> dict:
    """Run predict_fn on every window and average overlapping probabilities.

    volume: (C, D, H, W). predict_fn(cube) -> dict task -> (L, w, w, w)
    numpy probabilities. out_channels: task -> L. Returns per-task
    (L, D, H, W) float32 maps; every voxel is covered by >= 1 window.
    """
    c, *dims = volume.shape
    w = plan.window
    sums = {t: np.zeros((L,) + tuple(dims), dtype=np.float64) for t, L in out_channels.items()}
    counts = np.zeros(tuple(dims), dtype=np.float64)
    for (i, j, k) in plan.corners:
        cube = volume[:, i:i + w, j:j + w, k:k + w]
        pred = predict_fn(cube)
        for t, arr in pred.items():
            sums[t][:, i:i + w, j:j + w, k:k + w] += arr
        counts[i:i + w, j:j + w, k:k + w] += 1.0
    if not np.all(counts > 0):
        raise AssertionError("window plan left voxels uncovered")
    out = {t: (s / counts).astype(np.float32) for t, s in sums.items()}
    return out


def model_predict_fn(params: ModelParams):
    """Wrap cascade_forward as a per-window numpy predictor."""
    cfg = params.config

    def predict(cube: np.ndarray) -> dict:
        with T.no_grad():
            out = cascade_forward(cube, params)
        res = {}
        for task in cfg.tasks:
            res[task] = out.probabilities(task).data
        return res

    return predict


def infer_volume(volume: np.ndarray, params: ModelParams,
                 overlap_fraction: float = 0.25) -> tuple[dict, WindowPlan]:
    """Whole-volume probabilities for every configured task."""
    cfg = params.config
    plan = plan_windows(volume.shape[1:], cfg.cube_size, overlap_fraction)
    log.info("sliding-window inference: %d windows of %d^3, stride %d over %s",
             len(plan), plan.window, plan.stride, plan.volume_dims)
    chans = {t: cfg.fcn_out_channels(t) for t in cfg.tasks}
    probs = sliding_window_infer(volume, model_predict_fn(params), plan, chans)
    return probs, plan


def decode_exclusive(probs: np.ndarray) -> np.ndarray:
    """Argmax decoding of (L+1, ...) softmax maps to integer labels."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def decode_masks(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold (L, ...) sigmoid maps to binary channels."""
    return (probs >= threshold).astype(np.uint8)
