"""Multi-task training: uncertainty-weighted Dice loss, patch sampling,
plateau learning-rate schedule, and plain SGD steps.

The loss has two variants. "paper" is the verbatim form

    L = - sum_i exp(-w_i) * m_i * DSC_i  +  sum_i m_i * w_i

summed over the tissue/tract/parcellation label sets (m_i = 1 except for
masked tracts). Its w-derivative exp(-w)*DSC + 1 is strictly positive
whenever DSC > 0, so w drifts downward without bound; the "bounded"
variant swaps each -exp(-w)*DSC term for exp(-w)*(1-DSC), which has the
finite stationary point w* = ln(1-DSC). "bounded" is the training
default, "paper" is kept for fidelity experiments.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import (CascadeOutput, ModelConfig, ModelParams, cascade_forward,
                    save_checkpoint)
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("paper", "bounded")
DICE_EPS = 1e-5


def soft_dice(pred: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """(2*sum(p*t) + eps) / (sum(p) + sum(t) + eps); differentiable in pred."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    inter = (pred * target).sum()
    return ((inter * 2.0) + eps) / (pred.sum() + target.sum() + eps)


def soft_dice_channels(pred: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Per-channel soft Dice of (L, D, H, W) probability maps; returns (L,)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    tgt = Tensor(np.asarray(target), dtype=pred.dtype)
    axes = tuple(range(1, pred.ndim))
    inter = (pred * tgt).sum(axis=axes)
    return ((inter * 2.0) + eps) / (pred.sum(axis=axes) + tgt.sum(axis=axes) + eps)


@dataclass
class TrainingCase:
    """One volume with channels-first targets (one-hot for exclusive tasks)."""

    x: np.ndarray                    # (in_channels, D, H, W)
    y_sg: np.ndarray | None = None   # (l_sg + 1, D, H, W)
    y_tr: np.ndarray | None = None   # (l_tr, D, H, W)
    m_tr: np.ndarray | None = None   # (l_tr,)
    y_pc: np.ndarray | None = None   # (l_pc + 1, D, H, W)

    def spatial_shape(self):
        return self.x.shape[1:]


@dataclass
class LossBreakdown:
    total: Tensor
    dice: dict            # task -> (L,) raw soft-Dice values
    weighted_terms: dict  # task -> (L,) the Dice-dependent loss terms
    regularizers: dict    # task -> float sum of (masked) w entries
    mask_tr: np.ndarray | None
    variant: str

    @property
    def total_value(self) -> float:
        return self.total.item()

    def parts_sum(self) -> float:
        s = 0.0
        for task in self.weighted_terms:
            s += float(self.weighted_terms[task].sum()) + self.regularizers[task]
        return s

    def mean_dice(self, task: str) -> float:
        d = self.dice.get(task)
        if d is None or d.size == 0:
            return float("nan")
        if task == "tract" and self.mask_tr is not None:
            m = self.mask_tr.astype(bool)
            if not m.any():
                return float("nan")
            return float(d[m].mean())
        return float(d.mean())


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """Label volume -> (n_classes, ...) one-hot stack (channel 0 = id 0)."""
    labels = np.asarray(labels)
    out = np.zeros((n_classes,) + labels.shape, dtype=dtype)
    for c in range(n_classes):
        out[c] = labels == c
    return out


def standardize_channels(x: np.ndarray, mask: np.ndarray | None = None,
                         enabled: bool = True, eps: float = 1e-8) -> np.ndarray:
    """Per-channel zero-mean/unit-variance over the (optional) brain mask."""
    x = np.asarray(x, dtype=np.float32)
    if not enabled:
        return x
    out = np.empty_like(x)
    sel = np.ones(x.shape[1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    for c in range(x.shape[0]):
        vals = x[c][sel]
        mu = vals.mean() if vals.size else 0.0
        sd = vals.std() if vals.size else 1.0
        out[c] = (x[c] - mu) / (sd + eps)
    return out


def _task_targets(case: TrainingCase, task: str):
    return {"tissue": case.y_sg, "tract": case.y_tr, "parcellation": case.y_pc}[task]


def mtl_loss(output: CascadeOutput, case: TrainingCase, w: Tensor, cfg: ModelConfig,
             variant: str = "bounded", eps: float = DICE_EPS) -> LossBreakdown:
    """Uncertainty-weighted multi-task Dice loss over the configured tasks.

    Masked tract channels (m_tr == 0) contribute exactly zero to the loss
    and receive exactly zero gradients, including their w entries.
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"variant must be one of {LOSS_VARIANTS}, got {variant!r}")
    if w.shape != (cfg.task_weight_length,):
        raise ValueError(f"w has shape {w.shape}, config needs ({cfg.task_weight_length},)")

    total = None
    dice, weighted, regs = {}, {}, {}
    mask_tr = None
    off = 0
    for task in cfg.tasks:
        target = _task_targets(case, task)
        if target is None:
            raise ValueError(f"case is missing targets for task {task!r}")
        target = np.asarray(target)
        pred = output.probabilities(task)
        n_chan = cfg.dice_channels(task)
        if task == "tract":
            if target.shape[0] != cfg.l_tr:
                raise ValueError(f"tract targets have {target.shape[0]} channels, need {cfg.l_tr}")
            pred_fg, tgt_fg = pred, target
            m = np.ones(cfg.l_tr) if case.m_tr is None else np.asarray(case.m_tr, dtype=np.float64)
            if m.shape != (cfg.l_tr,):
                raise ValueError(f"m_tr has shape {m.shape}, need ({cfg.l_tr},)")
            mask_tr = m
        else:
            want = cfg.n_labels(task) + 1
            if target.shape[0] != want:
                raise ValueError(f"{task} targets have {target.shape[0]} channels, need {want}")
            lo = 0 if cfg.include_background else 1
            pred_fg, tgt_fg = pred[lo:], target[lo:]
            m = np.ones(n_chan)
        if pred_fg.shape[0] != n_chan:
            raise ValueError(f"{task}: {pred_fg.shape[0]} prediction channels, expected {n_chan}")

        dsc = soft_dice_channels(pred_fg, tgt_fg, eps=eps)
        wt = w[off:off + n_chan]
        mt = Tensor(m, dtype=w.dtype)
        if variant == "paper":
            term = T.exp(-wt) * mt * dsc * -1.0
        else:
            term = T.exp(-wt) * mt * (1.0 - dsc)
        reg = wt * mt
        task_total = term.sum() + reg.sum()
        total = task_total if total is None else total + task_total

        dice[task] = dsc.data.copy()
        weighted[task] = term.data.copy()
        regs[task] = float(reg.data.sum())
        off += n_chan

    return LossBreakdown(total=total, dice=dice, weighted_terms=weighted,
                         regularizers=regs, mask_tr=mask_tr, variant=variant)


def sample_patch(case: TrainingCase, cube_size: int, rng: np.random.Generator) -> TrainingCase:
    """Crop a uniformly random cube from the case (batch size is 1)."""
    dims = case.spatial_shape()
    if any(d < cube_size for d in dims):
        raise ValueError(f"volume {dims} smaller than cube {cube_size}")
    corner = tuple(int(rng.integers(0, d - cube_size + 1)) for d in dims)
    sl = tuple(slice(c, c + cube_size) for c in corner)

    def crop(a):
        return None if a is None else a[(slice(None),) + sl]

    return TrainingCase(x=crop(case.x), y_sg=crop(case.y_sg), y_tr=crop(case.y_tr),
                        m_tr=case.m_tr, y_pc=crop(case.y_pc))


@dataclass
class TrainState:
    lr: float = 1e-4
    epoch: int = 0
    best_val: float = float("inf")
    since_improvement: int = 0
    seed: int = 0
    lr_factor: float = 0.9
    patience: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def lr_schedule_update(state: TrainState, val_loss: float) -> TrainState:
    """Multiply lr by lr_factor when val loss fails to improve ``patience``
    consecutive epochs."""
    if not np.isfinite(val_loss):
        raise ValueError(f"validation loss is not finite: {val_loss}")
    state.epoch += 1
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
        if state.since_improvement >= state.patience:
            state.lr *= state.lr_factor
            state.since_improvement = 0
    return state


class SGD:
    """Plain SGD over the model parameters and w; optional momentum."""

    def __init__(self, params: ModelParams, momentum: float = 0.0):
        self.params = params
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.all_tensors()} \
            if momentum else None

    def step(self, lr: float) -> None:
        for name, t in self.params.all_tensors():
            if t.grad is None:
                continue
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += t.grad
                t.data -= (lr * v).astype(t.dtype, copy=False)
            else:
                t.data -= (lr * t.grad).astype(t.dtype, copy=False)

    def zero_grad(self) -> None:
        self.params.zero_grads()


def train_step(params: ModelParams, batch: TrainingCase, state: TrainState,
               optimizer: SGD | None = None, variant: str = "bounded") -> LossBreakdown:
    """One SGD step: forward, loss, backward, update theta and w."""
    opt = optimizer or SGD(params)
    out = cascade_forward(batch.x, params)
    breakdown = mtl_loss(out, batch, params.task_weights, params.config, variant=variant)
    if not np.isfinite(breakdown.total_value):
        raise RuntimeError(
            "non-finite training loss; per-term values: "
            + json.dumps({t: {"dice": breakdown.dice[t].tolist(),
                              "weighted": breakdown.weighted_terms[t].tolist(),
                              "regularizer": breakdown.regularizers[t]}
                          for t in breakdown.dice}))
    opt.zero_grad()
    breakdown.total.backward()
    opt.step(state.lr)
    opt.zero_grad()
    return breakdown


def evaluate_loss(params: ModelParams, batches, variant: str = "bounded") -> float:
    """Mean loss over batches on a parameter snapshot (no grads, no updates)."""
    vals = []
    with T.no_grad():
        for b in batches:
            out = cascade_forward(b.x, params)
            vals.append(mtl_loss(out, b, params.task_weights, params.config,
                                 variant=variant).total_value)
    return float(np.mean(vals))


def train(case: TrainingCase, params: ModelParams, steps: int,
          lr: float = 1e-4, momentum: float = 0.0, variant: str = "bounded",
          seed: int = 0, steps_per_epoch: int = 25, n_val_patches: int = 2,
          run_dir=None, checkpoint_every: int = 0,
          stop_fn=None) -> tuple[ModelParams, list]:
    """Patch-based training on one case; returns (params, per-epoch records).

    Writes config.json, metrics.csv and checkpoints under run_dir when
    given. ``stop_fn(records)`` may end training early.
    """
    cfg = params.config
    rng = np.random.default_rng(seed)
    val_rng = np.random.default_rng(seed + 10_000)
    val_batches = [sample_patch(case, cfg.cube_size, val_rng) for _ in range(n_val_patches)]
    state = TrainState(lr=lr, seed=seed)
    opt = SGD(params, momentum=momentum)
    records = []

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps({
            "model": json.loads(cfg.to_json()), "steps": steps, "lr": lr,
            "momentum": momentum, "variant": variant, "seed": seed,
            "steps_per_epoch": steps_per_epoch}, indent=2))

    t0 = time.time()
    step = 0
    while step < steps:
        epoch_losses, epoch_dice = [], {t: [] for t in cfg.tasks}
        for _ in range(min(steps_per_epoch, steps - step)):
            batch = sample_patch(case, cfg.cube_size, rng)
            bd = train_step(params, batch, state, optimizer=opt, variant=variant)
            epoch_losses.append(bd.total_value)
            for t in cfg.tasks:
                epoch_dice[t].append(bd.mean_dice(t))
            step += 1
        val_loss = evaluate_loss(params, val_batches, variant=variant)
        state = lr_schedule_update(state, val_loss)
        rec = {"epoch": state.epoch, "step": step, "lr": state.lr,
               "train_loss": float(np.mean(epoch_losses)), "val_loss": val_loss}
        for t in cfg.tasks:
            rec[f"dice_{t}"] = float(np.nanmean(epoch_dice[t]))
        records.append(rec)
        log.info("epoch %d step %d loss %.4f val %.4f lr %.2e dice %s",
                 state.epoch, step, rec["train_loss"], val_loss, state.lr,
                 {t: round(rec[f"dice_{t}"], 3) for t in cfg.tasks})
        if run_dir is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
            save_checkpoint(run_dir / f"ckpt_epoch{state.epoch:04d}.bin", params)
        if stop_fn is not None and stop_fn(records):
            break

    if run_dir is not None:
        save_checkpoint(run_dir / "ckpt_final.bin", params)
        with open(run_dir / "metrics.csv", "w", newline="") as f:
            fields = list(records[0].keys()) if records else ["epoch"]
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(records)
    log.info("training done: %d steps in %.1fs", step, time.time() - t0)
    return params, records
