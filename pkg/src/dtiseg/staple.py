"""Multi-label STAPLE fusion via expectation maximization.

Each candidate segmentation j is modeled by a row-stochastic confusion
matrix theta_j[s, s'] = P(rater j says s' | true label s). E-step:
W_i(s) proportional to prior(s) * prod_j theta_j(s, d_ij); M-step:
theta_j(s, s') = sum_i W_i(s)[d_ij == s'] / sum_i W_i(s). Iteration stops
when max |delta theta| < tol or after max_iter rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RaterPerformance:
    """Confusion matrices, one (L, L) row-stochastic block per candidate."""

    theta: np.ndarray  # (n_raters, L, L)
    label_ids: np.ndarray

    def __post_init__(self):
        rows = self.theta.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("confusion matrix rows must sum to 1")
        if np.any(self.theta < 0):
            raise ValueError("confusion matrix entries must be nonnegative")


@dataclass
class FusionResult:
    posteriors: np.ndarray          # (V, L) per-voxel label posterior
    hard: np.ndarray                # argmax map, original label values
    performance: RaterPerformance
    label_ids: np.ndarray
    iterations: int
    converged: bool
    log_likelihood: list = field(default_factory=list)
    absent_labels: list = field(default_factory=list)


def staple_fuse(candidates, label_ids=None, prior=None, max_iter: int = 50,
                tol: float = 1e-6, diag_init: float = 0.9):
    """Fuse >= 2 candidate label maps on a shared grid.

    candidates: list of integer arrays with identical shapes. label_ids:
    the label values to model (default: background 0 plus every value seen).
    prior: per-label frequencies (default: relative frequencies over all
    candidates). Hard-map ties go to the lowest label id.
    """
    if len(candidates) < 2:
        raise ValueError("need at least 2 candidate segmentations")
    arrs = [np.asarray(c) for c in candidates]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("candidate grids differ in shape")
    flat = np.stack([a.reshape(-1) for a in arrs], axis=0)  # (J, V)
    j_raters, n_vox = flat.shape

    if label_ids is None:
        label_ids = np.union1d(np.unique(flat), [0])
    label_ids = np.asarray(sorted(int(v) for v in label_ids))
    n_lab = label_ids.size
    lookup = {int(v): i for i, v in enumerate(label_ids)}
    if not set(np.unique(flat)).issubset(set(lookup)):
        extra = sorted(set(np.unique(flat)) - set(lookup))
        raise ValueError(f"candidates contain labels outside the schema: {extra}")
    dec = np.empty_like(flat, dtype=np.intp)
    for v, i in lookup.items():
        dec[flat == v] = i

    counts = np.bincount(dec.reshape(-1), minlength=n_lab).astype(np.float64)
    absent = [int(label_ids[i]) for i in np.flatnonzero(counts == 0)]
    if prior is None:
        prior = counts / counts.sum()
        if absent:
            # keep absent labels representable rather than zeroing them out
            prior = (counts + 1e-12) / (counts + 1e-12).sum()
    else:
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != (n_lab,):
            raise ValueError(f"prior must have {n_lab} entries")
        prior = prior / prior.sum()

    off = (1.0 - diag_init) / max(n_lab - 1, 1)
    theta = np.full((j_raters, n_lab, n_lab), off)
    idx = np.arange(n_lab)
    theta[:, idx, idx] = diag_init if n_lab > 1 else 1.0

    ll_trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # E-step
        w = np.tile(prior, (n_vox, 1))  # (V, L)
        for j in range(j_raters):
            w *= theta[j][:, dec[j]].T
        norm = w.sum(axis=1, keepdims=True)
        ll_trace.append(float(np.log(np.maximum(norm, 1e-300)).sum()))
        zero = norm[:, 0] <= 0
        if zero.any():
            w[zero] = prior
            norm[zero] = 1.0
        w /= norm

        # M-step
        new_theta = np.empty_like(theta)
        denom = w.sum(axis=0)  # (L,)
        for j in range(j_raters):
            num = np.zeros((n_lab, n_lab))
            for sp in range(n_lab):
                sel = dec[j] == sp
                if sel.any():
                    num[:, sp] = w[sel].sum(axis=0)
            safe = denom > 0
            new_theta[j] = theta[j]
            new_theta[j][safe] = num[safe] / denom[safe, None]
        delta = float(np.abs(new_theta - theta).max())
        theta = new_theta
        if delta < tol:
            converged = True
            break

    # final posteriors under the converged parameters
    w = np.tile(prior, (n_vox, 1))
    for j in range(j_raters):
        w *= theta[j][:, dec[j]].T
    norm = w.sum(axis=1, keepdims=True)
    ll_trace.append(float(np.log(np.maximum(norm, 1e-300)).sum()))
    zero = norm[:, 0] <= 0
    if zero.any():
        w[zero] = prior
        norm[zero] = 1.0
    w /= norm

    hard_idx = np.argmax(w, axis=1)  # ties -> first (lowest label id)
    hard = label_ids[hard_idx].reshape(shape).astype(arrs[0].dtype, copy=False)
    perf = RaterPerformance(theta=theta, label_ids=label_ids)
    return FusionResult(posteriors=w, hard=hard, performance=perf,
                        label_ids=label_ids, iterations=it, converged=converged,
                        log_likelihood=ll_trace, absent_labels=absent)
