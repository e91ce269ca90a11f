"""Diffusion tensor estimation by weighted linear least squares.

The log-linearized model per measurement k is
``ln S_k = ln S0 - b_k * g_k^T D g_k``; the 7 unknowns are the 6 unique
tensor components (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) and ln S0. Weights are
the squared observed signals (optionally re-estimated from the first-pass
fit). Also provides the forward signal model used as the fit oracle and
the derived MD/FA scalar maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .nifti import VolumeMeta

COMPONENT_NAMES = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")


@dataclass
class GradientTable:
    directions: np.ndarray  # (N, 3) unit vectors for b > 0 rows
    bvalues: np.ndarray     # (N,) in s/mm^2

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.bvalues = np.asarray(self.bvalues, dtype=np.float64)
        if self.directions.ndim != 2 or self.directions.shape[1] != 3:
            raise ValueError(f"directions must be (N, 3), got {self.directions.shape}")
        if self.bvalues.shape != (self.directions.shape[0],):
            raise ValueError("bvalues must match directions")
        dw = self.bvalues > 0
        norms = np.linalg.norm(self.directions[dw], axis=1)
        if dw.any() and not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("diffusion-weighted directions must be unit vectors")

    def __len__(self) -> int:
        return self.directions.shape[0]

    def is_well_posed(self) -> bool:
        """At least one b=0 row and >= 6 distinct DW directions."""
        if not np.any(self.bvalues == 0):
            return False
        dw = self.directions[self.bvalues > 0]
        # antipodal directions probe the same tensor projection
        canon = {tuple(np.round(d if d[np.argmax(np.abs(d))] >= 0 else -d, 6)) for d in dw}
        return len(canon) >= 6

    def save(self, path) -> None:
        rows = np.column_stack([self.directions, self.bvalues])
        np.savetxt(path, rows, fmt="%.10g")

    @classmethod
    def load(cls, path) -> "GradientTable":
        rows = np.atleast_2d(np.loadtxt(path))
        if rows.shape[1] != 4:
            raise DataError(f"{path}: gradient table rows must be 'gx gy gz b'")
        return cls(rows[:, :3], rows[:, 3])


def design_matrix(table: GradientTable) -> np.ndarray:
    """(N, 7) rows [-b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2, 1]."""
    g = table.directions
    b = table.bvalues
    x, y, z = g[:, 0], g[:, 1], g[:, 2]
    cols = [x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z]
    X = np.stack([-b * c for c in cols] + [np.ones_like(b)], axis=1)
    return X


def tensor_to_matrix(d6: np.ndarray) -> np.ndarray:
    """(..., 6) unique components -> (..., 3, 3) symmetric matrices."""
    d6 = np.asarray(d6)
    m = np.empty(d6.shape[:-1] + (3, 3), dtype=d6.dtype)
    m[..., 0, 0] = d6[..., 0]
    m[..., 0, 1] = m[..., 1, 0] = d6[..., 1]
    m[..., 0, 2] = m[..., 2, 0] = d6[..., 2]
    m[..., 1, 1] = d6[..., 3]
    m[..., 1, 2] = m[..., 2, 1] = d6[..., 4]
    m[..., 2, 2] = d6[..., 5]
    return m


def simulate_signal(d6: np.ndarray, s0, table: GradientTable) -> np.ndarray:
    """Noiseless signals S_k = S0 * exp(-b_k g_k^T D g_k) for (..., 6) tensors."""
    d6 = np.asarray(d6, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    if np.any(s0 <= 0):
        raise ValueError("S0 must be positive")
    g = table.directions
    x, y, z = g[:, 0], g[:, 1], g[:, 2]
    quad = np.stack([x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z], axis=1)  # (N, 6)
    gdg = d6 @ quad.T  # (..., N)
    return s0[..., None] * np.exp(-table.bvalues * gdg)


@dataclass
class DtiVolume:
    """Per-voxel symmetric diffusion tensors, channels-last (..., 6)."""

    tensors: np.ndarray
    meta: VolumeMeta | None = None
    log_s0: np.ndarray | None = None
    fit_failed: np.ndarray | None = None

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors)
        if self.tensors.shape[-1] != 6:
            raise ValueError(f"tensors must have 6 trailing components, got {self.tensors.shape}")


def fit_wlls(signals: np.ndarray, table: GradientTable, mask: np.ndarray | None = None,
             second_pass: bool = False, b0_threshold: float = 0.0) -> DtiVolume:
    """Weighted linear least squares tensor fit.

    signals: (..., N) measurements matching the gradient table. Voxels
    outside ``mask`` (default: mean b=0 signal > b0_threshold), and voxels
    with any non-positive signal or a singular normal matrix, are flagged
    in ``fit_failed`` and left as zero tensors.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[-1] != len(table):
        raise ValueError(f"signals last axis {signals.shape[-1]} != table size {len(table)}")
    if not table.is_well_posed():
        raise ValueError("gradient table is not well posed (need b=0 and >= 6 distinct directions)")
    spatial = signals.shape[:-1]
    flat = signals.reshape(-1, len(table))
    X = design_matrix(table)

    b0 = flat[:, table.bvalues == 0].mean(axis=1)
    fit_mask = b0 > b0_threshold
    if mask is not None:
        fit_mask &= np.asarray(mask, dtype=bool).reshape(-1)
    positive = np.all(flat > 0, axis=1)
    usable = fit_mask & positive

    beta = np.zeros((flat.shape[0], 7))
    failed = fit_mask & ~positive

    if usable.any():
        y = np.log(flat[usable])
        w = flat[usable] ** 2
        sol, ok = _solve_weighted(X, y, w)
        if second_pass:
            w2 = np.exp(sol @ X.T) ** 2
            sol2, ok2 = _solve_weighted(X, y, w2)
            use = ok & ok2
            sol[use] = sol2[use]
        beta[usable] = sol
        bad = np.flatnonzero(usable)[~ok]
        failed[bad] = True
        beta[bad] = 0.0

    tensors = beta[:, :6].reshape(spatial + (6,))
    log_s0 = beta[:, 6].reshape(spatial)
    return DtiVolume(tensors=tensors, log_s0=log_s0,
                     fit_failed=failed.reshape(spatial))


def _solve_weighted(X: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Batched solve of (X^T W X) beta = X^T W y with per-row weight vectors.

    The normal matrix mixes scales (b^2 g^4 terms vs the intercept), so it is
    diagonally equilibrated before solving; near-singular voxels (degenerate
    direction sets) are reported, not solved.
    """
    A = np.einsum("ki,vk,kj->vij", X, w, X, optimize=True)  # (V, 7, 7)
    rhs = np.einsum("ki,vk,vk->vi", X, w, y, optimize=True)  # (V, 7)
    d = np.sqrt(np.einsum("vii->vi", A))
    ok = np.all(d > 0, axis=1) & np.all(np.isfinite(d), axis=1)
    beta = np.zeros_like(rhs)
    if ok.any():
        idx = np.flatnonzero(ok)
        dn = d[idx]
        An = A[idx] / (dn[:, :, None] * dn[:, None, :])
        good = np.linalg.eigvalsh(An)[:, 0] > 1e-12
        keep = idx[good]
        ok = np.zeros_like(ok)
        ok[keep] = True
        if keep.size:
            z = np.linalg.solve(An[good], (rhs[keep] / dn[good])[:, :, None])[:, :, 0]
            beta[keep] = z / dn[good]
    return beta, ok


def fit_ols(signals: np.ndarray, table: GradientTable) -> np.ndarray:
    """Unweighted normal-equations fit; reference oracle for the WLLS path."""
    signals = np.asarray(signals, dtype=np.float64)
    flat = signals.reshape(-1, len(table))
    X = design_matrix(table)
    y = np.log(flat)
    beta, *_ = np.linalg.lstsq(X, y.T, rcond=None)
    return beta.T.reshape(signals.shape[:-1] + (7,))


def tensor_scalars(dti: DtiVolume) -> tuple[np.ndarray, np.ndarray]:
    """Mean diffusivity and fractional anisotropy maps from eigenvalues.

    MD = trace/3; FA = sqrt(3/2) * ||lambda - MD|| / ||lambda||, clamped to
    [0, 1]; zero tensors give FA = 0.
    """
    mats = tensor_to_matrix(dti.tensors)
    evals = np.linalg.eigvalsh(mats)
    md = evals.mean(axis=-1)
    dev = evals - md[..., None]
    num = np.linalg.norm(dev, axis=-1)
    den = np.linalg.norm(evals, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(1.5) * num / den
    fa = np.where(den > 0, fa, 0.0)
    return md, np.clip(fa, 0.0, 1.0)


def principal_direction(d6: np.ndarray) -> np.ndarray:
    """Unit eigenvector of the largest eigenvalue for (..., 6) tensors."""
    mats = tensor_to_matrix(np.asarray(d6, dtype=np.float64))
    evals, evecs = np.linalg.eigh(mats)
    return evecs[..., :, -1]


def default_gradient_table(n_directions: int = 12, bvalue: float = 500.0,
                           n_b0: int = 1) -> GradientTable:
    """b=0 rows plus ``n_directions`` roughly uniform unit vectors at ``bvalue``."""
    i = np.arange(n_directions)
    # Fibonacci hemisphere: well-spread, deterministic
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    zc = (i + 0.5) / n_directions  # upper hemisphere only; antipodes are equivalent
    r = np.sqrt(1.0 - zc * zc)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), zc], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    directions = np.vstack([np.zeros((n_b0, 3)), dirs])
    bvalues = np.concatenate([np.zeros(n_b0), np.full(n_directions, float(bvalue))])
    return GradientTable(directions, bvalues)


__all__ = [
    "GradientTable", "DtiVolume", "design_matrix", "simulate_signal",
    "fit_wlls", "fit_ols", "tensor_scalars", "tensor_to_matrix",
    "principal_direction", "default_gradient_table", "COMPONENT_NAMES",
]
