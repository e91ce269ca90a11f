"""Synthetic tensor-image phantoms with known labels for all three tasks.

The default phantom mirrors the real class structure at desk scale: a
CSF rim around a cortical shell around white matter with central
subcortical nuclei, straight/diagonal tract tubes through the white
matter with tensors aligned to the tube axis, and an angular-sector
parcellation of the cortex shell. Everything is deterministic given the
seed, and simulated dMRI signals can be produced for end-to-end fit tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .dti import DtiVolume, GradientTable, default_gradient_table, simulate_signal
from .nifti import VolumeMeta
from .tracts import TractMaskSet

TISSUE_IDS = {"WM": 1, "CGM": 2, "SGM": 3, "CSF": 4}

# per-tissue isotropic diffusivities in mm^2/s (rough physiologic ordering:
# free water >> gray matter > white matter baseline)
DEFAULT_DIFFUSIVITY = {"WM": 0.9e-3, "CGM": 1.2e-3, "SGM": 1.1e-3, "CSF": 2.8e-3}
TRACT_EIGENVALUES = (1.6e-3, 0.35e-3, 0.35e-3)  # prolate, aligned with the tube


@dataclass
class TubeSpec:
    name: str
    start: tuple          # voxel coordinates
    end: tuple
    radius: float


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size_mm: tuple = (1.2, 1.2, 1.2)
    outer_radius: float = 0.46      # fractions of the smallest half-extent
    cortex_radius: float = 0.40
    inner_radius: float = 0.32
    sgm_radius: float = 0.10
    n_parcels: int = 6
    tubes: list = field(default_factory=list)
    s0: float = 1000.0
    noise_sigma: float = 0.0
    diffusivity: dict = field(default_factory=lambda: dict(DEFAULT_DIFFUSIVITY))

    def __post_init__(self):
        if not self.tubes:
            self.tubes = default_tubes(self.dims)
        self.tubes = [t if isinstance(t, TubeSpec) else TubeSpec(**t) for t in self.tubes]
        if not (self.outer_radius > self.cortex_radius > self.inner_radius > self.sgm_radius > 0):
            raise ValueError("radii must be nested: outer > cortex > inner > sgm > 0")
        if self.outer_radius > 0.5:
            raise ValueError("outer radius must fit inside the volume")
        for t in self.tubes:
            for pt in (t.start, t.end):
                if not all(0 <= pt[i] < self.dims[i] for i in range(3)):
                    raise ValueError(f"tube {t.name!r} endpoint {pt} outside volume {self.dims}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls(**json.loads(text))


def default_tubes(dims) -> list:
    n = min(dims)
    c = n / 2.0
    r = max(n / 16.0, 1.5)
    lo, hi = 0.22 * n, 0.78 * n
    return [
        TubeSpec("tube_x", (lo, c, c), (hi, c, c), r),
        TubeSpec("tube_y", (c, lo, c), (c, hi, c), r),
        TubeSpec("tube_diag", (lo, lo, 0.35 * n), (hi, hi, 0.65 * n), r),
        TubeSpec("tube_z", (c * 0.8, c * 1.2, lo), (c * 0.8, c * 1.2, hi), r),
    ]


@dataclass
class Phantom:
    dti: DtiVolume
    tissue: np.ndarray        # (X, Y, Z) tissue labels, uint8
    tracts: TractMaskSet
    parcels: np.ndarray       # (X, Y, Z) parcel labels, uint8
    spec: PhantomSpec
    signals: np.ndarray | None = None
    gradient_table: GradientTable | None = None

    @property
    def meta(self) -> VolumeMeta:
        return VolumeMeta(dims=tuple(self.spec.dims),
                          voxel_size_mm=tuple(self.spec.voxel_size_mm),
                          datatype=np.float32)

    def brain_mask(self) -> np.ndarray:
        return self.tissue > 0


def _radial_field(dims) -> tuple:
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) + 0.5 for d in dims], indexing="ij")
    center = [d / 2.0 for d in dims]
    scale = min(dims)
    r = np.sqrt(sum(((g - c) / scale) ** 2 for g, c in zip(grids, center)))
    return r, grids, center


def _tube_mask_and_tangent(tube: TubeSpec, dims):
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) + 0.5 for d in dims], indexing="ij")
    p0 = np.asarray(tube.start, dtype=np.float64)
    p1 = np.asarray(tube.end, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    if length == 0:
        raise ValueError(f"tube {tube.name!r} has zero length")
    u = axis / length
    rel = np.stack([g - p for g, p in zip(grids, p0)], axis=-1)
    t = rel @ u
    proj = rel - t[..., None] * u
    dist = np.linalg.norm(proj, axis=-1)
    mask = (dist <= tube.radius) & (t >= 0) & (t <= length)
    return mask, u


def _anisotropic_tensor(direction: np.ndarray, eigenvalues=TRACT_EIGENVALUES) -> np.ndarray:
    u = direction / np.linalg.norm(direction)
    lam_par, lam_perp, _ = eigenvalues
    m = lam_perp * np.eye(3) + (lam_par - lam_perp) * np.outer(u, u)
    return np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]])


def generate_phantom(spec: PhantomSpec, seed: int = 0,
                     with_signals: bool = False,
                     gradient_table: GradientTable | None = None) -> Phantom:
    """Build the phantom volume; bitwise deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    dims = tuple(spec.dims)
    r, grids, center = _radial_field(dims)

    tissue = np.zeros(dims, dtype=np.uint8)
    tissue[r <= spec.outer_radius] = TISSUE_IDS["CSF"]
    tissue[r <= spec.cortex_radius] = TISSUE_IDS["CGM"]
    tissue[r <= spec.inner_radius] = TISSUE_IDS["WM"]
    tissue[r <= spec.sgm_radius] = TISSUE_IDS["SGM"]

    # parcels: angular sectors of the cortex shell
    cortex = tissue == TISSUE_IDS["CGM"]
    dx = grids[0] - center[0]
    dy = grids[1] - center[1]
    az = np.arctan2(dy, dx)  # [-pi, pi)
    sector = np.floor((az + np.pi) / (2 * np.pi) * spec.n_parcels).astype(np.int64)
    sector = np.clip(sector, 0, spec.n_parcels - 1)
    parcels = np.zeros(dims, dtype=np.uint8)
    parcels[cortex] = (sector[cortex] + 1).astype(np.uint8)

    # isotropic tensors per tissue, anisotropic inside the tubes
    tensors = np.zeros(dims + (6,), dtype=np.float64)
    for name, tid in TISSUE_IDS.items():
        d = spec.diffusivity[name]
        sel = tissue == tid
        tensors[sel] = np.array([d, 0, 0, d, 0, d])

    names, channels, tangents = [], [], []
    wm = tissue == TISSUE_IDS["WM"]
    for tube in spec.tubes:
        mask, u = _tube_mask_and_tangent(tube, dims)
        mask &= wm  # tubes live in white matter
        tensors[mask] = _anisotropic_tensor(u)
        names.append(tube.name)
        channels.append(mask.astype(np.uint8))
        tangents.append(u)
    tracts = TractMaskSet(names=names, channels=np.stack(channels),
                          present=np.ones(len(names), dtype=bool),
                          partial=np.zeros(len(names), dtype=bool))

    meta = VolumeMeta(dims=dims, voxel_size_mm=tuple(spec.voxel_size_mm),
                      datatype=np.float32)
    dti = DtiVolume(tensors=tensors, meta=meta)

    signals = None
    table = None
    if with_signals:
        table = gradient_table or default_gradient_table()
        signals = simulate_signal(tensors.reshape(-1, 6), spec.s0, table).reshape(dims + (len(table),))
        if spec.noise_sigma > 0:
            signals = signals + rng.normal(0.0, spec.noise_sigma, size=signals.shape)
            signals = np.maximum(signals, 1e-3)

    return Phantom(dti=dti, tissue=tissue, tracts=tracts, parcels=parcels,
                   spec=spec, signals=signals, gradient_table=table)


def to_training_case(ph: Phantom, standardize: bool = True):
    """Channels-first training targets: one-hot tissue/parcels, tract stack."""
    from .training import TrainingCase, one_hot, standardize_channels

    x = np.ascontiguousarray(ph.dti.tensors.transpose(3, 0, 1, 2)).astype(np.float32)
    x = standardize_channels(x, mask=ph.brain_mask(), enabled=standardize)
    y_sg = one_hot(ph.tissue, 5)
    y_tr = ph.tracts.channels.astype(np.float32)
    m_tr = ph.tracts.present.astype(np.float64)
    y_pc = one_hot(ph.parcels, ph.spec.n_parcels + 1)
    return TrainingCase(x=x, y_sg=y_sg, y_tr=y_tr, m_tr=m_tr, y_pc=y_pc)
