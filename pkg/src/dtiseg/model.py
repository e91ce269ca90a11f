"""Cascaded multi-task segmentation network.

A patch-wise attention module turns the 6-channel tensor image into 6
full-resolution shared feature maps. Three U-Net style FCNs then run in
easy-to-hard order (tissue -> tracts -> parcellation); each consumes the
raw input, the attention features, and the penultimate feature maps of
every earlier FCN. Tissue/parcellation heads are softmax (exclusive),
the tract head is per-channel sigmoid (tracts may overlap).

Parameters live in a flat name->Tensor dict plus the per-label task
uncertainty vector w, which is optimized alongside the network weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import FormatError
from .tensor import Tensor

TASKS = ("tissue", "tract", "parcellation")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    cube_size: int = 32
    patch_size: int = 4
    n_encoders: int = 2
    embed_dim: int = 128
    n_heads: int = 2
    att_out_channels: int = 6
    fcn_base_features: int = 8
    fcn_depth: int = 3
    in_channels: int = 6
    l_sg: int = 4
    l_tr: int = 31
    l_pc: int = 96
    tasks: tuple = TASKS
    max_features: int = 320
    mlp_ratio: int = 4
    include_background: bool = False  # add background Dice terms (and w entries)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.cube_size % self.patch_size != 0:
            raise ValueError(f"cube_size {self.cube_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.cube_size % (2 ** (self.fcn_depth - 1)) != 0:
            raise ValueError(f"cube_size {self.cube_size} not divisible by 2^(depth-1) "
                             f"for depth {self.fcn_depth}")
        for name in ("cube_size", "patch_size", "n_encoders", "embed_dim", "n_heads",
                     "att_out_channels", "fcn_base_features", "fcn_depth", "in_channels",
                     "l_sg", "l_tr", "l_pc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ValueError(f"unknown tasks {bad}; valid: {TASKS}")
        order = [TASKS.index(t) for t in self.tasks]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ValueError(f"tasks must keep cascade order {TASKS}, got {self.tasks}")

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(cube_size=64, patch_size=8, n_encoders=4, embed_dim=512, n_heads=4,
                   att_out_channels=6, fcn_base_features=32, fcn_depth=5)

    @property
    def n_tokens(self) -> int:
        return (self.cube_size // self.patch_size) ** 3

    @property
    def token_dim(self) -> int:
        return self.in_channels * self.patch_size ** 3

    def level_features(self) -> list:
        return [min(self.fcn_base_features * 2 ** l, self.max_features)
                for l in range(self.fcn_depth)]

    def n_labels(self, task: str) -> int:
        return {"tissue": self.l_sg, "tract": self.l_tr, "parcellation": self.l_pc}[task]

    def fcn_out_channels(self, task: str) -> int:
        # exclusive tasks carry an explicit background channel
        n = self.n_labels(task)
        return n if task == "tract" else n + 1

    def fcn_in_channels(self, task: str) -> int:
        c = self.in_channels + self.att_out_channels
        for t in self.tasks:
            if t == task:
                return c
            c += self.fcn_base_features  # penultimate maps forwarded downstream
        raise ValueError(f"task {task!r} not in cascade {self.tasks}")

    def dice_channels(self, task: str) -> int:
        extra = 1 if (self.include_background and task != "tract") else 0
        return self.n_labels(task) + extra

    @property
    def task_weight_length(self) -> int:
        return sum(self.dice_channels(t) for t in self.tasks)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        d = json.loads(s)
        d["tasks"] = tuple(d["tasks"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict
    task_weights: Tensor

    def all_tensors(self):
        yield from self.weights.items()
        yield "task_weights", self.task_weights

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.all_tensors())

    def zero_grads(self) -> None:
        for _, t in self.all_tensors():
            t.grad = None

    def validate(self) -> None:
        expected = expected_n_parameters(self.config)
        actual = self.n_parameters()
        if actual != expected:
            raise AssertionError(f"parameter count {actual} != expected {expected}")


@dataclass
class CascadeOutput:
    y_sg: Tensor | None
    y_tr: Tensor | None
    y_pc: Tensor | None
    f_att: Tensor
    f_sg: Tensor | None = None
    f_tr: Tensor | None = None

    def probabilities(self, task: str) -> Tensor:
        return {"tissue": self.y_sg, "tract": self.y_tr, "parcellation": self.y_pc}[task]


# ---------------------------------------------------------------------------
# initialization


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def _init_attention(cfg: ModelConfig, rng, dtype) -> dict:
    d, td = cfg.embed_dim, cfg.token_dim
    p = {
        "att.embed.w": _normal(rng, (td, d), 0.02, dtype),
        "att.embed.b": _zeros((d,), dtype),
        "att.pos": _normal(rng, (cfg.n_tokens, d), 0.02, dtype),
    }
    hid = cfg.mlp_ratio * d
    for i in range(cfg.n_encoders):
        pre = f"att.enc{i}"
        p[f"{pre}.ln1.g"] = _ones((d,), dtype)
        p[f"{pre}.ln1.b"] = _zeros((d,), dtype)
        p[f"{pre}.qkv.w"] = _normal(rng, (d, 3 * d), 0.02, dtype)
        p[f"{pre}.qkv.b"] = _zeros((3 * d,), dtype)
        p[f"{pre}.proj.w"] = _normal(rng, (d, d), 0.02, dtype)
        p[f"{pre}.proj.b"] = _zeros((d,), dtype)
        p[f"{pre}.ln2.g"] = _ones((d,), dtype)
        p[f"{pre}.ln2.b"] = _zeros((d,), dtype)
        p[f"{pre}.mlp.w1"] = _normal(rng, (d, hid), 0.02, dtype)
        p[f"{pre}.mlp.b1"] = _zeros((hid,), dtype)
        p[f"{pre}.mlp.w2"] = _normal(rng, (hid, d), 0.02, dtype)
        p[f"{pre}.mlp.b2"] = _zeros((d,), dtype)
    p["att.out.w"] = _normal(rng, (d, td), 0.02, dtype)
    p["att.out.b"] = _zeros((td,), dtype)
    return p


def _he(rng, out_ch, in_ch, k, dtype):
    std = np.sqrt(2.0 / (in_ch * k ** 3))
    return _normal(rng, (out_ch, in_ch, k, k, k), std, dtype)


def _init_fcn(cfg: ModelConfig, prefix: str, in_ch: int, out_ch: int, rng, dtype) -> dict:
    feats = cfg.level_features()
    p = {}
    prev = in_ch
    for l, f in enumerate(feats):
        pre = f"{prefix}.enc{l}"
        p[f"{pre}.c0.w"] = _he(rng, f, prev, 3, dtype)
        p[f"{pre}.in0.g"] = _ones((f, 1, 1, 1), dtype)
        p[f"{pre}.in0.b"] = _zeros((f, 1, 1, 1), dtype)
        p[f"{pre}.c1.w"] = _he(rng, f, f, 3, dtype)
        p[f"{pre}.in1.g"] = _ones((f, 1, 1, 1), dtype)
        p[f"{pre}.in1.b"] = _zeros((f, 1, 1, 1), dtype)
        prev = f
    for l in range(cfg.fcn_depth - 2, -1, -1):
        pre = f"{prefix}.dec{l}"
        f_lo, f_hi = feats[l], feats[l + 1]
        # transposed conv kernel layout (C_in, C_out, 2, 2, 2)
        std = np.sqrt(2.0 / (f_hi * 8))
        p[f"{pre}.up.w"] = _normal(rng, (f_hi, f_lo, 2, 2, 2), std, dtype)
        p[f"{pre}.c0.w"] = _he(rng, f_lo, 2 * f_lo, 3, dtype)
        p[f"{pre}.in0.g"] = _ones((f_lo, 1, 1, 1), dtype)
        p[f"{pre}.in0.b"] = _zeros((f_lo, 1, 1, 1), dtype)
        p[f"{pre}.c1.w"] = _he(rng, f_lo, f_lo, 3, dtype)
        p[f"{pre}.in1.g"] = _ones((f_lo, 1, 1, 1), dtype)
        p[f"{pre}.in1.b"] = _zeros((f_lo, 1, 1, 1), dtype)
    p[f"{prefix}.out.w"] = _he(rng, out_ch, feats[0], 1, dtype)
    p[f"{prefix}.out.b"] = _zeros((out_ch, 1, 1, 1), dtype)
    return p


_TASK_PREFIX = {"tissue": "sg", "tract": "tr", "parcellation": "pc"}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = _init_attention(cfg, rng, dtype)
    for task in cfg.tasks:
        weights.update(_init_fcn(cfg, _TASK_PREFIX[task],
                                 cfg.fcn_in_channels(task),
                                 cfg.fcn_out_channels(task), rng, dtype))
    w = _zeros((cfg.task_weight_length,), dtype)
    params = ModelParams(config=cfg, weights=weights, task_weights=w)
    params.validate()
    return params


def expected_n_parameters(cfg: ModelConfig) -> int:
    d, td, n = cfg.embed_dim, cfg.token_dim, cfg.n_tokens
    hid = cfg.mlp_ratio * d
    att = td * d + d + n * d + td * d + td
    att += cfg.n_encoders * (2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d
                             + d * hid + hid + hid * d + d)
    total = att
    feats = cfg.level_features()
    for task in cfg.tasks:
        in_ch, out_ch = cfg.fcn_in_channels(task), cfg.fcn_out_channels(task)
        prev = in_ch
        fcn = 0
        for f in feats:
            fcn += f * prev * 27 + f * f * 27 + 4 * f
            prev = f
        for l in range(cfg.fcn_depth - 1):
            f_lo, f_hi = feats[l], feats[l + 1]
            fcn += f_hi * f_lo * 8 + f_lo * 2 * f_lo * 27 + f_lo * f_lo * 27 + 4 * f_lo
        fcn += out_ch * feats[0] + out_ch
        total += fcn
    total += cfg.task_weight_length
    return total


# ---------------------------------------------------------------------------
# forward passes


def attention_forward(x: Tensor, weights: dict, cfg: ModelConfig) -> Tensor:
    """Patch-wise transformer producing att_out_channels full-res feature maps."""
    c, s = x.shape[0], x.shape[1]
    p = cfg.patch_size
    if s % p != 0:
        raise ValueError(f"spatial size {s} not divisible by patch size {p}")
    n = s // p
    nt = n ** 3
    tok = x.reshape((c, n, p, n, p, n, p)).transpose((1, 3, 5, 0, 2, 4, 6)).reshape((nt, c * p ** 3))
    t = tok @ weights["att.embed.w"] + weights["att.embed.b"] + weights["att.pos"]
    d, h = cfg.embed_dim, cfg.n_heads
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_encoders):
        pre = f"att.enc{i}"
        hn = T.layer_norm(t, weights[f"{pre}.ln1.g"], weights[f"{pre}.ln1.b"])
        qkv = hn @ weights[f"{pre}.qkv.w"] + weights[f"{pre}.qkv.b"]
        q = qkv[:, :d].reshape((nt, h, dh)).transpose((1, 0, 2))
        k = qkv[:, d:2 * d].reshape((nt, h, dh)).transpose((1, 0, 2))
        v = qkv[:, 2 * d:].reshape((nt, h, dh)).transpose((1, 0, 2))
        scores = (q @ k.transpose((0, 2, 1))) * scale
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape((nt, d))
        t = t + (ctx @ weights[f"{pre}.proj.w"] + weights[f"{pre}.proj.b"])
        hn2 = T.layer_norm(t, weights[f"{pre}.ln2.g"], weights[f"{pre}.ln2.b"])
        m = T.gelu(hn2 @ weights[f"{pre}.mlp.w1"] + weights[f"{pre}.mlp.b1"])
        t = t + (m @ weights[f"{pre}.mlp.w2"] + weights[f"{pre}.mlp.b2"])
    out_tok = t @ weights["att.out.w"] + weights["att.out.b"]
    ca = cfg.att_out_channels
    out = out_tok.reshape((n, n, n, ca, p, p, p)).transpose((3, 0, 4, 1, 5, 2, 6)).reshape((ca, s, s, s))
    return out


def _conv_block(h: Tensor, weights: dict, pre: str, idx: int, stride: int) -> Tensor:
    h = T.conv3d(h, weights[f"{pre}.c{idx}.w"], stride=stride, padding=1)
    h = T.instance_norm(h, weights[f"{pre}.in{idx}.g"], weights[f"{pre}.in{idx}.b"])
    return T.leaky_relu(h, LEAKY_SLOPE)


def fcn_forward(x: Tensor, weights: dict, prefix: str, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """U-Net encoder/decoder; returns (logits, penultimate full-res features)."""
    s = x.shape[1]
    if s % (2 ** (cfg.fcn_depth - 1)) != 0:
        raise ValueError(f"spatial size {s} not divisible by 2^(depth-1), depth={cfg.fcn_depth}")
    skips = []
    h = x
    for l in range(cfg.fcn_depth):
        h = _conv_block(h, weights, f"{prefix}.enc{l}", 0, stride=1 if l == 0 else 2)
        h = _conv_block(h, weights, f"{prefix}.enc{l}", 1, stride=1)
        if l < cfg.fcn_depth - 1:
            skips.append(h)
    for l in range(cfg.fcn_depth - 2, -1, -1):
        h = T.conv_transpose3d(h, weights[f"{prefix}.dec{l}.up.w"], stride=2)
        h = T.concat([h, skips[l]], axis=0)
        h = _conv_block(h, weights, f"{prefix}.dec{l}", 0, stride=1)
        h = _conv_block(h, weights, f"{prefix}.dec{l}", 1, stride=1)
    penultimate = h
    logits = T.conv3d(h, weights[f"{prefix}.out.w"]) + weights[f"{prefix}.out.b"]
    return logits, penultimate


def cascade_forward(x, params: ModelParams) -> CascadeOutput:
    """Full cascade on one cube: attention, then the task FCNs in order."""
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=params.task_weights.dtype)
    if x.shape[0] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[0]} channels, config expects {cfg.in_channels}")
    if x.shape[1:] != (cfg.cube_size,) * 3:
        raise ValueError(f"input spatial shape {x.shape[1:]} != cube {cfg.cube_size}")
    f_att = attention_forward(x, params.weights, cfg)
    feats = [x, f_att]
    y = {"tissue": None, "tract": None, "parcellation": None}
    pen = {"tissue": None, "tract": None, "parcellation": None}
    for task in cfg.tasks:
        inp = T.concat(feats, axis=0)
        logits, penultimate = fcn_forward(inp, params.weights, _TASK_PREFIX[task], cfg)
        y[task] = T.sigmoid(logits) if task == "tract" else T.softmax(logits, axis=0)
        pen[task] = penultimate
        feats.append(penultimate)
    return CascadeOutput(y_sg=y["tissue"], y_tr=y["tract"], y_pc=y["parcellation"],
                         f_att=f_att, f_sg=pen["tissue"], f_tr=pen["tract"])


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, config JSON, named float32 LE blobs

CKPT_MAGIC = b"DSEGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> None:
    cfg_json = params.config.to_json().encode("utf-8")
    blobs = list(params.all_tensors())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(blobs)))
        for name, t in blobs:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = ModelConfig.from_json(raw[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (n_blobs,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)
    if "task_weights" not in tensors:
        raise FormatError(f"{path}: checkpoint is missing the task weight vector")
    w = tensors.pop("task_weights")
    params = ModelParams(config=cfg, weights=tensors, task_weights=w)
    params.validate()
    return params
