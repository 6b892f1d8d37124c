"""Attention-gated U-Net for per-cell classification of channel-stacked patches.

Architecture: a four-level encoder (two 3x3 conv/batchnorm/relu stages per
level, 2x2 maxpool between levels), three decoder levels (nearest-x2
upsampling followed by a 3x3 convolution, an additively-gated skip
connection, two conv/batchnorm/relu stages, dropout), and a 1x1
convolution head with channel softmax.

The gating signal of each attention gate is the decoder-path feature one
level coarser (the bottleneck output for the first gate); it is projected
by a 1x1 convolution to half the skip's channel width, upsampled to the
skip's resolution, fused additively with the projected skip, and squashed
to a single-channel map in (0,1).

Parameters live in a flat name -> Tensor map whose inventory and order are
fixed by ``param_shapes``. Checkpoints (see ``save_checkpoint``) carry the
parameters, batch-norm running statistics under ``<block>.running_mean``/
``.running_var``, and the configuration scalars under ``config.*`` reserved
names, all as named little-endian float32 arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from . import rng

CHECKPOINT_MAGIC = b"MUNW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 21
    num_classes: int = 5
    encoder_features: tuple = (64, 128, 256, 512)
    dropout_p: float = 0.3
    patch_size: int = 32

    def validate(self) -> None:
        f = tuple(self.encoder_features)
        if len(f) < 2 or any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError(f"encoder features must be strictly increasing, got {f}")
        if f[0] < 2:
            raise ValueError("first encoder width must be >= 2")
        down = 2 ** (len(f) - 1)
        if self.patch_size % down:
            raise ValueError(
                f"patch size {self.patch_size} not divisible by {down} for {len(f)} levels")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need at least 1 input channel and 2 classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout_p}")

    @property
    def levels(self) -> int:
        return len(self.encoder_features)


def param_shapes(config: ModelConfig) -> list:
    """The closed parameter inventory: (name, shape) in forward-pass order."""
    config.validate()
    f = tuple(config.encoder_features)
    shapes = []

    # convs feeding a batch norm carry no bias: the normalization would
    # cancel it exactly and beta already plays that role
    def conv_bn(prefix, cin, cout):
        shapes.append((f"{prefix}.conv1.w", (cout, cin, 3, 3)))
        shapes.append((f"{prefix}.bn1.gamma", (cout,)))
        shapes.append((f"{prefix}.bn1.beta", (cout,)))
        shapes.append((f"{prefix}.conv2.w", (cout, cout, 3, 3)))
        shapes.append((f"{prefix}.bn2.gamma", (cout,)))
        shapes.append((f"{prefix}.bn2.beta", (cout,)))

    cin = config.in_channels
    for level, width in enumerate(f, start=1):
        conv_bn(f"enc{level}", cin, width)
        cin = width
    for level in range(len(f) - 1, 0, -1):
        skip_ch = f[level - 1]
        gate_ch = f[level]
        f_int = skip_ch // 2
        shapes.append((f"dec{level}.up.w", (skip_ch, gate_ch, 3, 3)))
        shapes.append((f"dec{level}.up.b", (skip_ch,)))
        shapes.append((f"dec{level}.att.wg.w", (f_int, gate_ch, 1, 1)))
        shapes.append((f"dec{level}.att.wg.b", (f_int,)))
        shapes.append((f"dec{level}.att.wx.w", (f_int, skip_ch, 1, 1)))
        shapes.append((f"dec{level}.att.wx.b", (f_int,)))
        shapes.append((f"dec{level}.att.psi.w", (1, f_int, 1, 1)))
        shapes.append((f"dec{level}.att.psi.b", (1,)))
        conv_bn(f"dec{level}", 2 * skip_ch, skip_ch)
    shapes.append(("head.w", (config.num_classes, f[0], 1, 1)))
    shapes.append(("head.b", (config.num_classes,)))
    return shapes


def bn_blocks(config: ModelConfig) -> list:
    """(prefix, channels) of every batch-norm layer, in inventory order."""
    f = tuple(config.encoder_features)
    blocks = []
    for level, width in enumerate(f, start=1):
        blocks.append((f"enc{level}.bn1", width))
        blocks.append((f"enc{level}.bn2", width))
    for level in range(len(f) - 1, 0, -1):
        blocks.append((f"dec{level}.bn1", f[level - 1]))
        blocks.append((f"dec{level}.bn2", f[level - 1]))
    return blocks


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict = field(default_factory=dict)            # name -> Tensor
    bn: dict = field(default_factory=dict)                # prefix -> BatchNormState

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def named(self) -> Iterator:
        for name, _ in param_shapes(self.config):
            yield name, self.params[name]

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def clone(self) -> "ModelParams":
        out = ModelParams(self.config)
        for name, t in self.params.items():
            out.params[name] = ad.Tensor(t.data.copy(), requires_grad=True)
        for prefix, state in self.bn.items():
            s = ad.BatchNormState(state.running_mean.size)
            s.running_mean = state.running_mean.copy()
            s.running_var = state.running_var.copy()
            out.bn[prefix] = s
        return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal convolution weights, zero biases, identity batch norm."""
    mp = ModelParams(config)
    for stream, (name, shape) in enumerate(param_shapes(config)):
        if name.endswith(".w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            t = ad.randn(shape, seed=seed, stddev=float(np.sqrt(2.0 / fan_in)),
                         stream=stream, requires_grad=True)
        elif name.endswith(".gamma"):
            t = ad.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
        else:                                              # biases and beta
            t = ad.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        mp.params[name] = t
    for prefix, channels in bn_blocks(config):
        mp.bn[prefix] = ad.BatchNormState(channels)
    return mp


def _conv_bn_relu(x: ad.Tensor, mp: ModelParams, prefix: str, stage: int, mode: str) -> ad.Tensor:
    y = ad.conv2d(x, mp[f"{prefix}.conv{stage}.w"])
    y = ad.batchnorm2d(y, mp[f"{prefix}.bn{stage}.gamma"], mp[f"{prefix}.bn{stage}.beta"],
                       mp.bn[f"{prefix}.bn{stage}"], mode)
    return ad.relu(y)


def encoder_block(x: ad.Tensor, mp: ModelParams, level: int, mode: str,
                  pool: bool = True):
    """Two conv/bn/relu stages, then optional 2x2 maxpool.

    Returns (features, pooled); ``pooled`` is None when pool=False (the
    bottleneck level keeps full resolution).
    """
    feats = _conv_bn_relu(x, mp, f"enc{level}", 1, mode)
    feats = _conv_bn_relu(feats, mp, f"enc{level}", 2, mode)
    pooled = ad.maxpool2d(feats) if pool else None
    return feats, pooled


def attention_gate(skip: ad.Tensor, gate: ad.Tensor, mp: ModelParams, level: int):
    """Additive attention: alpha = sigmoid(psi(relu(Wg g + Wx x))).

    The projected gate is upsampled x2 when it arrives at half the skip's
    resolution. Returns (skip * alpha, alpha); alpha has one channel.
    """
    g1 = ad.conv2d(gate, mp[f"dec{level}.att.wg.w"], mp[f"dec{level}.att.wg.b"])
    sh, sw = skip.shape[2], skip.shape[3]
    gh, gw = g1.shape[2], g1.shape[3]
    if (gh, gw) == (sh // 2, sw // 2):
        g1 = ad.upsample_nearest2(g1)
    elif (gh, gw) != (sh, sw):
        raise ValueError(
            f"attention gate spatial mismatch: skip {sh}x{sw}, gate {gh}x{gw}")
    x1 = ad.conv2d(skip, mp[f"dec{level}.att.wx.w"], mp[f"dec{level}.att.wx.b"])
    a = ad.relu(ad.add(g1, x1))
    alpha = ad.sigmoid(ad.conv2d(a, mp[f"dec{level}.att.psi.w"], mp[f"dec{level}.att.psi.b"]))
    return ad.mul(skip, alpha), alpha


def _upconv(x: ad.Tensor, mp: ModelParams, level: int) -> ad.Tensor:
    up = ad.upsample_nearest2(x)
    return ad.conv2d(up, mp[f"dec{level}.up.w"], mp[f"dec{level}.up.b"])


def forward(mp: ModelParams, x: ad.Tensor, mode: str, dropout_seed: int = 0) -> ad.Tensor:
    """[N,C,z,z] -> channel-normalized class probabilities [N,K,z,z]."""
    cfg = mp.config
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    if h != cfg.patch_size or w != cfg.patch_size:
        raise ValueError(f"expected {cfg.patch_size}x{cfg.patch_size} patches, got {h}x{w}")

    levels = cfg.levels
    skips = []
    cur = x
    for level in range(1, levels + 1):
        feats, pooled = encoder_block(cur, mp, level, mode, pool=level < levels)
        if level < levels:
            skips.append(feats)
            cur = pooled
        else:
            cur = feats

    d = cur
    for level in range(levels - 1, 0, -1):
        u = _upconv(d, mp, level)
        gated, _ = attention_gate(skips[level - 1], d, mp, level)
        y = ad.concat_channels(u, gated)
        y = _conv_bn_relu(y, mp, f"dec{level}", 1, mode)
        y = _conv_bn_relu(y, mp, f"dec{level}", 2, mode)
        d = ad.dropout(y, cfg.dropout_p, dropout_seed, mode, stream=level)

    logits = ad.conv2d(d, mp["head.w"], mp["head.b"])
    return ad.softmax_channel(logits)


def predict_classes(probs) -> np.ndarray:
    """Per-cell argmax over the channel axis; ties go to the lowest class."""
    p = probs.data if isinstance(probs, ad.Tensor) else np.asarray(probs)
    return p.argmax(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint io


def _config_entries(config: ModelConfig) -> list:
    return [
        ("config.in_channels", np.asarray([config.in_channels], dtype=np.float32)),
        ("config.num_classes", np.asarray([config.num_classes], dtype=np.float32)),
        ("config.encoder_features", np.asarray(config.encoder_features, dtype=np.float32)),
        ("config.dropout_p", np.asarray([config.dropout_p], dtype=np.float32)),
        ("config.patch_size", np.asarray([config.patch_size], dtype=np.float32)),
    ]


def save_checkpoint(mp: ModelParams, path, extra: Optional[dict] = None) -> None:
    """Write the bit-exact MUNW checkpoint (see module docstring).

    ``extra`` allows additional reserved arrays (such as per-channel
    normalization statistics under ``norm.*``) to ride along.
    """
    entries = [(name, t.data) for name, t in mp.named()]
    for prefix, _ in bn_blocks(mp.config):
        entries.append((f"{prefix}.running_mean", mp.bn[prefix].running_mean))
        entries.append((f"{prefix}.running_var", mp.bn[prefix].running_var))
    entries.extend(_config_entries(mp.config))
    if extra:
        entries.extend(sorted(extra.items()))

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint_arrays(path) -> dict:
    """Parse every named array of a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        end = off + 4 * size
        if end > len(blob):
            raise ValueError(f"truncated checkpoint: entry {name!r} needs {end} bytes, "
                             f"file has {len(blob)}")
        arrays[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    return arrays


def load_checkpoint(path) -> ModelParams:
    arrays = read_checkpoint_arrays(path)

    def cfg_entry(key):
        if key not in arrays:
            raise ValueError(f"checkpoint missing reserved entry {key!r}")
        return arrays[key]

    config = ModelConfig(
        in_channels=int(cfg_entry("config.in_channels")[0]),
        num_classes=int(cfg_entry("config.num_classes")[0]),
        encoder_features=tuple(int(v) for v in cfg_entry("config.encoder_features")),
        dropout_p=float(cfg_entry("config.dropout_p")[0]),
        patch_size=int(cfg_entry("config.patch_size")[0]),
    )
    mp = ModelParams(config)
    for name, shape in param_shapes(config):
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        arr = arrays[name]
        if arr.shape != shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                             f"expected {shape}")
        mp.params[name] = ad.Tensor(arr, requires_grad=True)
    for prefix, channels in bn_blocks(config):
        state = ad.BatchNormState(channels)
        state.running_mean = arrays[f"{prefix}.running_mean"].copy()
        state.running_var = arrays[f"{prefix}.running_var"].copy()
        mp.bn[prefix] = state
    return mp
