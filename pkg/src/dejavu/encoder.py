"""Fully-convolutional feature encoder with a hand-written backward pass.

Layout of the network for an ``H x W`` image::

    stem 3x3 conv + ReLU
    residual blocks (3x3, ReLU, 3x3, +skip, ReLU) interleaved with
        stride-2 3x3 conv + ReLU until H / downsample_factor is reached
    spatial pyramid pooling on the bottleneck:
        per pool size s: adaptive avg pool to s x s -> 1x1 conv + ReLU
        -> bilinear upsample back (align_corners=False)
    concat(bottleneck, branches) -> 1x1 conv -> output_dim channels

All tensors are single images in ``(H, W, C)`` layout; conv weights are
``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import ContractError, FormatError, as_image

CHECKPOINT_MAGIC = b"DVW1"


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 16
    num_residual_blocks: int = 3
    spp_pool_sizes: tuple[int, ...] = (32, 16, 8, 4)
    spp_channels: int = 4
    output_dim: int = 10
    downsample_factor: int = 4
    full_resolution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spp_pool_sizes", tuple(int(s) for s in self.spp_pool_sizes))
        pools = self.spp_pool_sizes
        if not pools or any(s < 1 for s in pools):
            raise ContractError(f"pool sizes must be positive, got {pools}")
        if any(a <= b for a, b in zip(pools, pools[1:])):
            raise ContractError(f"pool sizes must be strictly decreasing, got {pools}")
        if self.output_dim < 1 or self.stem_channels < 1 or self.spp_channels < 1:
            raise ContractError("channel counts must be >= 1")
        if self.num_residual_blocks < 0:
            raise ContractError("num_residual_blocks must be >= 0")
        d = self.downsample_factor
        if d < 1 or d & (d - 1):
            raise ContractError(f"downsample_factor must be a power of two, got {d}")

    @property
    def num_downsamples(self) -> int:
        return self.downsample_factor.bit_length() - 1

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        return cls(**{"spp_pool_sizes": (8, 4, 2, 1), **overrides})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    epochs: int = 160
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")


def _stages(cfg: EncoderConfig) -> list[tuple[str, int]]:
    stages = []
    for i in range(max(cfg.num_residual_blocks, cfg.num_downsamples)):
        if i < cfg.num_residual_blocks:
            stages.append(("block", i))
        if i < cfg.num_downsamples:
            stages.append(("down", i))
    return stages


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Registry of every learnable tensor, in checkpoint order."""
    c = cfg.stem_channels
    shapes: dict[str, tuple[int, ...]] = {"stem.w": (3, 3, 3, c), "stem.b": (c,)}
    for kind, i in _stages(cfg):
        if kind == "block":
            for conv in ("conv1", "conv2"):
                shapes[f"block{i}.{conv}.w"] = (3, 3, c, c)
                shapes[f"block{i}.{conv}.b"] = (c,)
        else:
            shapes[f"down{i}.w"] = (3, 3, c, c)
            shapes[f"down{i}.b"] = (c,)
    for k in range(len(cfg.spp_pool_sizes)):
        shapes[f"spp{k}.w"] = (1, 1, c, cfg.spp_channels)
        shapes[f"spp{k}.b"] = (cfg.spp_channels,)
    fused_in = c + len(cfg.spp_pool_sizes) * cfg.spp_channels
    shapes["fuse.w"] = (1, 1, fused_in, cfg.output_dim)
    shapes["fuse.b"] = (cfg.output_dim,)
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def init_parameters(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """He-scaled weights and zero biases.

    Values are rounded to binary32 so a fresh initialisation survives a
    checkpoint round-trip bit for bit.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            params[name] = w.astype(np.float32).astype(np.float64)
    return params


def zeros_like_parameters(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# --- primitive layers ------------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Zero-padded ("same" for stride 1) convolution; returns (out, cols)."""
    kh = w.shape[0]
    pad = kh // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kh), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, -1)
    out = cols @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(ho, wo, -1), cols


def conv2d_backward(dout, cols, x_shape, w, stride: int = 1):
    kh = w.shape[0]
    pad = kh // 2
    ho, wo, cout = dout.shape
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(-1, cout).T).reshape(ho, wo, kh, kh, x_shape[2])
    h, wd = x_shape[0] + 2 * pad, x_shape[1] + 2 * pad
    dxp = np.zeros((h, wd, x_shape[2]))
    for i in range(kh):
        for j in range(kh):
            dxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[pad:h - pad, pad:wd - pad] if pad else dxp
    return dx, dw, db


def adaptive_pool_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row i averages input bins [floor(i*n/s), ceil((i+1)*n/s))."""
    m = np.zeros((size_out, size_in))
    for i in range(size_out):
        lo = (i * size_in) // size_out
        hi = -((-(i + 1) * size_in) // size_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """1-D bilinear resampling weights, align_corners=False convention.

    Output sample o reads source coordinate (o + 0.5) * in / out - 0.5,
    clamped to the valid range.
    """
    m = np.zeros((size_out, size_in))
    scale = size_in / size_out
    for o in range(size_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def separable(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Apply ``rows`` along H and ``cols`` along W of an (H, W, C) tensor."""
    return np.einsum("ih,hwc,jw->ijc", rows, x, cols, optimize=True)


def adaptive_avg_pool(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[:2]
    return separable(x, adaptive_pool_matrix(h, size), adaptive_pool_matrix(w, size))


def bilinear_resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = x.shape[:2]
    return separable(x, bilinear_matrix(h, height), bilinear_matrix(w, width))


# --- network ---------------------------------------------------------------

@dataclass
class ActivationTape:
    cfg: EncoderConfig
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    records: list = field(default_factory=list)


def check_input(cfg: EncoderConfig, shape) -> tuple[int, int]:
    h, w = shape[:2]
    d = cfg.downsample_factor
    if h % d or w % d:
        raise ContractError(f"image {h}x{w} not divisible by downsample factor {d}")
    bh, bw = h // d, w // d
    if cfg.spp_pool_sizes[0] > min(bh, bw):
        raise ContractError(
            f"largest pool size {cfg.spp_pool_sizes[0]} exceeds bottleneck {bh}x{bw}")
    return bh, bw


def trunk(params, cfg: EncoderConfig, img: np.ndarray, records: list | None = None):
    """Convolutional trunk up to (and including) the bottleneck."""
    def log(item):
        if records is not None:
            records.append(item)

    x, cols = conv2d(img, params["stem.w"], params["stem.b"])
    log(("conv", "stem", img.shape, cols, 1))
    x = np.maximum(x, 0.0)
    log(("relu", x > 0))
    for kind, i in _stages(cfg):
        if kind == "down":
            y, cols = conv2d(x, params[f"down{i}.w"], params[f"down{i}.b"], stride=2)
            log(("conv", f"down{i}", x.shape, cols, 2))
            x = np.maximum(y, 0.0)
            log(("relu", x > 0))
        else:
            skip = x
            y, cols = conv2d(x, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"])
            log(("block_in",))
            log(("conv", f"block{i}.conv1", x.shape, cols, 1))
            y = np.maximum(y, 0.0)
            log(("relu", y > 0))
            z, cols = conv2d(y, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"])
            log(("conv", f"block{i}.conv2", y.shape, cols, 1))
            x = np.maximum(z + skip, 0.0)
            log(("block_out", x > 0))
    return x


def forward(params, cfg: EncoderConfig, img) -> tuple[np.ndarray, ActivationTape]:
    """Encode an image into an (H/d, W/d, output_dim) feature map."""
    img = as_image(img)
    bh, bw = check_input(cfg, img.shape)
    tape = ActivationTape(cfg, img.shape, ())
    bottleneck = trunk(params, cfg, img, tape.records)

    branches = [bottleneck]
    spp = []
    for k, s in enumerate(cfg.spp_pool_sizes):
        ay, ax = adaptive_pool_matrix(bh, s), adaptive_pool_matrix(bw, s)
        uy, ux = bilinear_matrix(s, bh), bilinear_matrix(s, bw)
        pooled = separable(bottleneck, ay, ax)
        pre = pooled @ params[f"spp{k}.w"][0, 0] + params[f"spp{k}.b"]
        act = np.maximum(pre, 0.0)
        branches.append(separable(act, uy, ux))
        spp.append((pooled, pre > 0, ay, ax, uy, ux))
    fused = np.concatenate(branches, axis=2)
    out = fused @ params["fuse.w"][0, 0] + params["fuse.b"]
    tape.records.append(("spp", bottleneck.shape, spp, fused))

    if cfg.full_resolution:
        out = bilinear_resize(out, img.shape[0], img.shape[1])
    tape.output_shape = out.shape
    return out, tape


def encode(params, cfg: EncoderConfig, img) -> np.ndarray:
    return forward(params, cfg, img)[0]


def backward(params, cfg: EncoderConfig, tape: ActivationTape, d_output) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dFeatures for one forward call."""
    if tape.cfg != cfg:
        raise ContractError("tape was recorded with a different encoder config")
    d_output = np.asarray(d_output, dtype=np.float64)
    if d_output.shape != tape.output_shape:
        raise ContractError(f"d_output shape {d_output.shape} != output {tape.output_shape}")
    grads = zeros_like_parameters(params)
    records = list(tape.records)

    _, bshape, spp, fused = records.pop()
    g = d_output
    if cfg.full_resolution:
        bh, bw = bshape[:2]
        g = separable(g, bilinear_matrix(bh, tape.input_shape[0]).T,
                      bilinear_matrix(bw, tape.input_shape[1]).T)
    c = bshape[2]
    gflat = g.reshape(-1, g.shape[2])
    grads["fuse.w"][0, 0] = fused.reshape(-1, fused.shape[2]).T @ gflat
    grads["fuse.b"] = gflat.sum(axis=0)
    g_fused = g @ params["fuse.w"][0, 0].T
    g_x = g_fused[:, :, :c].copy()
    for k, (pooled, mask, ay, ax, uy, ux) in enumerate(spp):
        lo = c + k * cfg.spp_channels
        g_up = g_fused[:, :, lo:lo + cfg.spp_channels]
        g_act = separable(g_up, uy.T, ux.T) * mask
        flat = g_act.reshape(-1, g_act.shape[2])
        grads[f"spp{k}.w"][0, 0] = pooled.reshape(-1, pooled.shape[2]).T @ flat
        grads[f"spp{k}.b"] = flat.sum(axis=0)
        g_x += separable(g_act @ params[f"spp{k}.w"][0, 0].T, ay.T, ax.T)

    skip_grads: list[np.ndarray] = []
    while records:
        rec = records.pop()
        tag = rec[0]
        if tag == "relu":
            g_x = g_x * rec[1]
        elif tag == "block_out":
            g_x = g_x * rec[1]
            skip_grads.append(g_x)
        elif tag == "block_in":
            g_x = g_x + skip_grads.pop()
        else:
            _, name, x_shape, cols, stride = rec
            g_x, dw, db = conv2d_backward(g_x, cols, x_shape, params[f"{name}.w"], stride)
            grads[f"{name}.w"] += dw
            grads[f"{name}.b"] += db
    return grads


# --- optimiser -------------------------------------------------------------

class SGD:
    """Plain SGD with optional classical momentum (v <- mu v - lr g; w <- w + v)."""

    def __init__(self, opt: OptimizerConfig):
        self.opt = opt
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads) -> dict[str, np.ndarray]:
        if params.keys() != grads.keys():
            raise ContractError("parameter and gradient names differ")
        out = {}
        for name, w in params.items():
            g = grads[name]
            if g.shape != w.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {w.shape} for {name}")
            if self.opt.momentum > 0:
                v = self.opt.momentum * self.velocity.get(name, 0.0) - self.opt.learning_rate * g
                self.velocity[name] = v
                out[name] = w + v
            else:
                out[name] = w - self.opt.learning_rate * g
        return out


def sgd_step(params, grads, opt: OptimizerConfig) -> dict[str, np.ndarray]:
    return SGD(opt).step(params, grads)


# --- checkpoints -----------------------------------------------------------

def save_parameters(params, cfg: EncoderConfig, sink: BinaryIO) -> int:
    """DVW1: magic, u32 config length, JSON config, binary32 LE tensors."""
    shapes = parameter_shapes(cfg)
    if list(params) != list(shapes):
        raise ContractError("parameters do not follow the config's registry")
    blob = cfg.to_json().encode("utf-8")
    written = sink.write(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob)
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ContractError(f"{name} has shape {params[name].shape}, expected {shape}")
        written += sink.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return written


def load_parameters(source: BinaryIO, expected: EncoderConfig | None = None):
    """Read a checkpoint; returns ``(config, params)``."""
    head = source.read(8)
    if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a DVW1 checkpoint")
    (n,) = struct.unpack("<I", head[4:])
    blob = source.read(n)
    if len(blob) != n:
        raise FormatError("truncated checkpoint config")
    try:
        cfg = EncoderConfig.from_json(blob.decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint config: {exc}") from exc
    if expected is not None and cfg != expected:
        raise FormatError(f"checkpoint config {cfg} does not match expected {expected}")
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        size = int(np.prod(shape)) * 4
        raw = source.read(size)
        if len(raw) != size:
            raise FormatError(f"truncated tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if source.read(1):
        raise FormatError("trailing bytes after last tensor")
    return cfg, params


def save_checkpoint(path, params, cfg: EncoderConfig) -> int:
    with open(path, "wb") as fh:
        return save_parameters(params, cfg, fh)


def load_checkpoint(path, expected: EncoderConfig | None = None):
    with open(path, "rb") as fh:
        return load_parameters(fh, expected)


def parameters_to_bytes(params, cfg: EncoderConfig) -> bytes:
    buf = io.BytesIO()
    save_parameters(params, cfg, buf)
    return buf.getvalue()
