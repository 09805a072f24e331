"""Y-shaped dual-decoder network.

A shared encoder feeds an organ-segmentation decoder and an anomaly
decoder.  At every resolution the anomaly decoder sees the encoder skip
features and the segmentation decoder's features (one-way fusion), and it
emits sigmoid AAmaps at the two finest resolutions.

Sequence-model layers of the original backbone are replaced by two stacked
residual 3x3x3 convolution blocks at each deep stage.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensors as T
from .tensors import Tensor

CKPT_MAGIC = b"EXCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, code="E_CKPT_FORMAT"):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ModelConfig:
    in_shape: tuple = (16, 32, 32)
    widths: tuple = (6, 16)
    n_organ_channels: int = 3
    n_diseases: int = 3
    use_gsc: bool = True
    detach_seg_features: bool = False
    slope: float = 0.01
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        self.validate()

    @property
    def stages(self):
        return len(self.widths)

    def validate(self):
        if self.stages < 2:
            raise ValueError("model.widths: at least 2 stages are required (two AAmap scales)")
        if min(self.widths) <= 0:
            raise ValueError("model.widths: widths must be positive")
        if len(self.in_shape) != 3:
            raise ValueError("model.in_shape must be (D, H, W)")
        factor = 2 ** (self.stages - 1)
        for n in self.in_shape:
            if n % factor:
                raise ValueError(f"model.in_shape: extent {n} not divisible by 2^(stages-1) = {factor}")
        if self.n_organ_channels < 1 or self.n_diseases < 1:
            raise ValueError("model: channel counts must be positive")

    def level_shape(self, level):
        return tuple(n // 2 ** level for n in self.in_shape)

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelOutputs:
    S: Tensor        # [M+1, D, H, W] organ probabilities
    A_low: Tensor    # [N, D/2, H/2, W/2]
    A_high: Tensor   # [N, D, H, W]

    def aamaps(self):
        return (self.A_low, self.A_high)


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _he_transposed(rng, shape, dtype):
    # kernel [C_in, C_out, k, k, k]; each output sees C_in inputs per tap
    fan_in = shape[0] * int(np.prod(shape[2:])) // 8
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)


def init_params(config, seed=None, dtype=np.float32):
    """Deterministic He fan-in initialization; returns an ordered name -> array dict."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    w = config.widths
    n = config.stages
    p = {}

    def conv(name, cout, cin, k=3, bias=False):
        p[name + ".w"] = _he(rng, (cout, cin, k, k, k), dtype)
        if bias:
            p[name + ".b"] = np.zeros(cout, dtype=dtype)

    def up(name, cin, cout):
        p[name + ".w"] = _he_transposed(rng, (cin, cout, 2, 2, 2), dtype)
        p[name + ".b"] = np.zeros(cout, dtype=dtype)

    conv("enc.stem", w[0], 1)
    conv("enc.l0.res", w[0], w[0])
    for l in range(1, n):
        conv(f"enc.down{l}", w[l], w[l - 1])
        if config.use_gsc:
            conv(f"enc.l{l}.gsc.a", w[l], w[l])
            conv(f"enc.l{l}.gsc.b", w[l], w[l])
            conv(f"enc.l{l}.gsc.gate", w[l], w[l], k=1, bias=True)
        conv(f"enc.l{l}.res0", w[l], w[l])
        conv(f"enc.l{l}.res1", w[l], w[l])
    top = n - 1
    conv("seg.bottom", w[top], w[top])
    for l in range(top - 1, -1, -1):
        up(f"seg.up{l}", w[l + 1], w[l])
        conv(f"seg.fuse{l}", w[l], 2 * w[l])
    conv("seg.head", config.n_organ_channels, w[0], k=1, bias=True)
    conv("anom.bottom", w[top], 2 * w[top])
    for l in range(top - 1, -1, -1):
        up(f"anom.up{l}", w[l + 1], w[l])
        conv(f"anom.fuse{l}", w[l], 3 * w[l])
    conv("anom.head1", config.n_diseases, w[1], k=1, bias=True)
    conv("anom.head0", config.n_diseases, w[0], k=1, bias=True)
    return p


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = {name: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=name)
                       for name, v in params.items()}
        for name, t in self.params.items():
            t.requires_grad = True
            t.name = name

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named_parameters(self, prefix=""):
        return [(k, v) for k, v in self.params.items() if k.startswith(prefix)]

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def clone(self):
        return Model(self.config, self.state())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def __call__(self, image):
        return forward(self, image)


def build(config, seed=None, dtype=np.float32):
    return Model(config, init_params(config, seed, dtype))


# ---------------------------------------------------------------- blocks

def conv_block(x, weight, stride=1, slope=0.01, eps=1e-5):
    """3x3x3 conv (zero pad 1) -> instance norm -> LeakyReLU."""
    return T.leaky_relu(T.instance_norm(T.conv3d(x, weight, stride=stride, padding=1), eps), slope)


def residual_block(x, weight, slope=0.01, eps=1e-5):
    return T.add(x, conv_block(x, weight, slope=slope, eps=eps))


def gsc_block(x, wa, wb, w_gate, b_gate, slope=0.01, eps=1e-5):
    """Gated spatial convolution: two parallel 3x3x3 conv-norm-act branches,
    reweighted by a sigmoid gate from a 1x1x1 conv, plus a residual path."""
    if x.shape[0] != wa.shape[1]:
        raise ValueError(f"gsc_block: input has {x.shape[0]} channels, block width is {wa.shape[1]}")
    branch = T.add(conv_block(x, wa, slope=slope, eps=eps), conv_block(x, wb, slope=slope, eps=eps))
    gate = T.sigmoid(T.conv3d(x, w_gate, b_gate))
    return T.add(x, T.mul(gate, branch))


def fuse_multiscale(A_low, A_high):
    """Trilinearly upsample the half-resolution maps and add the full-resolution maps."""
    if A_low.shape[0] != A_high.shape[0]:
        raise ValueError(f"fuse_multiscale: channel mismatch {A_low.shape} vs {A_high.shape}")
    if any(2 * lo != hi for lo, hi in zip(A_low.shape[1:], A_high.shape[1:])):
        raise ValueError(f"fuse_multiscale: {A_low.shape} is not half of {A_high.shape}")
    return T.add(T.resize_trilinear(A_low, A_high.shape[1:]), A_high)


# ---------------------------------------------------------------- forward

def encode(model, image):
    c, p = model.config, model.params
    s, e = c.slope, c.norm_eps
    x = conv_block(image, p["enc.stem.w"], slope=s, eps=e)
    x = residual_block(x, p["enc.l0.res.w"], s, e)
    feats = [x]
    for l in range(1, c.stages):
        x = conv_block(x, p[f"enc.down{l}.w"], stride=2, slope=s, eps=e)
        if c.use_gsc:
            x = gsc_block(x, p[f"enc.l{l}.gsc.a.w"], p[f"enc.l{l}.gsc.b.w"],
                          p[f"enc.l{l}.gsc.gate.w"], p[f"enc.l{l}.gsc.gate.b"], s, e)
        x = residual_block(x, p[f"enc.l{l}.res0.w"], s, e)
        x = residual_block(x, p[f"enc.l{l}.res1.w"], s, e)
        feats.append(x)
    return feats


def decode_segmentation(model, feats):
    c, p = model.config, model.params
    s, e = c.slope, c.norm_eps
    top = c.stages - 1
    h = residual_block(feats[top], p["seg.bottom.w"], s, e)
    seg_feats = {top: h}
    for l in range(top - 1, -1, -1):
        u = T.transposed_conv3d(h, p[f"seg.up{l}.w"], p[f"seg.up{l}.b"], stride=2)
        h = conv_block(T.concat([u, feats[l]], axis=0), p[f"seg.fuse{l}.w"], slope=s, eps=e)
        seg_feats[l] = h
    S = T.sigmoid(T.conv3d(h, p["seg.head.w"], p["seg.head.b"]))
    return S, seg_feats


def decode_anomaly(model, feats, seg_feats):
    c, p = model.config, model.params
    s, e = c.slope, c.norm_eps
    top = c.stages - 1
    if c.detach_seg_features:
        seg_feats = {l: T.detach(v) for l, v in seg_feats.items()}
    a = conv_block(T.concat([feats[top], seg_feats[top]], axis=0), p["anom.bottom.w"], slope=s, eps=e)
    levels = {top: a}
    for l in range(top - 1, -1, -1):
        u = T.transposed_conv3d(a, p[f"anom.up{l}.w"], p[f"anom.up{l}.b"], stride=2)
        a = conv_block(T.concat([u, feats[l], seg_feats[l]], axis=0), p[f"anom.fuse{l}.w"], slope=s, eps=e)
        levels[l] = a
    A_low = T.sigmoid(T.conv3d(levels[1], p["anom.head1.w"], p["anom.head1.b"]))
    A_high = T.sigmoid(T.conv3d(levels[0], p["anom.head0.w"], p["anom.head0.b"]))
    return A_low, A_high


def forward(model, image):
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    want = (1,) + model.config.in_shape
    if tuple(image.shape) != want:
        raise ValueError(f"image shape {tuple(image.shape)} does not match model input {want}")
    feats = encode(model, image)
    S, seg_feats = decode_segmentation(model, feats)
    A_low, A_high = decode_anomaly(model, feats, seg_feats)
    return ModelOutputs(S, A_low, A_high)


# ---------------------------------------------------------------- checkpoints

def save_params(path, config_dict, params):
    """Write an EXCK checkpoint: config JSON + named little-endian float32 blobs."""
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", "E_CKPT_NOT_FOUND")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", "E_BAD_MAGIC")
    pos = 4

    def read(fmt, what):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}", "E_TRUNCATED")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, n_cfg = read("<II", "header")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}", "E_CKPT_VERSION")
    if pos + n_cfg > len(buf):
        raise CheckpointError(f"{path}: truncated config", "E_TRUNCATED")
    config = json.loads(buf[pos:pos + n_cfg].decode("utf-8"))
    pos += n_cfg
    (count,) = read("<I", "parameter count")
    params = {}
    for _ in range(count):
        (n_name,) = read("<I", "name length")
        name = buf[pos:pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = read("<I", f"{name} rank")
        shape = read(f"<{ndim}I", f"{name} shape")
        n = int(np.prod(shape))
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated payload of {name}", "E_TRUNCATED")
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes", "E_CKPT_FORMAT")
    return config, params


def model_config_from_dict(d):
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def save_checkpoint(model, path, kind="exact", extra=None):
    cfg = {"kind": kind, "model": model.config.to_dict()}
    if extra:
        cfg.update(extra)
    save_params(path, cfg, model.params)


def load_checkpoint(path):
    cfg, params = load_params(path)
    if "model" not in cfg:
        raise CheckpointError(f"{path}: no model config in checkpoint", "E_CKPT_FORMAT")
    model = Model(model_config_from_dict(cfg["model"]), {k: v for k, v in params.items()})
    return model, cfg
