"""Registry of finite-difference gradient checks (64-bit).

Each case builder takes an rng and returns (scalar fn, point); all
constants are drawn once per case so ``fn`` is deterministic.
"""
from __future__ import annotations

import numpy as np

from . import network as net
from . import objectives as obj
from . import tensors as T
from .tensors import Tensor, grad_check

TOL = 1e-6
TOL_END_TO_END = 1e-5


def random_shape(rng, c_max=2, lo=1, hi=4):
    return (int(rng.integers(1, c_max + 1)),) + tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))


def _w(rng, shape):
    return Tensor(rng.normal(size=shape))


def primitive_cases(r, s):
    c, d, h, w = s
    n = int(np.prod(s))
    w1, w2 = _w(r, s), _w(r, s)
    wcat = _w(r, (2 * c, d, h, w))
    wflat = _w(r, (n,))
    wmm = _w(r, (d * h * w, 2))
    wnorm = _w(r, (c, d + 1, h + 1, w))
    kconv, bconv = _w(r, (2, c, 2, 2, 2)), _w(r, (2,))
    xconv = _w(r, (2, d, h, w))
    ktr, btr = _w(r, (c, 2, 2, 2, 2)), _w(r, (2,))
    xtr = _w(r, (2, d, h, w))
    tri_t = (2 * d, h + 1, max(1, w - 1))
    wtri = _w(r, (c,) + tri_t)
    near_t = (d + 2, max(1, h // 2), 2 * w)
    wnear = _w(r, (c,) + near_t)
    k = int(r.integers(1, n + 1))
    return {
        "add": (lambda t: T.tsum(T.mul(T.add(t, w1), w2)), r.normal(size=s)),
        "add_broadcast": (lambda t: T.tsum(T.mul(T.add(t, T.reshape(T.tsum(w1, axis=(1, 2, 3)), (c, 1, 1, 1))), t)), r.normal(size=s)),
        "sub": (lambda t: T.tsum(T.mul(T.sub(1.0, t), w1)), r.normal(size=s)),
        "mul": (lambda t: T.tsum(T.mul(T.mul(t, t), w1)), r.normal(size=s)),
        "div": (lambda t: T.tsum(T.div(w1, T.add(T.mul(t, t), 1.0))), r.normal(size=s)),
        "power": (lambda t: T.tsum(T.power(t, 2.5)), r.uniform(0.5, 2.0, size=s)),
        "log": (lambda t: T.tsum(T.log(t, eps=1e-5)), r.uniform(0.1, 2.0, size=s)),
        "exp": (lambda t: T.tsum(T.exp(t)), r.normal(size=s)),
        "sigmoid": (lambda t: T.tsum(T.mul(T.sigmoid(t), w1)), r.normal(size=s)),
        "leaky_relu": (lambda t: T.tsum(T.mul(T.leaky_relu(t, 0.01), w1)), r.normal(size=s)),
        "sum_axis": (lambda t: T.tsum(T.power(T.tsum(t, axis=(1, 2)), 2)), r.normal(size=s)),
        "mean": (lambda t: T.tsum(T.mul(T.mean(t, axis=(2, 3), keepdims=True), t)), r.normal(size=s)),
        "instance_norm": (lambda t: T.tsum(T.mul(T.instance_norm(t, 1e-5), wnorm)), r.normal(size=wnorm.shape)),
        "topk_mean": (lambda t: T.power(T.topk_mean(t, k), 2), r.normal(size=s)),
        "concat": (lambda t: T.tsum(T.mul(T.concat([t, T.mul(t, t)], axis=0), wcat)), r.normal(size=s)),
        "take": (lambda t: T.tsum(T.power(T.take(t, [0, c - 1, 0], axis=0), 2)), r.normal(size=s)),
        "reshape": (lambda t: T.tsum(T.mul(T.reshape(t, (-1,)), wflat)), r.normal(size=s)),
        "matmul": (lambda t: T.tsum(T.power(T.matmul(T.reshape(t, (c, -1)), wmm), 2)), r.normal(size=s)),
        "conv3d": (lambda t: T.tsum(T.power(T.conv3d(t, kconv, bconv, stride=(1, 2, 1), padding=1), 2)), r.normal(size=s)),
        "conv3d_kernel_bias": (lambda t: T.tsum(T.power(T.conv3d(xconv, T.reshape(T.take(t, list(range(48)), axis=0), (3, 2, 2, 2, 2)),
                                                                  T.take(t, [48, 49, 50], axis=0), padding=1), 2)), r.normal(size=51)),
        "transposed_conv3d": (lambda t: T.tsum(T.power(T.transposed_conv3d(t, ktr, btr, stride=2), 2)), r.normal(size=s)),
        "transposed_conv3d_kernel": (lambda t: T.tsum(T.power(T.transposed_conv3d(xtr, t, stride=(2, 1, 2)), 2)),
                                     r.normal(size=(2, 3, 2, 2, 2))),
        "resize_trilinear": (lambda t: T.tsum(T.mul(T.resize_trilinear(t, tri_t), wtri)), r.normal(size=s)),
        "resize_nearest": (lambda t: T.tsum(T.mul(T.resize_nearest(t, near_t), wnear)), r.normal(size=s)),
    }


PRIMITIVES = tuple(sorted(primitive_cases(np.random.default_rng(0), (1, 2, 2, 2))))


# ---------------------------------------------------------------- losses

LOSS_SCHEMA = obj.TaskSchema()
_HIGH = (2, 4, 4)
_LOW = (1, 2, 2)


def _split_outputs(t, n, m):
    """Flat logits -> ModelOutputs with sigmoid maps (A_low, A_high, S)."""
    n_low, n_high = n * int(np.prod(_LOW)), n * int(np.prod(_HIGH))
    A_low = T.sigmoid(T.reshape(T.take(t, list(range(n_low)), axis=0), (n,) + _LOW))
    A_high = T.sigmoid(T.reshape(T.take(t, list(range(n_low, n_low + n_high)), axis=0), (n,) + _HIGH))
    rest = list(range(n_low + n_high, t.shape[0]))
    S = T.sigmoid(T.reshape(T.take(t, rest, axis=0), (m,) + _HIGH))
    return net.ModelOutputs(S, A_low, A_high)


def loss_cases(r):
    schema, wts = LOSS_SCHEMA, obj.LossWeights()
    n, m = schema.n_diseases, schema.n_organ_channels
    shape = (2, 2, 3, 3)
    g = (r.random(shape) > 0.5).astype(float)
    g1 = (r.random((2, 3, 3)) > 0.5).astype(float)
    y = r.integers(0, 2, size=n)
    n_flat = n * (int(np.prod(_LOW)) + int(np.prod(_HIGH))) + m * int(np.prod(_HIGH))
    G = (r.random((m,) + _HIGH) > 0.5).astype(float)
    t_prog = float(r.uniform(0, 1))
    ybce = r.integers(0, 2, size=n)
    w_pos = r.uniform(0.5, 3.0, size=n)

    def anomaly(t):
        out = _split_outputs(t, n, m)
        return obj.anomaly_loss(out, out.S, y, schema, wts)

    def total(t):
        out = _split_outputs(t, n, m)
        return obj.total_loss(obj.soft_dice_loss(out.S, G, wts.eps), obj.anomaly_loss(out, out.S, y, schema, wts),
                              t_prog, wts)

    return {
        "soft_dice": (lambda t: obj.soft_dice_loss(T.sigmoid(t), g), r.normal(size=shape)),
        "mil_bce_anomaly": (anomaly, r.normal(size=n_flat)),
        "total_loss": (total, r.normal(size=n_flat)),
        "tversky": (lambda t: obj.tversky_loss(T.sigmoid(t), g1), r.normal(size=g1.shape)),
        "focal": (lambda t: obj.focal_loss(T.sigmoid(t), g1), r.normal(size=g1.shape)),
        "hybrid": (lambda t: obj.hybrid_seg_loss(T.sigmoid(t), g1, wts), r.normal(size=g1.shape)),
        "weighted_bce": (lambda t: obj.weighted_bce(T.sigmoid(t), ybce, w_pos), r.normal(size=n)),
    }


LOSSES = tuple(sorted(loss_cases(np.random.default_rng(0))))


# ---------------------------------------------------------------- end to end

TINY = net.ModelConfig(in_shape=(2, 4, 4), widths=(2, 3))
TINY_SCHEMA = obj.TaskSchema(k_low=1)


def end_to_end_case(r, n_coords=12):
    """L_total of a tiny float64 model w.r.t. one randomly chosen parameter tensor."""
    model = net.build(TINY, seed=int(r.integers(2 ** 31)), dtype=np.float64)
    names = sorted(model.params)
    name = names[int(r.integers(len(names)))]
    image = r.normal(size=(1,) + TINY.in_shape)
    G = (r.random((TINY.n_organ_channels,) + TINY.in_shape) > 0.4).astype(float)
    y = r.integers(0, 2, size=TINY.n_diseases)
    t_prog = float(r.uniform(0, 1))
    wts = obj.LossWeights()

    def fn(t):
        saved = model.params[name]
        model.params[name] = t
        try:
            out = model(image)
            seg = obj.soft_dice_loss(out.S, G, wts.eps)
            abn = obj.anomaly_loss(out, out.S, y, TINY_SCHEMA, wts)
            return obj.total_loss(seg, abn, t_prog, wts)
        finally:
            model.params[name] = saved

    point = model.params[name].data.copy()
    coords = r.choice(point.size, size=min(n_coords, point.size), replace=False)
    return name, fn, point, coords


# ---------------------------------------------------------------- driver

def check_primitive(name, instances=20):
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        fn, point = primitive_cases(rng, random_shape(rng))[name]
        worst = max(worst, grad_check(fn, Tensor(point)))
    return worst


def check_loss(name, instances=20):
    worst = 0.0
    for seed in range(instances):
        fn, point = loss_cases(np.random.default_rng(1000 + seed))[name]
        worst = max(worst, grad_check(fn, Tensor(point)))
    return worst


def check_end_to_end(instances=20):
    worst = 0.0
    for seed in range(instances):
        _, fn, point, coords = end_to_end_case(np.random.default_rng(5000 + seed))
        worst = max(worst, grad_check(fn, Tensor(point), coords=coords))
    return worst


def run_all(instances=20):
    """name -> (worst relative error, tolerance)."""
    out = {}
    for name in PRIMITIVES:
        out["prim:" + name] = (check_primitive(name, instances), TOL)
    for name in LOSSES:
        out["loss:" + name] = (check_loss(name, instances), TOL)
    out["end_to_end:total_loss"] = (check_end_to_end(instances), TOL_END_TO_END)
    return out
