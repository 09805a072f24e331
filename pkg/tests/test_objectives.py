import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exactmil import objectives as obj
from exactmil import tensors as T
from exactmil.gradcheck import LOSSES, TOL, check_loss
from exactmil.network import ModelOutputs
from exactmil.objectives import LossWeights, TaskSchema
from exactmil.tensors import Tensor

W = LossWeights()


def ref_nearest(vol, target):
    """Pick the source cell containing each output cell centre."""
    out = vol
    for axis, n_out in enumerate(target):
        n_in = out.shape[axis]
        idx = [min(int(math.floor((j + 0.5) * n_in / n_out)), n_in - 1) for j in range(n_out)]
        out = np.take(out, idx, axis=axis)
    return out


def ref_anomaly_loss(A_low, A_high, S, y, schema, eps=1e-5):
    terms = []
    for A, k in ((A_low, schema.k_low), (A_high, schema.k_high)):
        for i in range(schema.n_diseases):
            organ = ref_nearest(S[schema.organ_channel[i]], A.shape[1:])
            pooled = np.sort((A[i] * organ).ravel())[::-1][:k].mean()
            f = schema.prevalence[i]
            if y[i]:
                terms.append(-(1 - f) / f * math.log(pooled + eps))
            else:
                terms.append(-math.log(1 - pooled + eps))
    return float(np.mean(terms))


def _outputs(rng, n=3, m=3, high=(2, 4, 4)):
    low = tuple(v // 2 for v in high)
    return ModelOutputs(Tensor(rng.random((m,) + high)), Tensor(rng.random((n,) + low)),
                        Tensor(rng.random((n,) + high)))


# ---------------------------------------------------------------- schema / weights

def test_schema_defaults_and_k_relation():
    s = TaskSchema()
    assert s.ks == (3, 24)
    assert s.n_diseases == 3 and s.organ_for(2) == 2
    assert TaskSchema(k_low=2).k_high == 16
    assert TaskSchema(k_low=1, scale_ratio=3).k_high == 27


@pytest.mark.parametrize("kw", [dict(prevalence=(0.0, 0.3, 0.3)), dict(prevalence=(1.0, 0.3, 0.3)),
                                dict(organ_channel=(0, 1, 3)), dict(k_high=20), dict(k_low=0),
                                dict(names=("a", "b"))])
def test_schema_rejects(kw):
    with pytest.raises(ValueError):
        TaskSchema(**kw)


def test_schema_unknown_disease():
    with pytest.raises(IndexError):
        TaskSchema().organ_for(3)


def test_loss_weight_defaults():
    assert (W.lambda_init, W.gamma, W.lambda_floor, W.eps) == (2.0, 10.0, 0.5, 1e-5)
    assert (W.tversky_alpha, W.tversky_beta, W.focal_alpha, W.focal_gamma) == (0.3, 0.7, 0.75, 2.0)
    assert (W.w_tversky, W.w_focal, W.w_neg) == (1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        LossWeights(gamma=0.0)


def test_with_prevalence_from_labels():
    s = TaskSchema().with_prevalence_from([[1, 0, 0], [0, 0, 1], [1, 1, 0], [0, 0, 0]])
    assert s.prevalence == (0.5, 0.25, 0.25)


# ---------------------------------------------------------------- dice

def test_dice_examples():
    G = np.ones((1, 2, 2, 2))
    assert obj.soft_dice_loss(Tensor(G), G).item() == pytest.approx(0.0, abs=1e-5)
    assert obj.soft_dice_loss(Tensor(np.zeros_like(G)), G).item() == pytest.approx(1.0, abs=1e-12)
    half = obj.soft_dice_loss(Tensor(np.full_like(G, 0.5)), G).item()
    assert half == pytest.approx(1 - 8 / (12 + 1e-5), abs=1e-12)
    assert half == pytest.approx(1 / 3, abs=1e-5)


def test_dice_multichannel_mean():
    rng = np.random.default_rng(3)
    S, G = rng.random((3, 2, 3, 3)), (rng.random((3, 2, 3, 3)) > 0.5).astype(float)
    per = [2 * (S[c] * G[c]).sum() / (S[c].sum() + G[c].sum() + 1e-5) for c in range(3)]
    assert obj.soft_dice_loss(Tensor(S), G).item() == pytest.approx(1 - np.mean(per), abs=1e-14)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        obj.soft_dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_and_tversky_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    S = rng.random((2, 2, 3, 3))
    G = (rng.random(S.shape) > 0.5).astype(float)
    assert -1e-4 <= obj.soft_dice_loss(Tensor(S), G).item() <= 1.0 + 1e-9
    assert -1e-4 <= obj.tversky_loss(Tensor(S[0]), G[0]).item() <= 1.0 + 1e-9


# ---------------------------------------------------------------- constraint

def test_constrain_examples():
    A = Tensor(np.array([0.8, 0.4]).reshape(1, 1, 2))
    got = obj.constrain_aamap(A, Tensor(np.array([1.0, 0.0]).reshape(1, 1, 2)))
    np.testing.assert_array_equal(got.data.ravel(), [0.8, 0.0])
    rng = np.random.default_rng(0)
    A = Tensor(rng.random((2, 4, 4)))
    np.testing.assert_array_equal(obj.constrain_aamap(A, Tensor(np.ones((2, 4, 4)))).data, A.data)
    np.testing.assert_array_equal(obj.constrain_aamap(A, Tensor(np.zeros((2, 4, 4)))).data, 0.0)


def test_constrain_downsamples_organ_by_nearest():
    rng = np.random.default_rng(1)
    organ = (rng.random((4, 8, 8)) > 0.5).astype(float)
    A = rng.random((2, 4, 4))
    got = obj.constrain_aamap(Tensor(A), Tensor(organ)).data
    np.testing.assert_array_equal(got, A * ref_nearest(organ, (2, 4, 4)))


# ---------------------------------------------------------------- BCE / anomaly

def test_pos_weight_examples():
    assert obj.pos_weight(0.5) == 1.0
    assert obj.pos_weight(0.071) == pytest.approx(13.085, abs=1e-3)
    assert obj.pos_weight(0.455) == pytest.approx(1.198, abs=1e-3)
    for f in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            obj.pos_weight(f)


def test_mil_bce_examples():
    assert obj.mil_bce_loss(Tensor(1.0), 1, 4.0).item() == pytest.approx(0.0, abs=1e-4)
    assert obj.mil_bce_loss(Tensor(0.0), 0, 4.0).item() == pytest.approx(0.0, abs=1e-4)
    assert obj.mil_bce_loss(Tensor(0.5), 1, 4.0).item() == pytest.approx(-4 * math.log(0.5 + 1e-5), abs=1e-12)
    assert obj.mil_bce_loss(Tensor(0.5), 1, 4.0).item() == pytest.approx(2.7725, abs=1e-4)
    assert obj.mil_bce_loss(Tensor(0.25), 0, 4.0, 1.5).item() == pytest.approx(-1.5 * math.log(0.75 + 1e-5))


def test_anomaly_loss_zero_case():
    rng = np.random.default_rng(0)
    out = _outputs(rng)
    out = ModelOutputs(out.S, Tensor(np.zeros(out.A_low.shape)), Tensor(np.zeros(out.A_high.shape)))
    assert obj.anomaly_loss(out, out.S, np.zeros(3, int), TaskSchema(), W).item() == pytest.approx(0.0, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_anomaly_loss_matches_composed_oracle(seed):
    rng = np.random.default_rng(seed)
    out = _outputs(rng)
    y = rng.integers(0, 2, 3)
    got = obj.anomaly_loss(out, out.S, y, TaskSchema(), W).item()
    want = ref_anomaly_loss(out.A_low.data, out.A_high.data, out.S.data, y, TaskSchema())
    assert got == pytest.approx(want, rel=1e-12)


def test_anomaly_loss_single_term_reduces_to_bce():
    rng = np.random.default_rng(4)
    schema = TaskSchema(names=("a",), prevalence=(0.2,), organ_channel=(0,), n_organ_channels=1)
    out = _outputs(rng, n=1, m=1)
    got = obj.anomaly_loss(out, out.S, np.array([1]), schema, W).item()
    terms = []
    for A, k in zip(out.aamaps(), schema.ks):
        pooled = T.topk_mean(obj.constrain_all(A, out.S, schema), k)
        terms.append(obj.mil_bce_loss(pooled, 1, obj.pos_weight(0.2)).item())
    assert got == pytest.approx(np.mean(terms), rel=1e-14)


def test_anomaly_loss_k_too_large():
    rng = np.random.default_rng(0)
    out = _outputs(rng, high=(2, 2, 2))  # low scale has 1 voxel < k_low = 3
    with pytest.raises(ValueError):
        obj.anomaly_loss(out, out.S, np.zeros(3, int), TaskSchema(), W)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(3)))
def test_anomaly_loss_permutation_equivariant(seed, order):
    rng = np.random.default_rng(seed)
    schema = TaskSchema(prevalence=tuple(rng.uniform(0.1, 0.9, 3)), organ_channel=tuple(rng.integers(0, 3, 3)))
    out = _outputs(rng)
    y = rng.integers(0, 2, 3)
    base = obj.anomaly_loss(out, out.S, y, schema, W).item()
    perm = ModelOutputs(out.S, Tensor(out.A_low.data[list(order)]), Tensor(out.A_high.data[list(order)]))
    got = obj.anomaly_loss(perm, perm.S, y[list(order)], schema.permuted(order), W).item()
    assert got == pytest.approx(base, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_zeroing_outside_organ_is_invisible(seed):
    rng = np.random.default_rng(seed)
    out = _outputs(rng)
    S = Tensor((rng.random(out.S.shape) > 0.4).astype(float))
    schema = TaskSchema()
    y = rng.integers(0, 2, 3)
    base = obj.anomaly_loss(out, S, y, schema, W).item()
    maps = []
    for A in out.aamaps():
        a = A.data.copy()
        for i in range(3):
            organ = ref_nearest(S.data[schema.organ_channel[i]], a.shape[1:])
            a[i][organ == 0] = 0.0
        maps.append(Tensor(a))
    got = obj.anomaly_loss(ModelOutputs(S, *maps), S, y, schema, W).item()
    assert got == base


# ---------------------------------------------------------------- schedule

def test_lambda_examples():
    assert obj.lambda_schedule(0.0, W) == 2.0
    assert abs(obj.lambda_schedule(0.05, W) - 2 * math.exp(-0.5)) <= 1e-12
    assert obj.lambda_schedule(0.05, W) == pytest.approx(1.21306, abs=1e-5)
    t_floor = math.log(4) / 10
    for t in (t_floor, t_floor + 1e-9, 0.5, 1.0):
        assert obj.lambda_schedule(t, W) == 0.5
    for t in (-0.01, 1.01):
        with pytest.raises(ValueError):
            obj.lambda_schedule(t, W)


def test_lambda_monotone_and_bounded():
    ts = np.linspace(0, 1, 1001)
    lam = np.array([obj.lambda_schedule(t, W) for t in ts])
    assert np.all(np.diff(lam) <= 0)
    assert lam.min() >= 0.5 and lam.max() <= 2.0


def test_total_loss_examples():
    assert obj.total_loss(Tensor(1.0), Tensor(0.0), 0.0, W).item() == 2.0
    assert obj.total_loss(Tensor(1.0), Tensor(0.0), 1.0, W).item() == 0.5
    for t in (0.0, 0.3, 1.0):
        assert obj.total_loss(Tensor(0.0), Tensor(0.7), t, W).item() == 0.7
    assert obj.total_loss(Tensor(0.4), Tensor(0.3), 1.0, W).item() == pytest.approx(0.5 * 0.4 + 0.3)


# ---------------------------------------------------------------- fine-tuning losses

def test_tversky_examples():
    g = (np.random.default_rng(0).random((2, 3, 3)) > 0.5).astype(float)
    assert obj.tversky_loss(Tensor(g), g).item() == pytest.approx(0.0, abs=1e-12)
    assert obj.tversky_loss(Tensor(np.zeros_like(g)), g).item() == pytest.approx(1.0, abs=1e-5)
    g8 = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float).reshape(2, 2, 2)
    got = obj.tversky_loss(Tensor(np.ones(8).reshape(2, 2, 2)), g8).item()
    assert got == pytest.approx(1 - (4 + 1e-5) / (4 + 0.3 * 4 + 1e-5), abs=1e-12)
    assert got == pytest.approx(0.23077, abs=1e-5)


def test_focal_examples():
    g = np.array([1.0, 0.0, 1.0])
    assert obj.focal_loss(Tensor(g), g).item() == pytest.approx(0.0, abs=1e-9)
    assert obj.focal_loss(Tensor(np.zeros(3)), np.zeros(3)).item() == pytest.approx(0.0, abs=1e-9)
    one = obj.focal_loss(Tensor(np.array([0.5])), np.array([1.0])).item()
    assert one == pytest.approx(-0.75 * 0.25 * math.log(0.5 + 1e-5), abs=1e-12)
    assert one == pytest.approx(0.12996, abs=1e-5)


def test_focal_matches_direct_formula():
    rng = np.random.default_rng(2)
    p, g = rng.random((3, 4)), (rng.random((3, 4)) > 0.5).astype(float)
    pt = np.where(g == 1, p, 1 - p)
    want = np.mean(-0.75 * (1 - pt) ** 2 * np.log(pt + 1e-5))
    assert obj.focal_loss(Tensor(p), g).item() == pytest.approx(want, rel=1e-13)


def test_hybrid_is_weighted_sum():
    g8 = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float).reshape(2, 2, 2)
    p = Tensor(np.ones((2, 2, 2)))
    focal = obj.focal_loss(p, g8).item()
    assert obj.hybrid_seg_loss(p, g8, W).item() == pytest.approx(0.23077 + 0.5 * focal, abs=1e-5)
    rng = np.random.default_rng(5)
    q, g = Tensor(rng.random((2, 3, 3))), (rng.random((2, 3, 3)) > 0.5).astype(float)
    want = obj.tversky_loss(q, g).item() + 0.5 * obj.focal_loss(q, g).item()
    assert obj.hybrid_seg_loss(q, g, W).item() == pytest.approx(want, rel=1e-14)
    assert obj.hybrid_seg_loss(Tensor(g), g, W).item() == pytest.approx(0.0, abs=1e-5)


def test_weighted_bce_balanced_is_plain_bce():
    rng = np.random.default_rng(1)
    p, y = rng.random(3), np.array([1, 0, 1])
    got = obj.weighted_bce(Tensor(p), y, np.ones(3)).item()
    want = -np.mean(y * np.log(p + 1e-5) + (1 - y) * np.log(1 - p + 1e-5))
    assert got == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("fn", [obj.tversky_loss, obj.focal_loss])
def test_seg_losses_shape_mismatch(fn):
    with pytest.raises(ValueError):
        fn(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("name", LOSSES)
def test_loss_grad_check_20_instances(name):
    assert check_loss(name, 20) <= TOL
