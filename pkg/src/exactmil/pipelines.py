"""Pre-training, zero-shot inference and the two fine-tuning procedures."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network as net
from . import objectives as obj
from . import tensors as T
from .preprocess import load_vol
from .tensors import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(FloatingPointError):
    """Non-finite value during training; carries step diagnostics."""

    def __init__(self, message, epoch, step, sample_id):
        super().__init__(f"{message} (epoch {epoch}, step {step}, sample {sample_id})")
        self.epoch, self.step, self.sample_id = epoch, step, sample_id


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------- data

@dataclass
class Case:
    id: str
    image: np.ndarray            # [1, D, H, W]
    organs: np.ndarray           # [M+1, D, H, W]
    labels: np.ndarray           # [N]
    lesions: np.ndarray | None = None   # [N, D, H, W]
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def lesion_union(self):
        if self.lesions is None:
            raise ValueError(f"case {self.id}: no lesion masks")
        return self.lesions.max(axis=0)


def cases_from_phantoms(samples):
    return [Case(s.id, s.image.data, s.organs.data, np.asarray(s.labels), s.lesions.data, s.image.spacing)
            for s in samples]


def cases_from_manifest(manifest, need_lesions=False):
    out = []
    for r in manifest:
        if r.organs is None:
            raise ValueError(f"manifest record {r.id}: no organ masks")
        if need_lesions and r.lesions is None:
            raise ValueError(f"manifest record {r.id}: no lesion masks")
        lesions = load_vol(manifest.resolve(r.lesions)).data if r.lesions else None
        image = load_vol(manifest.resolve(r.volume))
        out.append(Case(r.id, image.data, load_vol(manifest.resolve(r.organs)).data, np.asarray(r.labels),
                        lesions, image.spacing))
    return out


# ---------------------------------------------------------------- optimisation

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    lr_init: float = 1e-4
    eta_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0     # epochs; 0 = final only

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.lr_init < 0 or self.eta_min < 0:
            raise ValueError("train.lr_init and train.eta_min must be >= 0")
        if self.lr_init > 0 and self.eta_min >= self.lr_init:
            raise ValueError(f"train.eta_min ({self.eta_min}) must be below lr_init ({self.lr_init})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("train.beta1/beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("train.checkpoint_every must be >= 0")


def cosine_lr(step, total_steps, lr_init, eta_min):
    """Single cosine from lr_init down to eta_min; lr_init = 0 disables updates."""
    if lr_init == 0 or total_steps <= 1:
        return lr_init
    frac = min(step / (total_steps - 1), 1.0)
    return eta_min + 0.5 * (lr_init - eta_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.99, weight_decay=1e-2, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.wd, self.eps = beta1, beta2, weight_decay, eps
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.t = 0

    def step(self, lr, scale=1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0:
                continue
            # decoupled decay on conv / linear weights only
            decay = self.wd if p.data.ndim > 1 else 0.0
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * decay) - lr * upd).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _epoch_order(n, seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, int(epoch)])).permutation(n)


def _check_finite(value, what, epoch, step, sid):
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite {what} = {value}", epoch, step, sid)


# ---------------------------------------------------------------- pre-training

@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_total: list = field(default_factory=list)
    train_seg: list = field(default_factory=list)
    train_abn: list = field(default_factory=list)
    val_total: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_total: float = float("nan")

    def to_tsv(self):
        # wall-clock time is logged, not written, so the file is reproducible
        cols = ["epoch", "lambda", "lr", "train_total", "train_seg", "train_abn", "val_total"]
        rows = ["\t".join(cols)]
        for i in range(len(self.epoch)):
            vals = [self.epoch[i], self.lam[i], self.lr[i], self.train_total[i], self.train_seg[i],
                    self.train_abn[i], self.val_total[i]]
            rows.append("\t".join(str(v) if isinstance(v, int) else f"{v:.8g}" for v in vals))
        return "\n".join(rows) + "\n"


def pretrain_losses(model, case, schema, weights, t):
    out = model(case.image)
    seg = obj.soft_dice_loss(out.S, case.organs, weights.eps)
    abn = obj.anomaly_loss(out, out.S, case.labels, schema, weights)
    return obj.total_loss(seg, abn, t, weights), seg, abn


def evaluate_pretrain_loss(model, cases, schema, weights, t):
    if not cases:
        return float("nan")
    return float(np.mean([pretrain_losses(model, c, schema, weights, t)[0].item() for c in cases]))


def pretrain(model, train_cases, val_cases, schema, weights=obj.LossWeights(), config=TrainConfig(),
             out_dir=None, progress=None):
    """Image-level-label pre-training.  Mutates ``model`` in place, returns the history.

    Each optimizer step averages gradients over ``batch_size`` samples; the
    loss weight uses t = epoch / epochs.
    """
    opt = AdamW(model.params, config.beta1, config.beta2, config.weight_decay, config.adam_eps)
    n = len(train_cases)
    steps_per_epoch = math.ceil(n / config.batch_size) if n else 0
    total_steps = steps_per_epoch * config.epochs
    hist = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if config.epochs and n:
        init = []
        for case in train_cases:
            try:
                init.append(pretrain_losses(model, case, schema, weights, 0.0)[0].item())
            except T.NonFiniteError as exc:
                raise TrainingAborted(str(exc), 0, 0, case.id) from exc
        hist.initial_total = float(np.mean(init))
    step = 0
    for epoch in range(config.epochs):
        t = epoch / config.epochs
        tic = time.perf_counter()
        sums = np.zeros(3)
        order = _epoch_order(n, config.seed, epoch)
        lr = config.lr_init
        for b0 in range(0, n, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            opt.zero_grad()
            for idx in batch:
                case = train_cases[idx]
                try:
                    with Tape() as tape:
                        total, seg, abn = pretrain_losses(model, case, schema, weights, t)
                    tape.backward(total)
                except T.NonFiniteError as exc:
                    raise TrainingAborted(str(exc), epoch, step, case.id) from exc
                vals = (total.item(), seg.item(), abn.item())
                _check_finite(vals[0], "total loss", epoch, step, case.id)
                sums += vals
            lr = cosine_lr(step, total_steps, config.lr_init, config.eta_min)
            opt.step(lr, scale=1.0 / len(batch))
            for k, p in model.params.items():
                if not np.isfinite(p.data).all():
                    raise TrainingAborted(f"non-finite parameter {k}", epoch, step, "-")
            step += 1
        hist.epoch.append(epoch)
        hist.lam.append(obj.lambda_schedule(t, weights))
        hist.lr.append(lr)
        hist.train_total.append(sums[0] / n)
        hist.train_seg.append(sums[1] / n)
        hist.train_abn.append(sums[2] / n)
        hist.val_total.append(evaluate_pretrain_loss(model, val_cases, schema, weights, t))
        hist.seconds.append(time.perf_counter() - tic)
        log.info("epoch %d total %.4f seg %.4f abn %.4f val %.4f (%.1fs)", epoch, hist.train_total[-1],
                 hist.train_seg[-1], hist.train_abn[-1], hist.val_total[-1], hist.seconds[-1])
        if progress is not None:
            progress(epoch, hist)
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            net.save_checkpoint(model, out_dir / f"epoch_{epoch + 1:03d}.exck")
    opt.zero_grad()
    if out_dir is not None:
        net.save_checkpoint(model, out_dir / "model.exck")
        (out_dir / "loss_curve.tsv").write_text(hist.to_tsv())
    return hist


# ---------------------------------------------------------------- zero-shot diagnosis

@dataclass
class DiagnosisResult:
    scores: np.ndarray
    thresholds: np.ndarray
    calls: np.ndarray = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        calls = (self.scores > self.thresholds).astype(np.int64)
        if self.calls is not None and not np.array_equal(np.asarray(self.calls), calls):
            raise ValueError("DiagnosisResult: calls must equal scores > thresholds")
        self.calls = calls


def _organ_masks(S, binarize_organs):
    S = S.data if isinstance(S, Tensor) else np.asarray(S)
    return (S >= 0.5).astype(S.dtype) if binarize_organs else S


def region_topk(values, region, k):
    """Mean of the k largest values inside ``region`` (region > 0).

    k shrinks to the region size; an empty region pools to 0.
    """
    inside = np.asarray(values)[np.asarray(region) > 0]
    if inside.size == 0:
        return 0.0
    k = min(k, inside.size)
    return float(np.sort(inside, kind="stable")[::-1][:k].mean())


def zero_shot_diagnose(outputs, schema, binarize_organs=True):
    """p_i = mean over scales of the region top-k of the constrained AAmap."""
    organs = _organ_masks(outputs.S, binarize_organs)
    scores = np.zeros(schema.n_diseases)
    for i in range(schema.n_diseases):
        pooled = []
        for A, k in zip(outputs.aamaps(), schema.ks):
            a = (A.data if isinstance(A, Tensor) else A)[i]
            organ = organs[schema.organ_for(i)]
            if organ.shape != a.shape:
                organ = T.nearest_array(organ[None], a.shape)[0]
            pooled.append(region_topk(a * organ, organ, k))
        scores[i] = float(np.mean(pooled))
    return scores


def youden_threshold(scores, labels):
    """Cut-point maximizing sensitivity + specificity - 1.

    Candidates are midpoints between adjacent distinct scores plus one
    below the minimum and one above the maximum; ties keep the lowest.
    Returns (threshold, J).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise CalibrationError("calibration labels contain a single class")
    u = np.unique(s)
    cuts = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    best, best_j = None, -np.inf
    for c in cuts:
        pred = s > c
        j = pred[y].mean() + (~pred[~y]).mean() - 1.0
        if j > best_j:
            best, best_j = c, j
    return float(best), float(best_j)


def calibration_subset(n, fraction=0.10, seed=0):
    m = max(2, int(round(n * fraction)))
    m = min(m, n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4049]))
    return np.sort(rng.choice(n, size=m, replace=False))


def calibrate_thresholds(scores, labels, fraction=0.10, seed=0, subset=None):
    """Per-disease Youden thresholds on a sampled calibration subset.

    ``scores``/``labels`` are [n_samples, N].  A disease whose subset has a
    single class gets NaN and a warning.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    idx = calibration_subset(len(scores), fraction, seed) if subset is None else np.asarray(subset)
    out = np.full(scores.shape[1], np.nan)
    for i in range(scores.shape[1]):
        try:
            out[i] = youden_threshold(scores[idx, i], labels[idx, i])[0]
        except CalibrationError as exc:
            warnings.warn(f"disease {i}: {exc}; skipped", stacklevel=2)
    return out


# ---------------------------------------------------------------- zero-shot localization

@dataclass(frozen=True)
class LocalizationConfig:
    diseases: tuple | None = None   # None -> all
    tau: float = 0.20
    binarize_organs: bool = True

    def __post_init__(self):
        if self.diseases is not None:
            object.__setattr__(self, "diseases", tuple(int(d) for d in self.diseases))
            if not self.diseases:
                raise ValueError("localization.diseases must be nonempty")
        if not self.tau > 0:
            raise ValueError("localization.tau must be > 0")

    @classmethod
    def focal(cls, diseases=None):
        return cls(diseases=diseases, tau=0.15)

    def selected(self, schema):
        sel = tuple(range(schema.n_diseases)) if self.diseases is None else self.diseases
        for d in sel:
            if not 0 <= d < schema.n_diseases:
                raise ValueError(f"localization.diseases: {d} outside schema")
        return sel


def fused_constrained(outputs, schema, binarize_organs=True):
    """[N, D, H, W] fused multi-scale maps, each multiplied by its organ channel."""
    A_low = outputs.A_low if isinstance(outputs.A_low, Tensor) else Tensor(outputs.A_low)
    A_high = outputs.A_high if isinstance(outputs.A_high, Tensor) else Tensor(outputs.A_high)
    fused = net.fuse_multiscale(A_low, A_high).data
    organs = _organ_masks(outputs.S, binarize_organs)
    sel = [schema.organ_for(i) for i in range(schema.n_diseases)]
    return fused * organs[sel]


def aggregate_anomaly(constrained, diseases):
    return np.sum(np.asarray(constrained)[list(diseases)], axis=0)


def zero_shot_localize(outputs, schema, config=LocalizationConfig()):
    """Returns (continuous map, binary mask)."""
    constrained = fused_constrained(outputs, schema, config.binarize_organs)
    amap = aggregate_anomaly(constrained, config.selected(schema))
    return amap, (amap > config.tau).astype(np.float32)


def infer(model, case):
    return model(case.image)


# ---------------------------------------------------------------- EXACT-Seg fine-tuning

SEG_HEAD = "segft.head"


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr_init: float = 1e-3
    eta_min: float = 1e-5
    weight_decay: float = 1e-2
    seed: int = 0
    head_scale: float = 10.0    # initial head: sigmoid(scale * (sum_i Y_i - tau))
    tau: float = 0.20

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("finetune.epochs must be >= 0")
        if self.lr_init < 0 or self.eta_min < 0 or (self.lr_init > 0 and self.eta_min >= self.lr_init):
            raise ValueError("finetune: need lr_init > eta_min >= 0 (or lr_init = 0)")


class SegModel:
    """Pretrained EXACT model + 1x1x1 conv over the constrained fused AAmaps."""

    def __init__(self, base, schema, head_w, head_b):
        self.base, self.schema = base, schema
        self.head = {SEG_HEAD + ".w": head_w if isinstance(head_w, Tensor) else Tensor(head_w, True),
                     SEG_HEAD + ".b": head_b if isinstance(head_b, Tensor) else Tensor(head_b, True)}
        for t in self.head.values():
            t.requires_grad = True

    @classmethod
    def from_pretrained(cls, base, schema, scale=10.0, tau=0.20):
        n, dt = schema.n_diseases, base.dtype
        w = np.full((1, n, 1, 1, 1), scale, dtype=dt)
        b = np.array([-scale * tau], dtype=dt)
        return cls(base, schema, w, b)

    @property
    def params(self):
        return {**self.base.params, **self.head}

    def trainable(self):
        return {k: v for k, v in self.params.items() if not k.startswith("seg.")}

    def __call__(self, image):
        out = self.base(image)
        organs = T.detach(obj.binarize(out.S))
        fused = net.fuse_multiscale(out.A_low, out.A_high)
        organ_sel = T.take(organs, [self.schema.organ_for(i) for i in range(self.schema.n_diseases)], axis=0)
        Y = T.mul(fused, organ_sel)
        logit = T.conv3d(Y, self.head[SEG_HEAD + ".w"], self.head[SEG_HEAD + ".b"])
        return T.sigmoid(T.reshape(logit, logit.shape[1:]))

    def predict(self, image):
        return self(image).data

    def save(self, path, extra=None):
        cfg = {"kind": "exact-seg", "model": self.base.config.to_dict(), "schema": _schema_dict(self.schema)}
        cfg.update(extra or {})
        net.save_params(path, cfg, self.params)

    @classmethod
    def load(cls, path):
        cfg, params = net.load_params(path)
        if cfg.get("kind") != "exact-seg":
            raise net.CheckpointError(f"{path}: expected an exact-seg checkpoint, got {cfg.get('kind')}")
        head = {k: params.pop(k) for k in (SEG_HEAD + ".w", SEG_HEAD + ".b")}
        base = net.Model(net.model_config_from_dict(cfg["model"]), params)
        return cls(base, schema_from_dict(cfg["schema"]), head[SEG_HEAD + ".w"], head[SEG_HEAD + ".b"])


def _schema_dict(schema):
    return asdict(schema)


def schema_from_dict(d):
    return obj.TaskSchema(**d)


def finetune_seg(base, schema, cases, weights=obj.LossWeights(), config=FinetuneConfig(), out_path=None):
    """Fine-tune encoder + anomaly decoder + head on lesion masks; the
    segmentation decoder stays frozen.  Returns (SegModel, per-epoch losses)."""
    for c in cases:
        if c.lesions is None:
            raise ValueError(f"finetune_seg: case {c.id} has no lesion masks")
    model = SegModel.from_pretrained(base.clone(), schema, config.head_scale, config.tau)
    trainable = model.trainable()
    for k, p in model.params.items():
        p.requires_grad = k in trainable
    opt = AdamW(trainable, weight_decay=config.weight_decay)
    total_steps = config.epochs * len(cases)
    losses, step = [], 0
    for epoch in range(config.epochs):
        order = _epoch_order(len(cases), config.seed, epoch)
        acc = 0.0
        for idx in order:
            c = cases[idx]
            opt.zero_grad()
            with Tape() as tape:
                p = model(c.image)
                loss = obj.hybrid_seg_loss(p, c.lesion_union.astype(p.dtype), weights)
            tape.backward(loss)
            _check_finite(loss.item(), "fine-tune loss", epoch, step, c.id)
            acc += loss.item()
            opt.step(cosine_lr(step, total_steps, config.lr_init, config.eta_min))
            step += 1
        losses.append(acc / max(len(cases), 1))
        log.info("finetune-seg epoch %d loss %.4f", epoch, losses[-1])
    opt.zero_grad()
    for p in model.params.values():
        p.requires_grad = True
    if out_path is not None:
        model.save(out_path)
    return model, losses


# ---------------------------------------------------------------- AAmap classifier

@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple = (8, 16)
    dropout: float = 0.3
    epochs: int = 30
    batch_size: int = 4
    lr_init: float = 2e-3
    eta_min: float = 1e-5
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not 0 <= self.dropout < 1:
            raise ValueError("classifier.dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or not self.widths:
            raise ValueError("classifier: epochs >= 0, batch_size >= 1 and nonempty widths required")


class AAmapClassifier:
    """Strided conv stages -> global average + max pooling -> dropout -> linear."""

    def __init__(self, n_diseases, config=ClassifierConfig(), params=None, dtype=np.float32):
        self.n, self.config = n_diseases, config
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31337]))
            params, cin = {}, n_diseases
            for s, w in enumerate(config.widths):
                params[f"cls.conv{s}.w"] = (rng.standard_normal((w, cin, 3, 3, 3)) * math.sqrt(2.0 / (cin * 27))).astype(dtype)
                cin = w
            params["cls.fc.w"] = (rng.standard_normal((2 * cin, n_diseases)) * math.sqrt(1.0 / (2 * cin))).astype(dtype)
            params["cls.fc.b"] = np.zeros(n_diseases, dtype=dtype)
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v, True, name=k) for k, v in params.items()}

    def logits(self, x, training=False, rng=None):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.params["cls.fc.b"].dtype))
        for s in range(len(self.config.widths)):
            x = T.leaky_relu(T.instance_norm(T.conv3d(x, self.params[f"cls.conv{s}.w"], stride=2, padding=1)))
        c = x.shape[0]
        flat = T.reshape(x, (c, -1))
        avg = T.mean(flat, axis=1)
        mx = _rowmax(flat)
        feat = T.reshape(T.concat([avg, mx], axis=0), (1, 2 * c))
        feat = T.dropout(feat, self.config.dropout, rng, training)
        return T.add(T.reshape(T.matmul(feat, self.params["cls.fc.w"]), (self.n,)), self.params["cls.fc.b"])

    def __call__(self, x, training=False, rng=None):
        return T.sigmoid(self.logits(x, training, rng))

    def classify(self, aamap):
        return self(aamap).data.astype(float)

    def save(self, path, extra=None):
        cfg = {"kind": "aamap-cls", "n_diseases": self.n, "classifier": asdict(self.config)}
        cfg.update(extra or {})
        net.save_params(path, cfg, self.params)

    @classmethod
    def load(cls, path):
        cfg, params = net.load_params(path)
        if cfg.get("kind") != "aamap-cls":
            raise net.CheckpointError(f"{path}: expected an aamap-cls checkpoint, got {cfg.get('kind')}")
        c = dict(cfg["classifier"])
        c["widths"] = tuple(c["widths"])
        return cls(cfg["n_diseases"], ClassifierConfig(**c), params)


def _rowmax(flat):
    """Per-row max (top-1 pooling)."""
    rows = [T.reshape(T.topk_mean(T.take(flat, r, axis=0), 1), (1,)) for r in range(flat.shape[0])]
    return T.concat(rows, axis=0)


def classifier_inputs(model, cases, schema, binarize_organs=True):
    """Constrained fused AAmaps of a frozen EXACT model, one [N, D, H, W] per case."""
    return [fused_constrained(model(c.image), schema, binarize_organs).astype(model.dtype) for c in cases]


def train_aamap_classifier(model, cases, schema, config=ClassifierConfig(), inputs=None, out_path=None):
    """Fit the classifier on frozen-model AAmaps with frequency-weighted BCE.

    ``model`` is never updated; its maps are computed once outside any tape.
    """
    if inputs is None:
        inputs = classifier_inputs(model, cases, schema)
    labels = np.array([c.labels for c in cases])
    w_pos = np.array([obj.pos_weight(f) for f in schema.prevalence])
    clf = AAmapClassifier(schema.n_diseases, config, dtype=model.dtype)
    opt = AdamW(clf.params, weight_decay=config.weight_decay)
    n = len(inputs)
    total_steps = config.epochs * math.ceil(n / config.batch_size)
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    losses, step = [], 0
    for epoch in range(config.epochs):
        order = _epoch_order(n, config.seed, epoch)
        acc = 0.0
        for b0 in range(0, n, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            opt.zero_grad()
            for idx in batch:
                with Tape() as tape:
                    loss = obj.weighted_bce(clf(inputs[idx], True, drop_rng), labels[idx], w_pos)
                tape.backward(loss)
                acc += loss.item()
            opt.step(cosine_lr(step, total_steps, config.lr_init, config.eta_min), 1.0 / len(batch))
            step += 1
        losses.append(acc / n)
    opt.zero_grad()
    if out_path is not None:
        clf.save(out_path)
    return clf, losses


def save_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
