"""Synthetic-phantom experiment: pre-train, then score localization,
diagnosis and both fine-tuning procedures on a held-out split."""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import evalstats as ev
from . import network as net
from . import pipelines as pl
from .config import RunConfig
from .phantoms import generate_dataset


def phantom_splits(cfg: RunConfig):
    """Train split from the phantom seed, held-out split from seed + 1."""
    seed = cfg.phantom.seed
    train = pl.cases_from_phantoms(generate_dataset(cfg.phantom, cfg.n_train, seed=seed)[0])
    test = pl.cases_from_phantoms(generate_dataset(cfg.phantom, cfg.n_test, seed=seed + 1, split="test")[0])
    return train, test


def localization_metrics(model, cases, schema, loc=pl.LocalizationConfig()):
    """Voxel AUPR and DSC of the zero-shot map on lesion-positive cases."""
    aupr, dsc, ids = [], [], []
    for c in cases:
        g = c.lesion_union
        if not g.any():
            continue
        amap, mask = pl.zero_shot_localize(model(c.image), schema, loc)
        aupr.append(ev.aupr(amap, g))
        dsc.append(ev.dsc(mask, g))
        ids.append(c.id)
    return {"ids": ids, "aupr": aupr, "dsc": dsc, "mean_aupr": float(np.mean(aupr)), "mean_dsc": float(np.mean(dsc))}


def paired_ordering(scores, labels):
    """Fraction of (positive, negative) pairs with p(positive) > p(negative), per disease."""
    out = []
    for i in range(labels.shape[1]):
        pos, neg = scores[labels[:, i] == 1, i], scores[labels[:, i] == 0, i]
        out.append(float(np.mean(pos[:, None] > neg[None, :])))
    return out


def diagnosis_metrics(scores, labels, thresholds):
    calls = (scores > thresholds).astype(int)
    auroc = [ev.auroc(scores[:, i], labels[:, i]) for i in range(labels.shape[1])]
    f1 = [ev.f1(calls[:, i], labels[:, i]) for i in range(labels.shape[1])]
    return {"auroc": auroc, "macro_auroc": float(np.mean(auroc)), "f1": f1, "macro_f1": float(np.mean(f1)),
            "accuracy": float(ev.accuracy(calls.ravel(), labels.ravel())),
            "pair_ordering": paired_ordering(scores, labels), "thresholds": [float(t) for t in thresholds]}


def zero_shot_diagnosis(model, train, test, schema, fraction=0.10, seed=0):
    """Youden thresholds from a sampled fraction of the training split, applied to held-out scores."""
    sub = pl.calibration_subset(len(train), fraction, seed)
    calib = np.array([pl.zero_shot_diagnose(model(train[i].image), schema) for i in sub])
    theta = pl.calibrate_thresholds(calib, np.array([train[i].labels for i in sub]), subset=np.arange(len(sub)))
    scores = np.array([pl.zero_shot_diagnose(model(c.image), schema) for c in test])
    labels = np.array([c.labels for c in test])
    return diagnosis_metrics(scores, labels, np.where(np.isnan(theta), 0.5, theta))


def segmentation_gain(base, seg, test, schema, tau):
    """Per-case DSC of zero-shot binarization and of the fine-tuned head on lesion-positive cases."""
    loc = pl.LocalizationConfig(tau=tau)
    zs, ft = [], []
    for c in test:
        g = c.lesion_union
        if not g.any():
            continue
        zs.append(ev.dsc(pl.zero_shot_localize(base(c.image), schema, loc)[1], g))
        ft.append(ev.dsc((seg.predict(c.image) > 0.5).astype(np.float32), g))
    return {"dsc_zero_shot": zs, "dsc_finetuned": ft, "mean_zero_shot": float(np.mean(zs)),
            "mean_finetuned": float(np.mean(ft))}


def classifier_auroc(clf, model, test, schema):
    scores = np.array([clf.classify(x) for x in pl.classifier_inputs(model, test, schema)])
    labels = np.array([c.labels for c in test])
    auroc = [ev.auroc(scores[:, i], labels[:, i]) for i in range(labels.shape[1])]
    return {"auroc": auroc, "macro_auroc": float(np.mean(auroc))}


def run(cfg: RunConfig, out_dir=None, n_finetune=30, log=print):
    """Full experiment; returns a JSON-ready dict and writes results.json when ``out_dir`` is given."""
    res = {"config": cfg.to_dict()}
    tic = time.perf_counter()
    train, test = phantom_splits(cfg)
    res["prevalence_train"] = np.mean([c.labels for c in train], axis=0).tolist()
    res["lesion_fraction_max"] = float(max(c.lesion_union.mean() for c in train + test if c.lesions.any()))

    model = net.build(cfg.model, seed=cfg.model.seed)
    res["untrained"] = {"localization": localization_metrics(model, test, cfg.schema)}
    log(f"untrained mean AUPR {res['untrained']['localization']['mean_aupr']:.4f}")

    t0 = time.perf_counter()
    hist = pl.pretrain(model, train, test[:10], cfg.schema, cfg.weights, cfg.train, out_dir=out_dir,
                       progress=lambda e, h: log(f"epoch {e} total {h.train_total[-1]:.4f}"))
    res["pretrain_seconds"] = time.perf_counter() - t0
    res["loss"] = {"initial": hist.initial_total, "final": hist.train_total[-1], "curve": hist.train_total}
    res["localization"] = localization_metrics(model, test, cfg.schema, cfg.localization)
    res["emergence_seconds"] = time.perf_counter() - tic
    log(f"trained mean AUPR {res['localization']['mean_aupr']:.4f}")
    res["diagnosis"] = zero_shot_diagnosis(model, train, test, cfg.schema, seed=cfg.seed)
    log(f"zero-shot macro AUROC {res['diagnosis']['macro_auroc']:.4f} F1 {res['diagnosis']['macro_f1']:.4f}")

    labeled = [c for c in train if c.lesions is not None][:n_finetune]
    seg, ft_losses = pl.finetune_seg(model, cfg.schema, labeled, cfg.weights, cfg.finetune)
    res["finetune_seg"] = {**segmentation_gain(model, seg, test, cfg.schema, cfg.finetune.tau), "loss": ft_losses}
    log(f"DSC zero-shot {res['finetune_seg']['mean_zero_shot']:.4f} "
        f"fine-tuned {res['finetune_seg']['mean_finetuned']:.4f}")

    clf, cls_losses = pl.train_aamap_classifier(model, train, cfg.schema, cfg.classifier)
    res["classifier"] = {**classifier_auroc(clf, model, test, cfg.schema), "loss": cls_losses}
    log(f"classifier macro AUROC {res['classifier']['macro_auroc']:.4f}")
    res["total_seconds"] = time.perf_counter() - tic
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "results.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res, model
