"""Command-line entry point: ``exactmil <command> [flags]``.

Exit codes: 0 ok, 2 config error, 3 I/O or format error, 4 numeric
failure, 5 gradient check failure.  Failures print one line
``<CODE>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalstats as ev
from . import gradcheck as gc
from . import network as net
from . import pipelines as pl
from .phantoms import generate_dataset, prevalence_summary
from .preprocess import (DatasetManifest, PreprocessConfig, Volume, VolumeFormatError, load_vol, preprocess_image,
                         preprocess_mask, save_vol)
from .tensors import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, message, status):
        super().__init__(message)
        self.code, self.status = code, status


# ---------------------------------------------------------------- helpers

def _load_config(args):
    return cfgmod.load(getattr(args, "config", None), getattr(args, "set", None) or ())


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(path, cfg, split=None):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise CliError("E_IO", f"manifest not found: {p}", EXIT_IO)
    m = DatasetManifest.load(p, n_diseases=cfg.schema.n_diseases)
    return m.split(split) if split else m


def _tsv(path, header, rows):
    lines = ["\t".join(header)] + ["\t".join(_cell(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def read_tsv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def map_cases(fn, cases, workers=1):
    """Apply ``fn`` per case; results come back in manifest order for any worker count."""
    if workers < 1:
        raise CliError("E_CONFIG", f"--workers must be >= 1, got {workers}", EXIT_CONFIG)
    if workers == 1:
        return [fn(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cases))


def _schema_for(cfg, ck_cfg):
    return pl.schema_from_dict(ck_cfg["schema"]) if "schema" in ck_cfg else cfg.schema


# ---------------------------------------------------------------- commands

def cmd_gen_phantoms(args):
    cfg = _load_config(args)
    seed = cfg.phantom.seed if args.seed is None else args.seed
    out = _out_dir(args.out)
    samples, _ = generate_dataset(cfg.phantom, args.n, seed=seed, out_dir=out, split=args.split)
    cfg.save(out / "config.json")
    prev = prevalence_summary(samples)
    for name, f, got in zip(cfg.schema.names, cfg.phantom.prevalence, prev):
        sigma = np.sqrt(f * (1 - f) / max(args.n, 1))
        print(f"prevalence\t{name}\t{got:.4f}\texpected {f:.2f} +/- {3 * sigma:.4f} (3 sigma)")
    print(f"wrote {len(samples)} samples to {out}")


def cmd_pretrain(args):
    cfg = _load_config(args)
    train_m = _manifest(args.data, cfg)
    val_m = _manifest(args.val, cfg) if args.val else None
    out = _out_dir(args.out)
    model = net.build(cfg.model, seed=cfg.model.seed)
    hist = pl.pretrain(model, pl.cases_from_manifest(train_m),
                       pl.cases_from_manifest(val_m) if val_m else [], cfg.schema, cfg.weights, cfg.train, out_dir=out)
    cfg.save(out / "config.json")
    if hist.train_total:
        print(f"initial total {hist.initial_total:.4f}  final total {hist.train_total[-1]:.4f}")
    print(f"checkpoint {out / 'model.exck'}")


def _predict_scores(model, cases, schema, binarize, workers=1):
    return np.array(map_cases(lambda c: pl.zero_shot_diagnose(model(c.image), schema, binarize), cases, workers))


def _write_predictions(path, cases, scores, thresholds, schema):
    calls = (scores > thresholds).astype(int)
    header = ["id"] + [f"label_{n}" for n in schema.names] + [f"score_{n}" for n in schema.names] + \
             [f"call_{n}" for n in schema.names]
    rows = [[c.id, *map(int, c.labels), *s, *b] for c, s, b in zip(cases, scores, calls)]
    _tsv(path, header, rows)


def cmd_diagnose(args):
    cfg = _load_config(args)
    model, ck = net.load_checkpoint(args.checkpoint)
    schema = _schema_for(cfg, ck)
    cases = pl.cases_from_manifest(_manifest(args.data, cfg, args.split))
    out = _out_dir(args.out)
    scores = _predict_scores(model, cases, schema, not args.soft_organs, args.workers)
    labels = np.array([c.labels for c in cases])
    theta = pl.calibrate_thresholds(scores, labels, args.calib_fraction, cfg.seed)
    theta = np.where(np.isnan(theta), 0.5, theta)
    _write_predictions(out / "predictions.tsv", cases, scores, theta, schema)
    pl.save_json(out / "thresholds.json", {n: float(t) for n, t in zip(schema.names, theta)})
    cfg.save(out / "config.json")
    print(f"diagnosed {len(cases)} cases -> {out / 'predictions.tsv'}")


def overlay_ppm(image, mask, lesion=None, scale=4):
    """RGB overlay of the axial slice with the largest mask area."""
    z = int(np.argmax(mask.reshape(mask.shape[0], -1).sum(axis=1))) if mask.any() else image.shape[0] // 2
    g = np.clip(image[z], 0, 1)
    rgb = np.stack([g, g, g], axis=-1)
    m = mask[z] > 0
    rgb[m] = 0.5 * rgb[m] + 0.5 * np.array([1.0, 0.0, 0.0])
    if lesion is not None:
        edge = (lesion[z] > 0) & ~_eroded(lesion[z] > 0)
        rgb[edge] = (0.0, 1.0, 0.0)
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    pix = np.round(rgb * 255).astype(np.uint8)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + pix.tobytes()


def _eroded(m):
    e = m.copy()
    e[1:] &= m[:-1]
    e[:-1] &= m[1:]
    e[:, 1:] &= m[:, :-1]
    e[:, :-1] &= m[:, 1:]
    return e


def cmd_localize(args):
    cfg = _load_config(args)
    model, ck = net.load_checkpoint(args.checkpoint)
    schema = _schema_for(cfg, ck)
    loc = cfg.localization
    if args.tau is not None or args.diseases is not None:
        loc = pl.LocalizationConfig(loc.diseases if args.diseases is None else tuple(args.diseases),
                                    loc.tau if args.tau is None else args.tau, loc.binarize_organs)
    cases = pl.cases_from_manifest(_manifest(args.data, cfg, args.split))
    out = _out_dir(args.out)

    def one(c):
        amap, mask = pl.zero_shot_localize(model(c.image), schema, loc)
        save_vol(Volume(amap[None], c.spacing, "map"), out / f"{c.id}_amap.evl")
        save_vol(Volume(mask[None], c.spacing, "mask"), out / f"{c.id}_mask.evl")
        lesion = c.lesion_union if c.lesions is not None else None
        (out / f"{c.id}_overlay.ppm").write_bytes(overlay_ppm(c.image[0], mask, lesion))
        if lesion is None:
            return None
        has = int(lesion.any())
        return [c.id, has, ev.dsc(mask, lesion), ev.aupr(amap, lesion) if has else float("nan"),
                int(mask.sum()), int(lesion.sum())]

    rows = [r for r in map_cases(one, cases, args.workers) if r is not None]
    if rows:
        _tsv(out / "localization.tsv", ["id", "has_lesion", "dsc", "aupr", "pred_voxels", "lesion_voxels"], rows)
    cfg.save(out / "config.json")
    print(f"localized {len(cases)} cases (tau={loc.tau}) -> {out}")


def cmd_finetune_seg(args):
    cfg = _load_config(args)
    base, ck = net.load_checkpoint(args.checkpoint)
    schema = _schema_for(cfg, ck)
    cases = pl.cases_from_manifest(_manifest(args.data, cfg, args.split), need_lesions=True)[:args.n]
    out = _out_dir(args.out)
    ft = cfg.finetune if args.epochs is None else pl.FinetuneConfig(**{**cfg.finetune.__dict__, "epochs": args.epochs})
    model, losses = pl.finetune_seg(base, schema, cases, cfg.weights, ft, out_path=out / "segft.exck")
    _tsv(out / "finetune_loss.tsv", ["epoch", "loss"], [[i, v] for i, v in enumerate(losses)])
    if args.test:
        test = pl.cases_from_manifest(_manifest(args.test, cfg), need_lesions=True)
        loc = pl.LocalizationConfig(tau=ft.tau)
        rows = []
        for c in test:
            g = c.lesion_union
            if not g.any():
                continue
            _, zs = pl.zero_shot_localize(base(c.image), schema, loc)
            fine = (model.predict(c.image) > 0.5).astype(np.float32)
            rows.append([c.id, ev.dsc(zs, g), ev.dsc(fine, g)])
        _tsv(out / "segmentation.tsv", ["id", "dsc_zero_shot", "dsc_finetuned"], rows)
        zs_m, ft_m = np.mean([r[1] for r in rows]), np.mean([r[2] for r in rows])
        print(f"held-out mean DSC zero-shot {zs_m:.4f} fine-tuned {ft_m:.4f}")
    cfg.save(out / "config.json")
    print(f"checkpoint {out / 'segft.exck'}")


def cmd_finetune_cls(args):
    cfg = _load_config(args)
    model, ck = net.load_checkpoint(args.checkpoint)
    schema = _schema_for(cfg, ck)
    cases = pl.cases_from_manifest(_manifest(args.data, cfg, args.split))
    out = _out_dir(args.out)
    clf, losses = pl.train_aamap_classifier(model, cases, schema, cfg.classifier, out_path=out / "cls.exck")
    _tsv(out / "classifier_loss.tsv", ["epoch", "loss"], [[i, v] for i, v in enumerate(losses)])
    if args.test:
        test = pl.cases_from_manifest(_manifest(args.test, cfg))
        scores = np.array([clf.classify(x) for x in pl.classifier_inputs(model, test, schema)])
        labels = np.array([c.labels for c in test])
        theta = pl.calibrate_thresholds(scores, labels, args.calib_fraction, cfg.seed)
        theta = np.where(np.isnan(theta), 0.5, theta)
        _write_predictions(out / "predictions.tsv", test, scores, theta, schema)
    cfg.save(out / "config.json")
    print(f"checkpoint {out / 'cls.exck'}")


def evaluate_tables(pred_rows=None, loc_rows=None, resamples=1000, seed=0, method="exact"):
    reports = []
    if pred_rows:
        names = [k[len("label_"):] for k in pred_rows[0] if k.startswith("label_")]
        y = np.array([[int(r[f"label_{n}"]) for n in names] for r in pred_rows])
        s = np.array([[float(r[f"score_{n}"]) for n in names] for r in pred_rows])
        b = np.array([[int(r[f"call_{n}"]) for n in names] for r in pred_rows])
        idx = np.arange(len(y))
        for mname, fn, data in (("macro_auroc", ev.auroc, s), ("macro_f1", ev.f1, b), ("macro_accuracy", ev.accuracy, b)):
            stat = lambda i, fn=fn, data=data: ev.macro(fn, data[i], y[i])[0]
            reports.append(ev.bootstrap_ci(idx, stat, resamples, seed=seed, name=mname, method=method))
    if loc_rows:
        d = np.array([float(r["dsc"]) for r in loc_rows if r["has_lesion"] == "1"])
        a = np.array([float(r["aupr"]) for r in loc_rows if r["has_lesion"] == "1"])
        for mname, vals, stat in (("mean_dsc", d, np.mean), ("mean_aupr", a, np.mean),
                                  ("hit_rate_dsc@0.05", d, lambda v: ev.hit_rate(v, 0.05)),
                                  ("hit_rate_dsc@0.10", d, lambda v: ev.hit_rate(v, 0.10))):
            reports.append(ev.bootstrap_ci(vals, stat, 2 * resamples, seed=seed, name=mname, method=method))
    return reports


def cmd_evaluate(args):
    if not args.predictions and not args.localization:
        raise CliError("E_CONFIG", "evaluate needs --predictions and/or --localization", EXIT_CONFIG)
    for p in (args.predictions, args.localization):
        if p and not Path(p).exists():
            raise CliError("E_IO", f"table not found: {p}", EXIT_IO)
    reports = evaluate_tables(read_tsv(args.predictions) if args.predictions else None,
                              read_tsv(args.localization) if args.localization else None,
                              args.resamples, args.seed, args.method)
    text = ev.reports_tsv(reports)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)


def cmd_gradcheck(args):
    results = gc.run_all(args.instances)
    failed = []
    for name, (err, tol) in results.items():
        ok = err <= tol
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\tmax_rel_err={err:.3e}\ttol={tol:.0e}")
        if not ok:
            failed.append(name)
    prim = max(e for n, (e, _) in results.items() if not n.startswith("end_to_end"))
    print(f"max rel. err (primitives and losses) {prim:.3e}")
    if failed:
        raise CliError("E_GRADCHECK", f"{len(failed)} checks above tolerance: {', '.join(failed)}", EXIT_GRADCHECK)


def cmd_preprocess(args):
    vol = load_vol(args.input)
    pcfg = PreprocessConfig(target_shape=tuple(args.shape))
    out = preprocess_image(vol, pcfg) if vol.kind == "image" else preprocess_mask(vol, pcfg)
    save_vol(out, args.output)
    print(f"{args.input} {vol.shape} -> {args.output} {out.shape}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="exactmil", description="Anatomy-constrained MIL pre-training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config (JSON); defaults apply when omitted")
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field (repeatable)")
        return sp

    def workers(sp):
        sp.add_argument("--workers", type=int, default=1,
                        help="parallel per-case evaluation threads; output is identical for any value")

    sp = common(sub.add_parser("gen-phantoms", help="write synthetic volumes and a manifest"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, required=True, help="number of samples")
    sp.add_argument("--seed", type=int, help="generator seed (default: config seed)")
    sp.add_argument("--split", default="train", help="split tag written to the manifest")
    sp.set_defaults(fn=cmd_gen_phantoms)

    sp = common(sub.add_parser("pretrain", help="image-level-label pre-training"))
    sp.add_argument("--data", required=True, help="training manifest or its directory")
    sp.add_argument("--val", help="validation manifest or its directory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = common(sub.add_parser("diagnose", help="zero-shot per-disease scores and Youden calls"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", help="only records with this split tag")
    sp.add_argument("--out", required=True)
    sp.add_argument("--calib-fraction", type=float, default=0.10)
    sp.add_argument("--soft-organs", action="store_true", help="constrain with soft organ probabilities")
    workers(sp)
    sp.set_defaults(fn=cmd_diagnose)

    sp = common(sub.add_parser("localize", help="zero-shot anomaly maps, masks and overlays"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau", type=float, help="binarization threshold (default 0.20)")
    sp.add_argument("--diseases", type=int, nargs="+", help="disease channels to aggregate (default all)")
    workers(sp)
    sp.set_defaults(fn=cmd_localize)

    sp = common(sub.add_parser("finetune-seg", help="fine-tune a lesion segmenter from the pretrained model"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="manifest with lesion masks")
    sp.add_argument("--split")
    sp.add_argument("--n", type=int, default=30, help="number of labeled cases used")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--test", help="held-out manifest; writes per-case DSC table")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_finetune_seg)

    sp = common(sub.add_parser("finetune-cls", help="train a classifier on frozen AAmaps"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--test", help="held-out manifest; writes predictions.tsv")
    sp.add_argument("--calib-fraction", type=float, default=0.10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_finetune_cls)

    sp = sub.add_parser("evaluate", help="metric tables with bootstrap CIs")
    sp.add_argument("--predictions", help="predictions.tsv from diagnose / finetune-cls")
    sp.add_argument("--localization", help="localization.tsv from localize")
    sp.add_argument("--out", help="write the report table here as well")
    sp.add_argument("--resamples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--method", default="exact", help="method label written into the table")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every op and loss")
    sp.add_argument("--instances", type=int, default=20)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("preprocess", help="run the preprocessing chain on one EVL1 volume")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--shape", type=int, nargs=3, default=[64, 128, 128])
    sp.set_defaults(fn=cmd_preprocess)
    return p


def _fail(code, message, status):
    print(f"{code}: {message}", file=sys.stderr)
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except cfgmod.ConfigError as exc:
        return _fail("E_CONFIG", str(exc), EXIT_CONFIG)
    except net.CheckpointError as exc:
        return _fail(exc.code, str(exc), EXIT_IO)
    except VolumeFormatError as exc:
        return _fail(exc.code, str(exc), EXIT_IO)
    except (pl.TrainingAborted, NonFiniteError) as exc:
        return _fail("E_NUMERIC", str(exc), EXIT_NUMERIC)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("E_IO", str(exc), EXIT_IO)
    except ValueError as exc:
        return _fail("E_INVALID", str(exc), EXIT_CONFIG)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
