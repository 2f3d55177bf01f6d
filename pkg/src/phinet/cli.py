"""Command line: phantom | preprocess | train | classify | evaluate | baseline | mcnemar.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import stats
from .arch import build_model, spec_from_dict
from .baseline import TemplateSet, build_templates, classify_by_template
from .config import ConfigError, RunConfig
from .phantom import generate_dataset
from .tensor import NonFiniteError
from .training import (
    TrainConfig,
    fit,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    write_history_csv,
)
from .volume import (
    DatasetManifest,
    NiftiFormatError,
    PreprocessConfig,
    Volume,
    load_manifest_arrays,
    pad_or_crop,
    preprocess_pipeline,
    preprocess_volume,
    read_nifti,
    write_nifti,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("phinet")


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _split_items(manifest: DatasetManifest, split: Optional[str]) -> Optional[str]:
    """Use ``split`` when the manifest carries split fields, else all items."""
    if split and any(it.split is not None for it in manifest.items):
        return split
    return None


def _load_arrays(manifest_path, preprocess: PreprocessConfig, split: Optional[str]):
    try:
        manifest = DatasetManifest.load(manifest_path)
        X, y, items = load_manifest_arrays(manifest, preprocess, _split_items(manifest, split))
    except (OSError, NiftiFormatError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{manifest_path}: {exc}") from exc
    return manifest, X, y, items


# ---------------------------------------------------------------- commands


def cmd_phantom(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed("phantom")
    out = Path(args.out or cfg.paths.get("out_dir") or "phantoms")
    job = cfg.phantom
    manifest = generate_dataset(job.spec, job.classes, job.n_train, seed, out, job.n_test)
    for name, n_tr, n_te in zip(manifest.classes, manifest.counts("train"), manifest.counts("test")):
        print(f"{name}: train {n_tr} test {n_te}")
    print(out / "manifest.json")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for path in args.inputs:
        try:
            v = preprocess_volume(read_nifti(path), cfg.preprocess)
        except (OSError, NiftiFormatError, ValueError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            status = EXIT_DATA
            continue
        cube = pad_or_crop(v.data.astype(np.float32), cfg.preprocess.extent)
        target = out_dir / Path(path).name
        write_nifti(Volume(cube, v.spacing), target)
        print(target)
    return status


def cmd_train(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed("train")
    manifest, X, y, _ = _load_arrays(args.manifest, cfg.preprocess, "train")
    model_doc = dict(cfg.model)
    model_doc["num_classes"] = len(manifest.classes)
    model_doc["input_extent"] = cfg.preprocess.extent
    spec = spec_from_dict(model_doc)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    if len(manifest.classes) == 2 and train_cfg.task == "multiclass":
        train_cfg = dataclasses.replace(train_cfg, task="binary")
    if args.no_timing:
        train_cfg = dataclasses.replace(train_cfg, record_time=False)
    model = build_model(spec, seed=seed)
    out = Path(args.out)
    state_dir = Path(args.state_dir) if args.state_dir else out.with_name(out.name + ".state")
    try:
        result = fit(model, (X, y), train_cfg, checkpoint_dir=state_dir, resume=args.resume)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    best = result.best
    best.config = dict(best.config, classes=manifest.classes, preprocess=dataclasses.asdict(cfg.preprocess))
    save_checkpoint(best, out)
    history = Path(args.history) if args.history else out.with_suffix(".csv")
    write_history_csv(result.history, history)
    print(f"best validation accuracy {best.best_val_acc:.4f} at epoch {best.epoch}")
    print(f"checkpoint {out}")
    print(f"history {history}")
    return EXIT_OK


def _restore(checkpoint_path):
    try:
        ckpt = load_checkpoint(checkpoint_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{checkpoint_path}: {exc}") from exc
    model = ckpt.build_model()
    classes = ckpt.config.get("classes") or [str(i) for i in range(model.num_classes)]
    pre = ckpt.config.get("preprocess")
    preprocess = PreprocessConfig(**pre) if pre else PreprocessConfig(extent=model.spec.input_extent)
    return model, classes, preprocess


def cmd_classify(cfg: RunConfig, args) -> int:
    model, classes, preprocess = _restore(args.checkpoint)
    status = EXIT_OK
    for path in args.inputs:
        try:
            x = preprocess_pipeline(read_nifti(path), preprocess)
        except (OSError, NiftiFormatError, ValueError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            status = EXIT_DATA
            continue
        idx, probs = model.predict(x)
        line = {"path": str(path), "class": classes[int(idx[0])], "probabilities": [float(p) for p in probs[0]]}
        print(json.dumps(line))
    return status


def _write_predictions(path, items, manifest, classes, predictions, probs=None) -> None:
    with open(path, "w") as fh:
        for i, it in enumerate(items):
            rec = {"path": str(manifest.resolve(it)), "class": classes[int(predictions[i])]}
            if probs is not None:
                rec["probabilities"] = [float(p) for p in probs[i]]
            fh.write(json.dumps(rec) + "\n")


def _emit_report(report: dict, name: str, out: Optional[str]) -> None:
    text = stats.report_json(report)
    if out:
        Path(out).write_text(text + "\n")
    print(text)
    print(stats.format_table({name: report}))


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, classes, preprocess = _restore(args.checkpoint)
    manifest, X, y, items = _load_arrays(args.manifest, preprocess, args.split)
    if list(manifest.classes) != list(classes):
        raise DataError(f"manifest classes {manifest.classes} differ from checkpoint classes {classes}")
    probs = predict_proba(model, X)
    pred = probs.argmax(axis=1)
    if args.predictions:
        _write_predictions(args.predictions, items, manifest, classes, pred, probs)
    _emit_report(stats.evaluation_report(pred, y, classes), Path(args.checkpoint).stem, args.report)
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    if args.build_from:
        src, X_tr, y_tr, _ = _load_arrays(args.build_from, cfg.preprocess, "train")
        templates = build_templates(X_tr, y_tr, src.classes, cfg.preprocess.target_spacing)
        templates.save(Path(args.templates).parent)
    try:
        templates = TemplateSet.load(args.templates)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{args.templates}: {exc}") from exc
    manifest, X, y, items = _load_arrays(args.manifest, cfg.preprocess, args.split)
    if list(manifest.classes) != list(templates.classes):
        raise DataError("template classes differ from manifest classes")
    spacing = (cfg.preprocess.target_spacing,) * 3
    pred = np.array([classify_by_template(Volume(x[0], spacing), templates)[0] for x in X])
    if args.predictions:
        _write_predictions(args.predictions, items, manifest, templates.classes, pred)
    _emit_report(stats.evaluation_report(pred, y, templates.classes), "baseline", args.report)
    return EXIT_OK


def _read_predictions(path) -> dict:
    out = {}
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    rec = json.loads(line)
                    out[str(Path(rec["path"]).resolve())] = rec["class"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return out


def cmd_mcnemar(cfg: RunConfig, args) -> int:
    a = _read_predictions(args.predictions_a)
    b = _read_predictions(args.predictions_b)
    if set(a) != set(b):
        raise DataError("prediction files cover different item sets")
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{args.manifest}: {exc}") from exc
    truth = {str(manifest.resolve(it).resolve()): manifest.classes[it.label] for it in manifest.items}
    missing = sorted(set(a) - set(truth))
    if missing:
        raise DataError(f"{len(missing)} predicted items are not in the manifest, e.g. {missing[0]}")
    keys = [k for k in truth if k in a]
    result = stats.mcnemar_test([a[k] == truth[k] for k in keys], [b[k] == truth[k] for k in keys])
    print(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phinet", description="MR contrast classification with Phi-Net")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="crop, resample and normalize volumes")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="fit a model on a manifest's training split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="best checkpoint path")
    s.add_argument("--history", help="history CSV path (default: <out>.csv)")
    s.add_argument("--state-dir", help="directory for resumable state (default: <out>.state)")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--no-timing", action="store_true", help="record 0 seconds per epoch (reproducible CSV)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="predict the contrast of .nii files (JSON lines)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("evaluate", help="accuracy/confusion report over a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--predictions", help="write per-item predictions (JSON lines)")
    s.add_argument("--report", help="write the JSON report here as well")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", help="template-correlation classification")
    s.add_argument("--templates", required=True, help="template manifest JSON")
    s.add_argument("--manifest", required=True, help="test manifest")
    s.add_argument("--build-from", help="build class-mean templates from this manifest's training split first")
    s.add_argument("--split", default="test")
    s.add_argument("--predictions")
    s.add_argument("--report")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("mcnemar", help="paired McNemar test of two prediction files")
    s.add_argument("predictions_a")
    s.add_argument("predictions_b")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_mcnemar)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        with _threads(args.threads):
            return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
