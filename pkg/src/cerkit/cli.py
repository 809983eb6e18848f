"""``cerkit`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from cerkit import ensemble, fixtures, pipeline
from cerkit.dataset import (
    ManifestRecord,
    builtin_schemas,
    load_manifest,
    load_schema,
    split_counts,
    split_manifest,
    write_manifest,
)
from cerkit.encoders import CACHE_MAGIC, write_feature_cache
from cerkit.errors import DataError, NumericError
from cerkit.fusion import FusionModel
from cerkit.metrics import EvalReport, render_report, write_report
from cerkit.taxonomy import COMPOUND_NAMES, NUM_COMPOUND
from cerkit.trainer import (
    CKPT_MAGIC,
    ConfigError,
    TrainState,
    fit,
    load_checkpoint,
    load_config,
    predict_probs,
)

log = logging.getLogger("cerkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}
PRED_HEADER = ["item_id", "predicted_class"] + [f"p{i}" for i in range(NUM_COMPOUND)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CER_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CER_SEED must be an integer, got {env!r}") from None


def _schemas(paths: Sequence[str]) -> dict:
    schemas = builtin_schemas()
    for p in paths or ():
        sm = load_schema(p)
        schemas[sm.source] = sm
    return schemas


# --------------------------------------------------------------------------
# subcommands


def cmd_make_fixture(args) -> int:
    seed = _seed(args)
    manifest = fixtures.make_image_fixture(
        args.out,
        n_train_per_class=args.n_train,
        n_val_per_class=args.n_val,
        n_basic_per_class=args.n_basic,
        resolution=args.resolution,
        noise=args.noise,
        seed=0 if seed is None else seed,
    )
    print(manifest)
    return EXIT_OK


def cmd_prepare_data(args) -> int:
    schemas = _schemas(args.schema)
    merged: list[ManifestRecord] = []
    seen: dict[str, ManifestRecord] = {}
    for path in args.manifest:
        for r in load_manifest(path, schemas):
            prev = seen.get(r.image_path)
            if prev is not None:
                if (prev.source, prev.label_kind, prev.label_id) != (r.source, r.label_kind, r.label_id):
                    raise DataError(f"conflicting duplicate image_path {r.image_path!r}")
                log.warning("dropping duplicate record for %s", r.image_path)
                continue
            seen[r.image_path] = r
            merged.append(r)
    seed = _seed(args)
    merged = split_manifest(merged, args.val_fraction, 0 if seed is None else seed)
    write_manifest(merged, args.out)
    counts = split_counts(merged)
    for split in ("train", "val", "test", "unlabeled"):
        if split in counts:
            print(f"{split}\t{counts[split]}")
    print(f"total\t{len(merged)}")
    return EXIT_OK


def _train_config(args):
    overrides = {"epochs": args.epochs, "seed": _seed(args), "batch_size": args.batch_size, "peak_lr": args.lr}
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    torch.set_num_threads(1)
    out = Path(args.out)
    resume_path = out / "last.ckpt"
    state = optimizer = model = None
    if args.resume and resume_path.exists():
        ck = load_checkpoint(resume_path)
        cfg = replace(ck.config, **{k: v for k, v in vars(_train_config(args)).items() if k == "epochs"})
        model, state, optimizer = ck.model, ck.state, ck.make_optimizer()
        log.info("resuming from epoch %d (step %d)", state.epoch, state.step)
    else:
        cfg = _train_config(args)
    records = load_manifest(args.manifest, _schemas(args.schema))
    encoders = pipeline.build_encoders(cfg.encoders)
    aug = pipeline.augmentation_for(encoders)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise DataError("manifest has no train records")
    train = pipeline.feature_data(train_recs, encoders, aug, cfg.seed, with_views=cfg.lambda_cl > 0, cache_dir=args.cache_dir)
    val = pipeline.feature_data(val_recs, encoders, aug, cfg.seed, with_views=False, cache_dir=args.cache_dir) if val_recs else None
    if model is None:
        model = FusionModel(pipeline.fusion_config_for(encoders, cfg), seed=cfg.seed)
    state, history = fit(model, train, cfg, val, out, state=state, optimizer=optimizer)
    if not history:
        print("no epochs to run")
        return EXIT_OK
    if not args.no_figures:
        from cerkit.plotting import plot_training_curves

        rows = [
            {"epoch": h.epoch, "L_basic": h.l_basic, "L_ce": h.l_ce, "L_CL": h.l_cl, "total": h.total,
             "val_macro_f1": h.val_macro_f1}
            for h in history
        ]
        plot_training_curves(rows, out / "training_curves.png")
    print((out / "train_log.csv").read_text(encoding="utf-8"), end="")
    print(f"best epoch {state.best_epoch} val macro-F1 {state.best_val_f1:.4f}")
    return EXIT_OK


def _is_checkpoint(path: str) -> bool:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CKPT_MAGIC:
        return True
    if magic == CACHE_MAGIC:
        return False
    raise DataError(f"{path} is neither a checkpoint nor a CERF probability file")


def checkpoint_probs(path: str, paths: Sequence[str], lenient: bool = False) -> tuple[np.ndarray, list[bool]]:
    """Combined compound probabilities of a checkpoint over image paths."""
    ck = load_checkpoint(path)
    encoders = pipeline.build_encoders(ck.model.config.encoder_names)
    aug = pipeline.augmentation_for(encoders)
    if lenient:
        feats, ok = pipeline.encode_paths_lenient(paths, encoders, aug)
    else:
        feats = pipeline.original_features([ManifestRecord(p, "", "compound", 0) for p in paths], encoders, aug)
        ok = [True] * len(paths)
    return predict_probs(ck.model, feats), ok


def _eval_records(args) -> list[ManifestRecord]:
    records = load_manifest(args.manifest, _schemas(args.schema))
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    records = [r for r in records if r.label_kind == "compound"]
    if not records:
        raise DataError(f"no compound-labelled records in split {args.split!r}")
    return records


def cmd_eval(args) -> int:
    torch.set_num_threads(1)
    records = _eval_records(args)
    probs, _ = checkpoint_probs(args.checkpoint, [r.image_path for r in records])
    truth = np.array([r.compound_target for r in records])
    report = EvalReport.from_labels(truth, ensemble.predict(probs))
    name = args.name or Path(args.checkpoint).stem
    if args.save_probs:
        ensemble.write_prob_file(probs, args.save_probs)
    if args.out:
        write_report(report, name, args.out, figures=not args.no_figures)
    print(render_report(report, name), end="")
    return EXIT_OK


def cmd_ensemble_eval(args) -> int:
    torch.set_num_threads(1)
    records = _eval_records(args)
    paths = [r.image_path for r in records]
    truth = np.array([r.compound_target for r in records])
    member_probs = []
    for m in args.member:
        if _is_checkpoint(m):
            member_probs.append(checkpoint_probs(m, paths)[0])
        else:
            p = ensemble.read_prob_file(m)
            if p.shape[0] != len(records):
                raise DataError(f"{m} has {p.shape[0]} rows, manifest selection has {len(records)}")
            member_probs.append(p)
    names = args.names.split(",") if args.names else [Path(m).stem for m in args.member]
    if len(names) != len(args.member):
        raise UsageError("--names needs one name per member")
    fused = ensemble.fuse_probs(member_probs, args.weights)
    reports = [EvalReport.from_labels(truth, ensemble.predict(p)) for p in member_probs]
    if len(member_probs) > 1:
        reports.append(EvalReport.from_labels(truth, ensemble.predict(fused)))
        names = names + ["Ensemble"]
    if args.out:
        write_report(reports, names, args.out, figures=not args.no_figures)
        if args.save_probs:
            ensemble.write_prob_file(fused, args.save_probs)
    print(render_report(reports, names), end="")
    return EXIT_OK


def _predict_items(args) -> tuple[list[str], list[str]]:
    if args.frames:
        root = Path(args.frames)
        if not root.is_dir():
            raise DataError(f"{root} is not a directory")
        files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        ids = [p.relative_to(root).with_suffix("").as_posix() for p in files]
        return ids, [str(p) for p in files]
    records = load_manifest(args.manifest, _schemas(args.schema))
    return [r.image_path for r in records], [r.image_path for r in records]


def write_predictions(path: str | Path, ids: Sequence[str], probs: np.ndarray, ok: Sequence[bool]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for item, p, good in zip(ids, probs, ok):
            if not good:
                w.writerow([item, "ERROR"] + [""] * NUM_COMPOUND)
                continue
            w.writerow([item, COMPOUND_NAMES[int(np.argmax(p))]] + [f"{v:.6f}" for v in p])


def read_predictions(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["probabilities"] = [float(row[f"p{i}"]) if row[f"p{i}"] else None for i in range(NUM_COMPOUND)]
    return rows


def cmd_predict(args) -> int:
    torch.set_num_threads(1)
    ids, paths = _predict_items(args)
    member_probs, oks = [], []
    for ckpt in args.checkpoint:
        p, ok = checkpoint_probs(ckpt, paths, lenient=True)
        member_probs.append(p)
        oks.append(ok)
    ok = [all(v) for v in zip(*oks)] if oks else []
    probs = member_probs[0] if len(member_probs) == 1 else ensemble.fuse_probs(member_probs, args.weights)
    write_predictions(args.out, ids, probs, ok)
    n_bad = ok.count(False)
    print(f"wrote {len(ids)} predictions to {args.out}" + (f" ({n_bad} undecodable)" if n_bad else ""))
    return EXIT_OK


def cmd_encode(args) -> int:
    torch.set_num_threads(1)
    records = load_manifest(args.manifest, _schemas(args.schema))
    encoders = pipeline.build_encoders(args.encoders)
    aug = pipeline.augmentation_for(encoders)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats = pipeline.original_features(records, encoders, aug)
    start = 0
    for enc in encoders:
        d = enc.spec.output_dim
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in enc.label)
        n, _ = write_feature_cache(feats[:, start : start + d], out / f"{safe}.cerf")
        print(f"{enc.label}\t{n}x{d}\t{out / f'{safe}.cerf'}")
        start += d
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides config seed; falls back to $CER_SEED")
    common.add_argument("--schema", action="append", default=[], help="extra schema map file (source = file stem)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cerkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-fixture", parents=[common], help="write the synthetic image fixture")
    p.add_argument("out")
    p.add_argument("--n-train", type=int, default=100, help="train images per compound class")
    p.add_argument("--n-val", type=int, default=20, help="val images per compound class")
    p.add_argument("--n-basic", type=int, default=0, help="basic-labelled train images per basic class")
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.08)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("prepare-data", parents=[common], help="merge manifests and assign splits")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", parents=[common], help="train a fusion model")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cache-dir", help="CERF cache for original-image features")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate one checkpoint"),
        ("ensemble-eval", cmd_ensemble_eval, "late-fuse members and compare"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--name")
        else:
            p.add_argument("--member", action="append", required=True, help="checkpoint or CERF D=7 probability file")
            p.add_argument("--weights", type=float, nargs="+")
            p.add_argument("--names", help="comma-separated column names")
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
        p.add_argument("--out", help="directory for report.txt, TSVs and figures")
        p.add_argument("--save-probs", help="write probabilities as a CERF file")
        p.add_argument("--no-figures", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="per-item predictions (zero-shot frames)")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat to ensemble")
    p.add_argument("--weights", type=float, nargs="+")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", help="directory of extracted frames (video_id/frame.png)")
    src.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("encode", parents=[common], help="write CERF feature caches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, ensemble.AllZeroWeights) as exc:
        print(f"cerkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"cerkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"cerkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
