"""countctl: simulate cultures, train, predict frame by frame, evaluate, export and report.

Exit codes: 0 success, 1 usage error, 2 I/O or missing input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .evalab import (
    BalanceConfig, ExperimentConfig, FoldFailure, FoldResult, MetricReport, balance_indices, culture_crops,
    fit_dynamic, fit_static, format_table, load_cultures, load_reports, make_folds, mae, reports_csv, run_grid,
    sweep_configs, write_reports,
)
from .featx import EXTRACTOR_NAMES, TrainingDiverged, static_frame_count
from .gridpart import CropRecord, PartitionConfig, write_crop_records
from .seqnet import DynamicCounter
from .simkit import DatasetManifest, Frame, default_configs, generate_dataset, load_frame
from .timeflow import TemporalBlock, TemporalConfig, sequence_blocks, write_block_records

log = logging.getLogger("lapsecount")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_model_flags(p, seed_required):
    p.add_argument("--mode", choices=["static", "dynamic"], default="static")
    p.add_argument("--extractor", choices=sorted(EXTRACTOR_NAMES), default="tinyconv")
    p.add_argument("--tw", type=int, choices=[10, 20, 30])
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--step", type=int, default=25)
    p.add_argument("--balance-cap", type=int, default=1000)
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--epochs", type=int, help="epochs of the stage being trained (static or dynamic)")
    p.add_argument("--static-epochs", type=int, help="epochs of the static stage in dynamic mode")
    p.add_argument("--fold", default=None, help="fold id (F1..) or test culture name, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="countctl", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic culture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cultures", type=int, default=5)
    p.add_argument("--duration", type=float, default=40.0)
    p.add_argument("--interval", type=float, default=1.0)
    p.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("W", "H"))

    p = sub.add_parser("train", help="train a static or dynamic counter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p, seed_required=True)

    p = sub.add_parser("predict", help="count frames one by one with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--culture", help="culture name inside --manifest")
    p.add_argument("--out", help="write lines to this file instead of stdout")
    p.add_argument("frames", nargs="*", help="PGM files with optional .json annotation sidecars")

    p = sub.add_parser("evaluate", help="leave-one-culture-out evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", action="store_true", help="static plus dynamic tw x direction grid")
    p.add_argument("--checkpoint", help="evaluate this checkpoint only, no training")
    _add_model_flags(p, seed_required=False)

    p = sub.add_parser("export", help="write a training set as an LCRP crop or LBLK block stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--kind", choices=["crops", "blocks"], default="crops")
    p.add_argument("--fold", default=None, help="export the training cultures of this fold (default: all cultures)")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--step", type=int, default=25)
    p.add_argument("--balance-cap", type=int, default=1000, help="crops only; 0 disables balancing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="blocks only: static extractor providing the features")
    p.add_argument("--tw", type=int, help="blocks only (default: the checkpoint's tw, else 20)")

    p = sub.add_parser("report", help="regenerate CSV and table from a report JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------- helpers

def _manifest(path) -> DatasetManifest:
    if not Path(path).is_file():
        raise InputError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _experiment(args) -> ExperimentConfig:
    if args.mode == "dynamic" and args.tw is None:
        args.tw = 20
    if args.mode == "static" and (args.tw is not None or args.bidirectional):
        raise UsageError("--tw and --bidirectional apply to --mode dynamic only")
    if args.window < 1 or not 0 < args.step <= args.window or args.balance_cap < 1:
        raise UsageError("need 0 < step <= window and balance-cap >= 1")
    cfg = ExperimentConfig(mode=args.mode, tw=args.tw, bidirectional=args.bidirectional,
                           extractor=args.extractor, window=args.window, step=args.step,
                           balance_cap=args.balance_cap, seed=args.seed)
    if args.static_epochs is not None:
        cfg = replace(cfg, static_epochs=args.static_epochs)
    if args.epochs is not None:
        cfg = replace(cfg, **{"static_epochs" if cfg.mode == "static" else "dynamic_epochs": args.epochs})
    return cfg


def _select_folds(manifest, fold_arg):
    folds = make_folds(manifest.names)
    if fold_arg in (None, "all"):
        return folds
    chosen = [f for f in folds if fold_arg in (f.fold_id, f.test)]
    if not chosen:
        raise UsageError(f"no fold named {fold_arg!r}; have {[f.fold_id for f in folds]} / {manifest.names}")
    return chosen


def _arch(cfg: ExperimentConfig, static, recurrent) -> dict:
    arch = {"extractor": static.extractor.arch, "m": static.m, "window": cfg.window, "mode": cfg.mode}
    if recurrent is not None:
        arch.update(model=recurrent.kind, tw=cfg.tw, hidden=recurrent.hidden)
    arch["name"] = arch.get("model", arch["extractor"])
    return arch


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    if args.cultures < 2:
        raise UsageError("--cultures must be >= 2")
    try:
        configs = default_configs(args.cultures, args.seed, duration=args.duration,
                                  sampling_interval=args.interval, frame_size=tuple(args.size))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    man = generate_dataset(configs, args.out)
    frames = sum(len(c.frames) for c in man.cultures)
    dots = 0
    for c in man.cultures:
        for fe in c.frames:
            dots += len(json.loads((man.root / fe.annotation).read_text())["dots"])
    print(f"cultures={len(man.cultures)} frames={frames} dots={dots} seed={args.seed} "
          f"manifest={Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, data: dict, train_names, out: Path, fold_desc: dict) -> Path:
    train_sets = {n: culture_crops(data[n], cfg.partition) for n in train_names}
    static, s_hist = fit_static(cfg, train_sets)
    recurrent, d_hist = None, []
    if cfg.mode == "dynamic":
        recurrent, d_hist = fit_dynamic(cfg, static, train_sets)
    config = dict(asdict(cfg), **fold_desc)
    training = {"static_loss": "L1", "static_epochs": len(s_hist)}
    if recurrent is not None:
        training.update(dynamic_loss="L2", dynamic_epochs=len(d_hist))
    ckpt = out / "checkpoint.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, _arch(cfg, static, recurrent), static, recurrent, cfg.seed, training, config)
    except OSError as exc:
        raise OSError(f"cannot write {ckpt}: {exc}") from exc
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["stage", "epoch", "loss", "seed"])
    for stage, hist in (("static", s_hist), ("dynamic", d_hist)):
        for k, v in enumerate(hist):
            wr.writerow([stage, k + 1, format(v, ".6g"), cfg.seed])
    _write_text(out / "training_loss.csv", buf.getvalue())
    return ckpt


def cmd_train(args) -> int:
    cfg = _experiment(args)
    man = _manifest(args.manifest)
    data = load_cultures(man, cfg.quadrant, cfg.seed)
    out = Path(args.out)
    if args.fold is None:
        ckpt = _train_one(cfg, data, man.names, out, {"fold": None, "train": man.names})
        print(f"wrote {ckpt}")
        return EXIT_OK
    for fold in _select_folds(man, args.fold):
        dest = out / fold.fold_id if args.fold == "all" else out
        ckpt = _train_one(cfg, data, fold.train, dest,
                          {"fold": fold.fold_id, "train": list(fold.train), "test": fold.test})
        print(f"{fold.fold_id}: wrote {ckpt}")
    return EXIT_OK


def _frame_stream(args):
    if args.manifest:
        man = _manifest(args.manifest)
        names = [args.culture] if args.culture else man.names[:1]
        if args.culture and args.culture not in man.names:
            raise UsageError(f"culture {args.culture!r} not in manifest")
        for fe in man.culture(names[0]).frames:
            yield load_frame(man.root / fe.image, man.root / fe.annotation)
        return
    if not args.frames:
        raise UsageError("give --manifest or frame files")
    for k, path in enumerate(args.frames):
        path = Path(path)
        if not path.is_file():
            raise InputError(f"frame not found: {path}")
        side = path.with_suffix(".json")
        frame = load_frame(path, side if side.is_file() else None)
        if not side.is_file():
            frame = Frame(frame.pixels, float(k), [])
        frame.has_truth = side.is_file()
        yield frame


def predict_lines(doc, static, recurrent, frames):
    """One "timestamp,count,true" line per frame, in arrival order."""
    arch = doc["arch"]
    cfg = doc.get("config", {})
    pcfg = PartitionConfig(arch.get("window", 50), cfg.get("step", 25), True)
    counter = None
    if recurrent is not None:
        counter = DynamicCounter(static, recurrent, TemporalConfig(tw=arch["tw"]), pcfg)
    last = None
    for frame in frames:
        if last is not None and frame.timestamp <= last:
            raise InputError(f"frame at {frame.timestamp} h arrived after {last} h")
        last = frame.timestamp
        count = counter.push(frame) if counter is not None else static_frame_count(frame, static, pcfg)
        truth = str(frame.count) if getattr(frame, "has_truth", True) else ""
        yield f"{frame.timestamp:.6g},{count:.6g},{truth}"


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    doc, static, recurrent = load_checkpoint(args.checkpoint)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for line in predict_lines(doc, static, recurrent, _frame_stream(args)):
            print(line, file=sink, flush=True)
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


def _evaluate_checkpoint(args, man) -> list[MetricReport]:
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    doc, static, recurrent = load_checkpoint(args.checkpoint)
    data = load_cultures(man)
    results = []
    for fold in _select_folds(man, args.fold or doc.get("config", {}).get("fold")):
        frames = data[fold.test]
        for fr in frames:
            fr.has_truth = True
        preds = [float(line.split(",")[1]) for line in predict_lines(doc, static, recurrent, frames)]
        truths = [float(f.count) for f in frames]
        m, s = mae(preds, truths)
        results.append(FoldResult(fold.fold_id, fold.test, m, s, preds, truths, [f.timestamp for f in frames]))
    config = dict(doc.get("config", {}), checkpoint=str(args.checkpoint))
    defaults = asdict(ExperimentConfig())
    config.update({k: config.get(k, v) for k, v in defaults.items()})
    config["tw"] = doc["arch"].get("tw")
    config["mode"] = doc["arch"]["mode"]
    config["bidirectional"] = doc["arch"].get("model", "").startswith("bilstm")
    return [MetricReport(config, results)]


def cmd_evaluate(args) -> int:
    man = _manifest(args.manifest)
    if args.checkpoint:
        reports = _evaluate_checkpoint(args, man)
    else:
        if args.sweep:
            args.mode, args.tw, args.bidirectional = "static", None, False
            base = _experiment(args)
            if args.epochs is not None:
                base = replace(base, dynamic_epochs=args.epochs)
            configs = sweep_configs(base)
        else:
            configs = [_experiment(args)]
            if configs[0].mode == "dynamic":
                configs.insert(0, replace(configs[0], mode="static", tw=None, bidirectional=False))
        folds = None if args.fold in (None, "all") else [f.fold_id for f in _select_folds(man, args.fold)]
        reports = run_grid(configs, man, folds)
    try:
        csv_path, json_path = write_reports(reports, args.out)
    except OSError as exc:
        raise OSError(f"cannot write reports under {args.out}: {exc}") from exc
    print(format_table(reports))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _export_names(man, fold_arg):
    if fold_arg in (None, "all"):
        return man.names
    return list(_select_folds(man, fold_arg)[0].train)


def cmd_export(args) -> int:
    if args.window < 1 or not 0 < args.step <= args.window or args.balance_cap < 0:
        raise UsageError("need 0 < step <= window and balance-cap >= 0")
    man = _manifest(args.manifest)
    names = _export_names(man, args.fold)
    data = load_cultures(man)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc}") from exc
    if args.kind == "crops":
        pcfg = PartitionConfig(args.window, args.step, False)
        records, frame_id = [], 0
        for name in names:
            crops, stack, labels = culture_crops(data[name], pcfg)
            for t in range(len(stack)):
                for k, c in enumerate(crops):
                    px = np.round(np.clip(stack[t, k], 0.0, 1.0) * 255.0).astype(np.uint8)
                    records.append(CropRecord(frame_id, c.x, c.y, float(labels[t, k]), px))
                frame_id += 1
        if args.balance_cap:
            keep = balance_indices([r.count for r in records], BalanceConfig(args.balance_cap), args.seed)
            records = [records[i] for i in np.sort(keep)]
        n = write_crop_records(out, args.window, records)
    else:
        if not args.checkpoint:
            raise UsageError("--kind blocks needs --checkpoint for the feature extractor")
        if not Path(args.checkpoint).is_file():
            raise InputError(f"checkpoint not found: {args.checkpoint}")
        doc, static, _ = load_checkpoint(args.checkpoint)
        tw = args.tw or doc["arch"].get("tw") or 20
        pcfg = PartitionConfig(static.window, args.step, False)
        pairs = []
        for name in names:
            _, stack, labels = culture_crops(data[name], pcfg)
            T, L = labels.shape
            blocks = sequence_blocks(static.features(stack.reshape(T * L, *stack.shape[2:])).reshape(T, L, -1), tw)
            for t in range(T):
                for k in range(L):
                    pairs.append((TemporalBlock(blocks[t, k], min(t + 1, tw)), float(labels[t, k])))
        n = write_block_records(out, tw, static.m, pairs)
    print(f"wrote {n} {args.kind} records from {len(names)} culture(s) to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not Path(args.input).is_file():
        raise InputError(f"report not found: {args.input}")
    reports = load_reports(args.input)
    out = Path(args.out)
    _write_text(out / "report.csv", reports_csv(reports))
    print(format_table(reports))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "export": cmd_export, "report": cmd_report}

NUMERIC = (TrainingDiverged, nc.NonFiniteGradient, FloatingPointError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, FoldFailure):
        return _exit_code(exc.cause)
    if isinstance(exc, NUMERIC):
        return EXIT_NUMERIC
    if isinstance(exc, (InputError, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InputError, OSError, ValueError, KeyError, FoldFailure, *NUMERIC) as exc:
        code = _exit_code(exc)
        print(f"countctl {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
