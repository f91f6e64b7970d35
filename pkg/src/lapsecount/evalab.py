"""Metrics, leave-one-culture-out folds, class balancing and the experiment runner."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .featx import EXTRACTOR_NAMES, StaticModel, train_static
from .gridpart import JoinMethod, PartitionConfig, cut_crops, enumerate_crops, join_counts, label_crops
from .seqnet import train_dynamic
from .simkit import DatasetManifest, Frame
from .timeflow import sequence_blocks

log = logging.getLogger(__name__)

TW_SWEEP = (10, 20, 30)


class FoldFailure(RuntimeError):
    def __init__(self, fold: str, cause: BaseException):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.cause = cause


def mae(preds, truths) -> tuple[float, float]:
    """Mean and population std of absolute errors."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError(f"need equal non-empty sequences, got {p.shape} and {t.shape}")
    err = np.abs(p - t)
    return float(err.mean()), float(err.std())


@dataclass(frozen=True)
class FoldSpec:
    fold_id: str
    train: tuple[str, ...]
    test: str


def make_folds(names) -> list[FoldSpec]:
    names = list(names)
    if len(names) < 2:
        raise ValueError("need at least two cultures")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate culture names in {names}")
    ordered = sorted(names)
    return [FoldSpec(f"F{k + 1}", tuple(n for n in ordered if n != test), test)
            for k, test in enumerate(ordered)]


@dataclass(frozen=True)
class BalanceConfig:
    cap: int = 1000

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be >= 1")


def balance_indices(counts, cfg: BalanceConfig, seed: int) -> np.ndarray:
    """Indices keeping at most ``cfg.cap`` samples per count class, shuffled."""
    counts = np.asarray(counts)
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(counts):
        idx = np.flatnonzero(counts == cls)
        if len(idx) > cfg.cap:
            idx = np.sort(rng.choice(idx, size=cfg.cap, replace=False))
        keep.append(idx)
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    return keep[rng.permutation(len(keep))]


def balance(samples, cfg: BalanceConfig = BalanceConfig(), seed: int = 0) -> list:
    """Down-sample (crop, count) pairs so no count class exceeds the cap."""
    counts = [int(c) for _, c in samples]
    if any(c < 0 for c in counts):
        raise ValueError("counts must be non-negative")
    return [samples[i] for i in balance_indices(counts, cfg, seed)]


@dataclass
class ExperimentConfig:
    mode: str = "static"
    tw: int | None = None
    bidirectional: bool = False
    extractor: str = "tinyconv"
    window: int = 50
    step: int = 25
    balance: bool = True  # static crop sets only
    balance_dynamic: bool = False
    balance_cap: int = 1000
    seed: int = 0
    static_epochs: int = 8
    dynamic_epochs: int = 24
    hidden: int = 30
    static_batch: int = 32
    dynamic_batch: int = 64
    static_lr: float = 1e-3
    dynamic_lr: float = 1e-3
    quadrant: bool = False

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"mode must be static or dynamic, got {self.mode!r}")
        if (self.tw is not None) != (self.mode == "dynamic"):
            raise ValueError("tw is required for dynamic mode and forbidden for static mode")
        if self.tw is not None and self.tw < 1:
            raise ValueError("tw must be >= 1")
        if self.extractor not in EXTRACTOR_NAMES:
            raise ValueError(f"unknown extractor {self.extractor!r}")

    @property
    def partition(self) -> PartitionConfig:
        return PartitionConfig(self.window, self.step, False)

    @property
    def label(self) -> str:
        if self.mode == "static":
            return f"static/{self.extractor}"
        return f"{'bi' if self.bidirectional else ''}lstm/{self.extractor}/tw{self.tw}"

    def static_key(self) -> tuple:
        return (self.extractor, self.window, self.step, self.balance, self.balance_cap, self.seed,
                self.static_epochs, self.static_batch, self.static_lr, self.quadrant)


@dataclass
class FoldResult:
    fold: str
    test: str
    mae: float
    std: float
    preds: list
    truths: list
    timestamps: list

    @property
    def n_frames(self) -> int:
        return len(self.truths)


@dataclass
class MetricReport:
    config: dict
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def mean_mae(self) -> float:
        return float(np.mean([f.mae for f in self.folds]))

    def to_json(self) -> dict:
        return {"config": self.config, "mean_mae": self.mean_mae,
                "folds": [dict(asdict(f), n_frames=f.n_frames) for f in self.folds]}

    @classmethod
    def from_json(cls, doc) -> "MetricReport":
        folds = [FoldResult(f["fold"], f["test"], f["mae"], f["std"], f["preds"], f["truths"], f["timestamps"])
                 for f in doc["folds"]]
        return cls(doc["config"], folds)


# ---------------------------------------------------------------- data assembly

def quadrant_frames(frames: list[Frame], seed: int) -> list[Frame]:
    """Keep one quadrant per culture, chosen with ``seed`` (keeps frames registered)."""
    h, w = frames[0].pixels.shape
    q = int(np.random.default_rng(seed).integers(4))
    x0, y0 = (q % 2) * (w // 2), (q // 2) * (h // 2)
    out = []
    for fr in frames:
        dots = [(x - x0, y - y0) for x, y in fr.annotations
                if x0 <= x < x0 + w // 2 and y0 <= y < y0 + h // 2]
        out.append(Frame(fr.pixels[y0:y0 + h // 2, x0:x0 + w // 2].copy(), fr.timestamp, dots))
    return out


def load_cultures(manifest: DatasetManifest, quadrant: bool = False, seed: int = 0) -> dict[str, list[Frame]]:
    data = {}
    for k, name in enumerate(manifest.names):
        frames = sorted(manifest.load_frames(name), key=lambda f: f.timestamp)
        data[name] = quadrant_frames(frames, seed * 7919 + k) if quadrant else frames
    return data


def culture_crops(frames: list[Frame], pcfg: PartitionConfig):
    """Crop pixels (T, L, w, w) and half-open labels (T, L) on a fixed grid."""
    h, w = frames[0].pixels.shape
    crops = enumerate_crops(w, h, pcfg)
    stack = np.stack([cut_crops(f.pixels, crops) for f in frames])
    labels = np.stack([label_crops(crops, f.annotations) for f in frames])
    return crops, stack, labels


def _features(static: StaticModel, stack):
    T, L = stack.shape[:2]
    return static.features(stack.reshape(T * L, *stack.shape[2:])).reshape(T, L, -1)


def _join_series(est, pcfg, width, height):
    return [join_counts(e, pcfg, width, height, JoinMethod.OVERLAP_AVERAGED_DENSITY) for e in est]


def _fold_result(fold: FoldSpec, preds, frames) -> FoldResult:
    truths = [float(f.count) for f in frames]
    m, s = mae(preds, truths)
    return FoldResult(fold.fold_id, fold.test, m, s, [float(p) for p in preds], truths,
                      [float(f.timestamp) for f in frames])


def fit_static(cfg: ExperimentConfig, train_sets: dict):
    """Train the crop regressor (L1) on ``{culture: (crops, stack, labels)}``; returns (model, losses)."""
    X = np.concatenate([s.reshape(-1, cfg.window, cfg.window) for _, s, _ in train_sets.values()])
    y = np.concatenate([lab.reshape(-1) for _, _, lab in train_sets.values()])
    if cfg.balance:
        keep = balance_indices(y, BalanceConfig(cfg.balance_cap), cfg.seed)
        X, y = X[keep], y[keep]
    return train_static(X, y, cfg.extractor, nc.LossKind.L1, cfg.static_epochs, cfg.seed,
                        cfg.static_batch, cfg.static_lr)


def fit_dynamic(cfg: ExperimentConfig, static: StaticModel, train_sets: dict):
    """Train the recurrent head (L2) on frozen features of ``{culture: (crops, stack, labels)}``."""
    train = {name: (_features(static, stack), lab) for name, (_, stack, lab) in train_sets.items()}
    return fit_dynamic_features(cfg, train)


def fit_dynamic_features(cfg: ExperimentConfig, train: dict):
    """Same as fit_dynamic, from precomputed ``{culture: (features (T, L, m), labels (T, L))}``."""
    blocks, labels = [], []
    for feats, lab in train.values():
        blocks.append(sequence_blocks(feats, cfg.tw).reshape(-1, cfg.tw, feats.shape[-1]))
        labels.append(lab.reshape(-1))
    blocks, labels = np.concatenate(blocks), np.concatenate(labels)
    if cfg.balance_dynamic:
        keep = balance_indices(labels, BalanceConfig(cfg.balance_cap), cfg.seed)
        blocks, labels = blocks[keep], labels[keep]
    return train_dynamic(blocks, labels, cfg.bidirectional, nc.LossKind.L2, cfg.dynamic_epochs,
                         cfg.seed, cfg.hidden, cfg.dynamic_batch, cfg.dynamic_lr)


@dataclass
class FoldState:
    """Everything the per-config jobs of one fold share: the static model and frozen features."""
    fold: FoldSpec
    static: StaticModel | None
    train: dict  # culture -> (features (T, L, m), labels (T, L))
    test_feats: np.ndarray | None
    test_frames: list
    test_crops: list
    test_stack: np.ndarray | None  # kept only for plugged-in static predictors


def prepare_fold(fold: FoldSpec, data: dict[str, list[Frame]], configs: list[ExperimentConfig],
                 static_predictor=None) -> FoldState:
    """Train the fold's static model once and extract every feature the configs need."""
    base = configs[0]
    if any(c.static_key() != base.static_key() for c in configs):
        raise ValueError("configs in one run must share extractor and static training settings")
    if fold.test in fold.train:
        raise ValueError(f"fold {fold.fold_id}: test culture {fold.test} leaks into training")
    eval_pcfg = PartitionConfig(base.window, base.step, True)

    need_model = static_predictor is None or any(c.mode == "dynamic" for c in configs)
    train_sets = {name: culture_crops(data[name], base.partition) for name in fold.train}
    assert fold.test not in train_sets  # leakage guard by culture tag
    static = fit_static(base, train_sets)[0] if need_model else None
    train = {}
    if static is not None and any(c.mode == "dynamic" for c in configs):
        train = {name: (_features(static, stack), lab) for name, (_, stack, lab) in train_sets.items()}

    test_frames = data[fold.test]
    test_crops, test_stack, _ = culture_crops(test_frames, eval_pcfg)
    test_feats = _features(static, test_stack) if static is not None else None
    return FoldState(fold, static, train, test_feats, test_frames, test_crops,
                     test_stack if static_predictor is not None else None)


def evaluate_config(state: FoldState, cfg: ExperimentConfig, static_predictor=None) -> FoldResult:
    static, frames = state.static, state.test_frames
    h, w = frames[0].pixels.shape
    if cfg.mode == "static":
        if static_predictor is not None:
            est = [static_predictor(fr, state.test_crops, state.test_stack[t]) for t, fr in enumerate(frames)]
        else:
            est = static.predict_features(state.test_feats.reshape(-1, static.m)).reshape(len(frames), -1)
    else:
        rnn, _ = fit_dynamic_features(cfg, state.train)
        tb = sequence_blocks(state.test_feats, cfg.tw)  # (T, L, tw, m)
        est = rnn.forward(tb.reshape(-1, cfg.tw, static.m)).reshape(len(frames), -1)
    pcfg = PartitionConfig(cfg.window, cfg.step, True)
    return _fold_result(state.fold, _join_series(est, pcfg, w, h), frames)


def run_fold(fold: FoldSpec, data: dict[str, list[Frame]], configs: list[ExperimentConfig],
             static_predictor=None) -> list[FoldResult]:
    """Train and evaluate every config on one fold; configs share one static model.

    ``static_predictor`` (frame, crops, stack) -> estimates replaces the trained
    static model for static configs (used to plug in oracle predictors).
    """
    state = prepare_fold(fold, data, configs, static_predictor)
    return [evaluate_config(state, cfg, static_predictor) for cfg in configs]


def _timed(fn, fold_id, *args):
    t0 = time.perf_counter()
    try:
        out = fn(*args)
    except Exception as exc:  # noqa: BLE001 - re-raised with fold context
        raise FoldFailure(fold_id, exc) from exc
    return out, time.perf_counter() - t0


def _prepare_job(args):
    fold, data, configs, predictor = args
    return _timed(prepare_fold, fold.fold_id, fold, data, configs, predictor)


def _config_job(args):
    state, cfg, predictor = args
    return _timed(evaluate_config, state.fold.fold_id, state, cfg, predictor)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LAPSECOUNT_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(configs: list[ExperimentConfig], manifest: DatasetManifest, folds: list[str] | None = None,
             static_predictor=None, timings: list | None = None) -> list[MetricReport]:
    """One MetricReport per config, each with one FoldResult per fold (fold order).

    Work runs in two phases: one job per fold (static model and features),
    then one job per (fold, config).  With ``LAPSECOUNT_THREADS`` > 1 each
    phase is spread over a process pool; results do not depend on the worker
    count.  ``timings`` collects (phase, fold, config label, seconds) per job.
    """
    base = configs[0]
    data = load_cultures(manifest, base.quadrant, base.seed)
    specs = make_folds(manifest.names)
    if folds:
        specs = [f for f in specs if f.fold_id in folds or f.test in folds]
        if not specs:
            raise ValueError(f"no fold matches {folds}")
    workers = 1 if static_predictor is not None else worker_count()
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    mapper = pool.map if pool else map
    try:
        prep = list(mapper(_prepare_job, [(f, {n: data[n] for n in (*f.train, f.test)}, configs, static_predictor)
                                          for f in specs]))
        jobs = [(state, cfg, static_predictor) for state, _ in prep for cfg in configs]
        order = dispatch_order([cfg for _, cfg, _ in jobs])
        finished = list(mapper(_config_job, [jobs[i] for i in order]))
    finally:
        if pool:
            pool.shutdown()
    done = [None] * len(jobs)
    for i, res in zip(order, finished):
        done[i] = res
    if timings is not None:
        timings.extend(("prepare", f.fold_id, "", sec) for f, (_, sec) in zip(specs, prep))
        timings.extend(("config", jobs[i][0].fold.fold_id, jobs[i][1].label, done[i][1]) for i in order)
    reports = []
    for k, cfg in enumerate(configs):
        reports.append(MetricReport(asdict(cfg), [done[i * len(configs) + k][0] for i in range(len(specs))]))
    return reports


def job_cost(cfg: ExperimentConfig) -> int:
    """Relative training cost: recurrent steps times directions (static evaluation is nearly free)."""
    return 0 if cfg.mode == "static" else cfg.tw * (2 if cfg.bidirectional else 1)


def dispatch_order(configs: list[ExperimentConfig]) -> list[int]:
    """Costliest jobs first, so a pool's in-order dispatch approximates longest-job-first."""
    return sorted(range(len(configs)), key=lambda i: -job_cost(configs[i]))


def run_experiment(cfg: ExperimentConfig, manifest: DatasetManifest, folds=None,
                   static_predictor=None) -> MetricReport:
    return run_grid([cfg], manifest, folds, static_predictor)[0]


def sweep_configs(base: ExperimentConfig, tws=TW_SWEEP, directions=(False, True)) -> list[ExperimentConfig]:
    """Static baseline followed by dynamic configs for every (tw, direction)."""
    static = replace(base, mode="static", tw=None, bidirectional=False)
    grid = [static]
    for bi in directions:
        for tw in tws:
            grid.append(replace(base, mode="dynamic", tw=tw, bidirectional=bi))
    return grid


# ---------------------------------------------------------------- report files

CSV_COLUMNS = ["fold", "mode", "extractor", "tw", "bidirectional", "mae", "std", "n_frames"]


def _g6(v: float) -> str:
    return format(v, ".6g")


def reports_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in reports:
        c = r.config
        for f in r.folds:
            wr.writerow([f.fold, c["mode"], c["extractor"], "" if c["tw"] is None else c["tw"],
                         int(bool(c["bidirectional"])), _g6(f.mae), _g6(f.std), f.n_frames])
    return buf.getvalue()


def reports_json(reports: list[MetricReport]) -> dict:
    return {"format": "lapsecount-report/1", "version": __version__, "reports": [r.to_json() for r in reports]}


def write_reports(reports: list[MetricReport], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "report.csv", out / "report.json"
    csv_path.write_text(reports_csv(reports))
    json_path.write_text(json.dumps(reports_json(reports), indent=1) + "\n")
    return csv_path, json_path


def load_reports(path) -> list[MetricReport]:
    doc = json.loads(Path(path).read_text())
    return [MetricReport.from_json(r) for r in doc["reports"]]


def format_table(reports: list[MetricReport]) -> str:
    """Fold x config MAE +- std table, one row per config."""
    if not reports:
        return ""
    folds = [f.fold for f in reports[0].folds]
    names = set(ExperimentConfig.__dataclass_fields__)
    label_of = lambda c: ExperimentConfig(**{k: v for k, v in c.items() if k in names}).label  # noqa: E731
    rows = [[label_of(r.config)] + [f"{f.mae:7.2f} ±{f.std:6.2f}" for f in r.folds] + [f"{r.mean_mae:7.2f}"]
            for r in reports]
    header = ["config"] + folds + ["mean"]
    widths = [max(len(str(row[i])) for row in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(wd) for v, wd in zip(header, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(str(v).ljust(wd) for v, wd in zip(row, widths)) for row in rows]
    return "\n".join(lines)
