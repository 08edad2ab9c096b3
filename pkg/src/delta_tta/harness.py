"""Synthetic shifted tasks, single-pass episodes, metrics and report files."""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adapt, netcore
from .adapt import AdaptState, MethodSpec
from .checkpoint import dumps
from .errors import ConfigError, DeltaError, InputError, NumericError
from .normalize import NormMode, batch_stats
from .streams import LabeledDataset, ScenarioSpec, Stream, make_scenario

SEPARATION_RADIUS = 3.0
REPORT_FIELDS = ("method", "scenario", "rho", "pi", "B", "alpha", "lambda", "seed",
                 "acc_mean_class", "acc_overall", "pred_std", "pred_range", "duration_ms")


# --- synthetic task --------------------------------------------------------------

def parse_shift(shift: str):
    kind, _, mag = shift.partition(":")
    if kind not in ("noise", "scale", "affine"):
        raise ConfigError(f"unknown shift {shift!r}; use noise:s, scale:s or affine:s")
    try:
        return kind, float(mag or 0.0)
    except ValueError:
        raise ConfigError(f"bad shift magnitude in {shift!r}") from None


def _mixture(rng, means, n):
    k, d = means.shape
    y = rng.permutation(np.arange(n) % k)
    return means[y] + rng.standard_normal((n, d)), y


def apply_shift(x, shift, rng):
    kind, s = parse_shift(shift)
    if kind == "noise":
        return x + s * rng.standard_normal(x.shape)
    if kind == "scale":
        return x * s
    q, r = np.linalg.qr(rng.standard_normal((x.shape[1], x.shape[1])))
    rot = q * np.sign(np.diag(r))
    return x @ ((1.0 - s) * np.eye(x.shape[1]) + s * rot)


def make_synthetic_task(num_classes=10, dim=16, n_train=5000, n_test=2000, shift="noise:2.0", seed=0):
    """Gaussian-mixture source data and a covariate-shifted, class-balanced test set."""
    if num_classes < 2 or dim < 2:
        raise ConfigError("need K >= 2 and D >= 2")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= SEPARATION_RADIUS / np.linalg.norm(means, axis=1, keepdims=True)
    xtr, ytr = _mixture(rng, means, n_train)
    xte, yte = _mixture(rng, means, n_test)
    xte = apply_shift(xte, shift, rng)
    return LabeledDataset(xtr, ytr, num_classes), LabeledDataset(xte, yte, num_classes)


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 10
    dim: int = 16
    n_train: int = 5000
    n_test: int = 2000
    shift: str = "noise:2.0"
    hidden: tuple = (64, 64)
    epochs: int = 20
    train_lr: float = 1e-2
    bn_momentum: float = 0.1
    seed: int = 0


def build_task(cfg: TaskConfig):
    """``(source model, train set, test set)`` for a task configuration."""
    train, test = make_synthetic_task(cfg.num_classes, cfg.dim, cfg.n_train, cfg.n_test, cfg.shift, cfg.seed)
    spec = netcore.ModelSpec(cfg.dim, cfg.hidden, cfg.num_classes, seed=cfg.seed)
    model = netcore.train_source(spec, train, epochs=cfg.epochs, lr=cfg.train_lr,
                                 bn_momentum=cfg.bn_momentum, seed=cfg.seed)
    return model, train, test


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    acc_mean_class: float
    acc_overall: float
    counts: np.ndarray
    pred_std: float
    pred_range: int


def metrics(predictions, labels, num_classes) -> Metrics:
    """Mean per-class recall over classes present in ``labels`` plus prediction-count spread.

    ``predictions`` may be class indices or an N x K probability matrix.
    """
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = np.argmax(pred, axis=1)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise InputError("predictions and labels differ in length")
    correct = pred == labels
    present = np.unique(labels)
    recalls = [correct[labels == k].mean() for k in present]
    counts = np.bincount(pred, minlength=num_classes)
    return Metrics(float(np.mean(recalls)) if recalls else float("nan"),
                   float(correct.mean()) if correct.size else float("nan"),
                   counts, float(np.std(counts)), int(counts.max() - counts.min()))


# --- episodes ---------------------------------------------------------------

@dataclass
class EpisodeReport:
    method: str
    scenario: str
    rho: float | None
    pi: float | None
    B: int
    alpha: float
    lam: float
    seed: int
    acc_mean_class: float
    acc_overall: float
    counts: list
    pred_std: float
    pred_range: int
    duration_ms: float
    n_steps: int = 0
    n_updates: int = 0
    schedule_L: int | None = None
    stats_error: list | None = None
    gamma_norms: list | None = None
    predictions: np.ndarray | None = field(default=None, repr=False)

    def record(self) -> dict:
        return {"method": self.method, "scenario": self.scenario, "rho": self.rho, "pi": self.pi,
                "B": self.B, "alpha": self.alpha, "lambda": self.lam, "seed": self.seed,
                "acc_mean_class": self.acc_mean_class, "acc_overall": self.acc_overall,
                "pred_std": self.pred_std, "pred_range": self.pred_range,
                "duration_ms": self.duration_ms}


def fast_slow_schedule(n, batch_size, window):
    """Plan for fast inference at ``batch_size`` and an update every ``window`` samples.

    Returns a list of ``(start, stop, update)`` triples; ``update`` is the
    ``(start, stop)`` of the window adapted on after predicting that batch, or
    ``None``.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if window < batch_size or window % batch_size:
        raise ConfigError("update window L must be a multiple of the batch size")
    plan = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        update = (stop - window, stop) if stop % window == 0 and stop - start == batch_size else None
        plan.append((start, stop, update))
    return plan


def _used_stats(cache, state):
    if cache.mode is NormMode.TBR:
        sigma = cache.sigma / cache.r
        return cache.mu - cache.d * sigma, sigma
    return cache.mu, cache.sigma


def run_episode(model0, stream: Stream, method: MethodSpec, batch_size=64, schedule=None, *,
                alpha=None, seed=0, record_stats=False, record_gamma=False) -> EpisodeReport:
    """One online pass over ``stream``.

    ``schedule`` is the update window ``L`` of the fast-inference/slow-update
    mode (``None`` or ``L == batch_size`` for the standard schedule). Labels are
    read only after the pass, for scoring.
    """
    if len(stream) == 0:
        raise InputError("empty stream")
    t0 = time.perf_counter()
    model = model0.reset_test_stats()
    if alpha is not None:
        model = model.set_alpha(alpha)
    alpha = model.norms[0].alpha if model.norms else alpha
    window = batch_size if schedule is None else int(schedule)
    plan = fast_slow_schedule(len(stream), batch_size, window)
    x = stream.x
    state = AdaptState.start(stream.num_classes)
    probs_log = np.empty((len(stream), stream.num_classes))
    stats_err, gammas = [], []
    if record_stats:
        w0, b0 = model.dense[0]
        mu_pop, sigma_pop = batch_stats(x @ w0 + b0, model.norms[0].eps)
    if record_gamma:
        gammas.append(float(np.linalg.norm(np.concatenate([s.gamma for s in model.norms]))))

    for step, (start, stop, update) in enumerate(plan):
        standard = window == batch_size
        try:
            res = adapt.adapt_step(model, x[start:stop], method, state, learn=standard)
            if update is not None and not standard:
                upd = adapt.adapt_step(res.model, x[update[0]:update[1]], method, res.state,
                                       update_stats=False)
                res = replace(res, model=upd.model, state=upd.state)
        except FloatingPointError as exc:
            raise NumericError(f"episode aborted at step {step}: {exc}") from exc
        probs_log[start:stop] = res.probs
        if record_stats:
            mu, sigma = _used_stats(res.trace.caches[0], model.norms[0])
            stats_err.append(float(np.sqrt(np.sum((mu - mu_pop) ** 2) + np.sum((sigma - sigma_pop) ** 2))))
        model, state = res.model, res.state
        if record_gamma:
            gammas.append(float(np.linalg.norm(np.concatenate([s.gamma for s in model.norms]))))

    m = metrics(probs_log, stream.y, stream.num_classes)
    spec = stream.spec
    return EpisodeReport(
        method=method.name, scenario=spec.name if spec else "custom",
        rho=spec.rho if spec else None, pi=spec.pi if spec else None, B=batch_size,
        alpha=alpha, lam=method.lam, seed=spec.seed if spec else seed,
        acc_mean_class=m.acc_mean_class, acc_overall=m.acc_overall, counts=m.counts.tolist(),
        pred_std=m.pred_std, pred_range=m.pred_range,
        duration_ms=1000.0 * (time.perf_counter() - t0), n_steps=len(plan),
        n_updates=state.updates, schedule_L=None if schedule is None else window,
        stats_error=stats_err if record_stats else None,
        gamma_norms=gammas if record_gamma else None, predictions=probs_log)


# --- run matrices -------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    method: str
    scenario: str
    seed: int
    rho: float | None = None
    pi: float | None = None


@dataclass(frozen=True)
class SweepConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    batch_size: int = 64
    alpha: float | None = None
    lam: float = adapt.DEFAULT_LAMBDA
    lr: float = 1e-3
    optimizer: str = "adam"
    init: str = "first"
    schedule: int | None = None
    pieces: int = 10
    # retrain the source model per seed (task seed = cell seed) instead of once
    per_seed_task: bool = False


def _method(name, cfg: SweepConfig):
    return adapt.method_from_name(name, lam=cfg.lam, init=cfg.init,
                                  optimizer=netcore.OptimizerConfig(cfg.optimizer, cfg.lr))


_TASK_CACHE: dict = {}


def _task(cfg: TaskConfig):
    if cfg not in _TASK_CACHE:
        _TASK_CACHE[cfg] = build_task(cfg)
    return _TASK_CACHE[cfg]


def run_cell(cell: Cell, cfg: SweepConfig):
    task_cfg = replace(cfg.task, seed=cell.seed) if cfg.per_seed_task else cfg.task
    model, _, test = _task(task_cfg)
    stream = make_scenario(test, ScenarioSpec.parse(cell.scenario, cell.rho, cell.pi,
                                                        pieces=cfg.pieces, seed=cell.seed))
    return run_episode(model, stream, _method(cell.method, cfg), cfg.batch_size, cfg.schedule,
                       alpha=cfg.alpha)


def _safe_cell(args):
    cell, cfg = args
    try:
        return cell, run_cell(cell, cfg), None
    except DeltaError as exc:
        return cell, None, {"kind": exc.kind, "message": str(exc)}


def threads_from_env(default=1):
    try:
        return max(1, int(os.environ.get("DELTA_THREADS", default)))
    except ValueError:
        return default


def compare(methods, scenarios, seeds, cfg: SweepConfig = SweepConfig(), threads=None):
    """Run every (method, scenario, seed) cell and summarize over seeds.

    ``scenarios`` holds ``(name, rho, pi)`` triples. Failed cells are recorded
    under ``"failures"`` and skipped in the summary.
    """
    cells = [Cell(m, s, seed, rho, pi) for m in methods for (s, rho, pi) in scenarios for seed in seeds]
    threads = threads_from_env() if threads is None else threads
    jobs = [(c, cfg) for c in cells]
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_safe_cell, jobs))
    else:
        results = [_safe_cell(j) for j in jobs]
    reports = [r for _, r, err in results if err is None]
    failures = [{"cell": asdict(c), **err} for c, _, err in results if err is not None]
    return {"reports": reports, "failures": failures, "seeds": list(seeds),
            "summary": summarize(reports)}


def summarize(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.method, r.scenario, r.rho, r.pi), []).append(r)
    rows = []
    for (method, scenario, rho, pi), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.seed)
        acc = np.array([r.acc_mean_class for r in rs])
        std = np.array([r.pred_std for r in rs])
        rows.append({"method": method, "scenario": scenario, "rho": rho, "pi": pi,
                     "seeds": [r.seed for r in rs],
                     "acc_mean": float(acc.mean()), "acc_std": float(acc.std()),
                     "acc_median": float(np.median(acc)),
                     "pred_std_mean": float(std.mean()), "pred_std_median": float(np.median(std))})
    return rows


def format_summary(rows) -> str:
    lines = [f"{'method':<22}{'scenario':<10}{'rho':>6}{'pi':>6}  {'acc (mean ± std)':<18}{'pred STD':>9}"]
    for r in rows:
        rho = "-" if r["rho"] is None else f"{r['rho']:g}"
        pi = "-" if r["pi"] is None else f"{r['pi']:g}"
        acc = f"{100 * r['acc_mean']:.1f} ± {100 * r['acc_std']:.1f}"
        lines.append(f"{r['method']:<22}{r['scenario']:<10}{rho:>6}{pi:>6}  {acc:<18}{r['pred_std_mean']:>9.1f}")
    return "\n".join(lines)


# --- report files ---------------------------------------------------------------------

def emit_report(reports, path, fmt="json-lines"):
    """Write one record per episode. CSV columns are :data:`REPORT_FIELDS`."""
    records = [r.record() if isinstance(r, EpisodeReport) else r for r in reports]
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh)
                writer.writerow(REPORT_FIELDS)
                for rec in records:
                    writer.writerow(["" if rec[k] is None else
                                     (format(rec[k], ".12g") if isinstance(rec[k], float) else rec[k])
                                     for k in REPORT_FIELDS])
            elif fmt == "json-lines":
                for rec in records:
                    fh.write(dumps({k: rec[k] for k in REPORT_FIELDS}, digits=12) + "\n")
            else:
                raise ConfigError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise InputError(f"cannot write report to {path}: {exc}") from exc
    return path


_INT_FIELDS = {"B", "seed", "pred_range"}
_STR_FIELDS = {"method", "scenario"}


def read_report(path, fmt="json-lines"):
    with open(path, newline="") as fh:
        if fmt == "json-lines":
            return [json.loads(line) for line in fh if line.strip()]
        out = []
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k in _STR_FIELDS:
                    rec[k] = v
                elif v == "":
                    rec[k] = None
                else:
                    rec[k] = int(v) if k in _INT_FIELDS else float(v)
            out.append(rec)
        return out
