"""Supervised training, ground-truth evaluation and the replication harness.

The training protocol: a validation set of size N/4 drawn alongside the N
training pairs, minibatches of 128, Adam (lr 1e-3, betas 0.9/0.99), at most
1000 epochs, early stopping on the full validation risk with the best
weights restored.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from nqnet import heads, nn, seeding, simdata
from nqnet.losses import LossSpec, empirical_risk

log = logging.getLogger(__name__)

GRID_LEVELS = tuple(round(0.05 * k, 2) for k in range(1, 20))
NQ_KINDS = (heads.NQ_ELU, heads.NQ_RELU)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    head_kind: str = heads.NQ_ELU
    levels: tuple = GRID_LEVELS
    hidden: tuple | None = None  # None: (128,)*3 for 1-D inputs, (256,)*3 otherwise
    trunk: str | None = None  # "shared" or "parallel"; None: parallel for NQ heads
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 50
    loss: LossSpec = field(default_factory=LossSpec)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0

    def __post_init__(self):
        heads.check_kind(self.head_kind)
        heads.check_levels(self.levels)
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must all be >= 1")
        if self.hidden is not None and any(int(w) < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.trunk not in (None, "shared", "parallel"):
            raise ValueError(f"trunk must be 'shared' or 'parallel', got {self.trunk!r}")
        if self.trunk == "parallel" and self.head_kind not in NQ_KINDS:
            raise ValueError("a parallel layout is defined for the NQ heads only")

    @property
    def K(self) -> int:
        return len(self.levels)

    @property
    def layout(self) -> str:
        if self.trunk is not None:
            return self.trunk
        return "parallel" if self.head_kind in NQ_KINDS else "shared"

    def hidden_for(self, input_dim: int) -> tuple:
        if self.hidden is not None:
            return tuple(int(w) for w in self.hidden)
        return (128,) * 3 if input_dim == 1 else (256,) * 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["hidden"] = None if self.hidden is None else list(self.hidden)
        return d


@dataclass
class Predictor:
    """A fitted network plus the head that turns its output into quantiles."""

    net: nn.DenseNet | nn.ParallelNet
    head_kind: str
    levels: np.ndarray

    def fan(self, X) -> heads.QuantileFan:
        raw, _ = nn.forward(self.net, X)
        return heads.head_forward(self.head_kind, raw)

    def predict(self, X, chunk: int = 20000) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        parts = [self.fan(X[i:i + chunk]).f for i in range(0, len(X), chunk)]
        return np.concatenate(parts, axis=0)

    __call__ = predict


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)  # index 0 is the initial network
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    seconds: float = 0.0


@dataclass
class EvalReport:
    levels: np.ndarray
    l1: np.ndarray
    l2sq: np.ndarray
    crossing_fraction: float
    min_gap: float
    T: int
    seconds: float = 0.0
    history: TrainReport | None = None

    def to_dict(self) -> dict:
        return {
            "levels": list(map(float, self.levels)),
            "l1": list(map(float, self.l1)),
            "l2sq": list(map(float, self.l2sq)),
            "crossing_fraction": float(self.crossing_fraction),
            "min_gap": float(self.min_gap),
            "T": int(self.T),
            "seconds": self.seconds,
        }


# generic minibatch loop ------------------------------------------------------

Objective = Callable[..., "tuple[float, np.ndarray]"]


def fit_net(net: nn.DenseNet | nn.ParallelNet, X, aux: Sequence[np.ndarray], X_val, aux_val: Sequence[np.ndarray],
            objective: Objective, cfg: TrainConfig, seed: int | None = None,
            ) -> tuple[nn.DenseNet | nn.ParallelNet, TrainReport]:
    """Minimise ``objective(raw_output, *aux_rows)`` over ``net`` with Adam.

    ``objective`` returns the mean loss over the rows it is given and the
    gradient of that loss w.r.t. the raw network output. Validation risk is
    computed on the full validation set after every epoch; training stops
    after ``cfg.patience`` epochs without improvement and the best-scoring
    parameters are returned.
    """
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    n = len(X)
    state = nn.adam_init(net, cfg.lr, cfg.beta1, cfg.beta2)
    report = TrainReport()

    def full_loss(X_, aux_):
        if len(X_) == 0:
            return np.nan
        raw, _ = nn.forward(net, X_)
        return objective(raw, *aux_)[0]

    report.train_loss.append(full_loss(X, aux))
    best_val = full_loss(X_val, aux_val)
    report.val_loss.append(best_val)
    best_net, best_epoch, since_best = net, 0, 0
    has_val = len(X_val) > 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = seeding.stream(seed, seeding.SHUFFLE, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            raw, cache = nn.forward(net, X[idx])
            loss, draw = objective(raw, *(a[idx] for a in aux))
            if not np.isfinite(loss) or not np.all(np.isfinite(draw)):
                raise TrainingDiverged(epoch)
            grads = nn.backward(net, cache, draw)
            net, state = nn.adam_step(net, grads, state)

        train_loss = full_loss(X, aux)
        if not np.isfinite(train_loss):
            raise TrainingDiverged(epoch)
        report.train_loss.append(train_loss)
        monitor = full_loss(X_val, aux_val) if has_val else train_loss
        report.val_loss.append(monitor if has_val else np.nan)
        if monitor < best_val or not np.isfinite(best_val):
            best_val, best_net, best_epoch, since_best = monitor, net, epoch, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    report.best_epoch = best_epoch
    report.stop_epoch = epoch
    report.seconds = time.perf_counter() - t0
    return best_net, report


def quantile_objective(head_kind: str, levels, loss: LossSpec) -> Objective:
    levels = np.asarray(levels, dtype=np.float64)

    def objective(raw, y):
        fan = heads.head_forward(head_kind, raw)
        risk, dfan = empirical_risk(levels, fan.f, y, loss)
        return risk, heads.head_backward(fan, dfan)

    return objective


def build_net(config: TrainConfig, input_dim: int) -> nn.DenseNet | nn.ParallelNet:
    """Fresh network for ``config``: one trunk, or separate mean and gaps nets."""
    hidden = config.hidden_for(input_dim)
    width = heads.raw_width(config.head_kind, config.K)
    if config.layout == "parallel":
        return nn.init_parallel(input_dim, hidden, (1, width - 1), config.seed)
    return nn.init_net([input_dim, *hidden, width], config.seed)


def fit_arrays(X, Y, X_val, Y_val, config: TrainConfig) -> tuple[Predictor, TrainReport]:
    """Train a quantile network on explicit training/validation arrays."""
    X = np.asarray(X, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    X_val = np.asarray(X_val, dtype=np.float64).reshape(-1, X.shape[1])
    net = build_net(config, X.shape[1])
    objective = quantile_objective(config.head_kind, config.levels, config.loss)
    net, report = fit_net(net, X, (np.asarray(Y, float),), X_val, (np.asarray(Y_val, float),),
                          objective, config)
    return Predictor(net, config.head_kind, np.asarray(config.levels, dtype=np.float64)), report


def train(model, n: int, config: TrainConfig) -> tuple[Predictor, TrainReport]:
    """Draw N training and N/4 validation pairs from ``model`` and fit."""
    if n < 8:
        raise ValueError("need at least 8 training samples")
    model = simdata.get_model(model)
    data = simdata.sample(model, n, config.seed, seeding.DATA)
    val = simdata.sample(model, max(1, n // 4), config.seed, seeding.VALID)
    return fit_arrays(data.X, data.Y, val.X, val.Y, config)


def error_metrics(pred, truth) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Per-level L1 and squared-L2 errors, crossing fraction and smallest adjacent gap."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    diff = pred - truth
    l1 = np.abs(diff).mean(axis=0)
    l2sq = (diff * diff).mean(axis=0)
    crossing = float(heads.crossing_mask(pred).mean())
    min_gap = float(np.diff(pred, axis=1).min()) if pred.shape[1] > 1 else float("inf")
    return l1, l2sq, crossing, min_gap


def evaluate(predictor, model, T: int, seed: int, levels=None) -> EvalReport:
    """Compare a predictor with the true quantiles on a fresh size-T test draw.

    ``predictor`` is any callable mapping an ``(T, d)`` input array to a
    ``(T, K)`` array of quantile predictions.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    t0 = time.perf_counter()
    model = simdata.get_model(model)
    levels = np.asarray(levels if levels is not None else predictor.levels, dtype=np.float64)
    test = simdata.sample(model, T, seed, seeding.TEST)
    pred = np.asarray(predictor(test.X), dtype=np.float64)
    truth = model.quantiles(test.X, levels)
    l1, l2sq, crossing, min_gap = error_metrics(pred, truth)
    return EvalReport(levels, l1, l2sq, crossing, min_gap, T, time.perf_counter() - t0)


# replication harness -----------------------------------------------------------

SUMMARY_COLUMNS = ("model", "method", "N", "tau", "l1_mean", "l1_std", "l2sq_mean", "l2sq_std",
                   "crossing_fraction_mean", "runs_completed")


@dataclass
class RunResult:
    model: str
    method: str
    N: int
    replicate: int
    seed: int
    report: EvalReport | None
    error: str | None = None

    def log_record(self, config: TrainConfig) -> dict:
        rec = {"model": self.model, "method": self.method, "N": self.N, "replicate": self.replicate,
               "seed": self.seed, "config": config.to_dict(), "error": self.error}
        if self.report is not None:
            rec.update(self.report.to_dict())
            h = self.report.history
            if h is not None:
                rec.update(train_loss=[float(x) for x in h.train_loss],
                           val_loss=[float(x) for x in h.val_loss],
                           best_epoch=h.best_epoch, stop_epoch=h.stop_epoch,
                           train_seconds=h.seconds)
        return rec


@dataclass
class ReplicationSummary:
    rows: list
    runs: list
    failures: int
    R: int

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in SUMMARY_COLUMNS})
        return path

    def cell(self, model: str, method: str, N: int | None = None) -> list:
        return [r for r in self.rows if r["model"] == model and r["method"] == method
                and (N is None or r["N"] == N)]

    def to_table(self, model: str, metric: str = "l1", N: int | None = None) -> str:
        """Row-per-level, column-per-method text table of ``mean(std)`` entries."""
        methods = list(dict.fromkeys(r["method"] for r in self.rows if r["model"] == model))
        by_method = {m: {r["tau"]: r for r in self.cell(model, m, N)} for m in methods}
        taus = sorted({t for cells in by_method.values() for t in cells})
        lines = ["tau    " + "".join(f"{m:>16}" for m in methods)]
        for t in taus:
            entries = []
            for m in methods:
                r = by_method[m].get(t)
                entries.append("-" if r is None else
                               f"{r[metric + '_mean']:.3f}({r[metric + '_std']:.3f})")
            lines.append(f"{t:<7g}" + "".join(f"{e:>16}" for e in entries))
        return "\n".join(lines)


def _std(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _run_one(job) -> RunResult:
    model_id, method, N, r, seed, base_cfg, T = job
    cfg = replace(base_cfg, head_kind=method, seed=seed)
    try:
        predictor, history = train(model_id, N, cfg)
        report = evaluate(predictor, model_id, T, seed)
        report.history = history
        return RunResult(model_id, method, N, r, seed, report)
    except (TrainingDiverged, FloatingPointError) as exc:
        log.warning("run %s/%s/N=%d/r=%d failed: %s", model_id, method, N, r, exc)
        return RunResult(model_id, method, N, r, seed, None, str(exc))


def replicate(models, methods, N: int, R: int, base_seed: int, config: TrainConfig | None = None,
              T: int = 100_000, workers: int = 1, log_path=None) -> ReplicationSummary:
    """R independent (data, init) replicates of every (model, method) cell.

    Within one replicate all methods see the same training, validation and
    test data. Results are merged in job order, so the summary does not
    depend on ``workers``.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    config = config or TrainConfig()
    models = [simdata.get_model(m).model_id for m in models]
    methods = [heads.check_kind(m) for m in methods]
    jobs = []
    for model_id in models:
        for r in range(R):
            seed = seeding.derive(base_seed, simdata.MODEL_IDS.index(model_id), N, r)
            for method in methods:
                jobs.append((model_id, method, N, r, seed, config, T))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]

    if log_path is not None:
        with open(log_path, "w") as fh:
            for run in runs:
                fh.write(json.dumps(run.log_record(replace(config, head_kind=run.method,
                                                           seed=run.seed))) + "\n")

    rows = []
    levels = np.asarray(config.levels)
    for model_id in models:
        for method in methods:
            done = [x.report for x in runs
                    if x.model == model_id and x.method == method and x.report is not None]
            for k, tau in enumerate(levels):
                l1 = [rep.l1[k] for rep in done]
                l2 = [rep.l2sq[k] for rep in done]
                rows.append({
                    "model": model_id, "method": method, "N": N, "tau": float(tau),
                    "l1_mean": float(np.mean(l1)) if done else float("nan"),
                    "l1_std": _std(l1),
                    "l2sq_mean": float(np.mean(l2)) if done else float("nan"),
                    "l2sq_std": _std(l2),
                    "crossing_fraction_mean":
                        float(np.mean([rep.crossing_fraction for rep in done])) if done else float("nan"),
                    "runs_completed": len(done),
                })
    failures = sum(x.report is None for x in runs)
    return ReplicationSummary(rows, runs, failures, R)
