"""Training loop, k-fold cross-validation and ablation runs."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graphs import Dataset, GraphInstance, make_folds
from .model import ModelConfig, forward, init_params
from .objectives import LossBreakdown, MarginConfig, ObjectiveConfig, total_objective
from .tensor import ParamStore

logger = logging.getLogger(__name__)

SHARED = "shared"
CSTAR = "cstar"
PER_FOLD = "per-fold"

HOLDOUT_CAVEAT = ("model selection and reported accuracy both use the held-out fold "
                  "(no separate test split), following the benchmark protocol")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, fold: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.fold = fold
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    criterion: str = SHARED

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.criterion not in (SHARED, CSTAR):
            raise ValueError(f"criterion must be {SHARED!r} or {CSTAR!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    margin: MarginConfig = MarginConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    train: TrainConfig = TrainConfig()


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = self.params.grad[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def graph_loss(graph: GraphInstance, params: ParamStore, cfg: ExperimentConfig) -> LossBreakdown:
    fwd = forward(graph, params, cfg.model)
    return total_objective(graph, fwd, params, cfg.margin, cfg.objective)


def accuracy(graphs: Sequence[GraphInstance], params: ParamStore,
             config: ModelConfig) -> tuple[float, np.ndarray]:
    """Fraction correct and the predicted class of every graph."""
    preds = np.array([forward(g, params, config).prediction for g in graphs], dtype=int)
    labels = np.array([g.label for g in graphs], dtype=int)
    return float(np.mean(preds == labels)) if len(graphs) else 0.0, preds


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return cm


@dataclass
class FoldResult:
    eval_accuracy: np.ndarray            # per epoch
    eval_predictions: np.ndarray         # epochs x eval graphs
    eval_labels: np.ndarray
    params: dict[str, np.ndarray]        # after the last epoch
    train_accuracy: np.ndarray | None = None
    mean_loss: np.ndarray | None = None  # per epoch, over training graphs


def train_fold(train_graphs: Sequence[GraphInstance], eval_graphs: Sequence[GraphInstance],
               cfg: ExperimentConfig, seed: int, *, track_train_accuracy: bool = False,
               fold: int | None = None,
               on_epoch: Callable[[int, ParamStore], None] | None = None) -> FoldResult:
    """Train from a fresh initialization and score ``eval_graphs`` after every epoch.

    Each epoch shuffles the training graphs, accumulates per-graph gradients
    over each batch and takes one Adam step per batch.
    """
    if {id(g) for g in train_graphs} & {id(g) for g in eval_graphs}:
        raise ValueError("train and eval sets overlap")
    tc = cfg.train
    params = init_params(cfg.model, seed)
    opt = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng([seed, 1])
    n_train = len(train_graphs)
    eval_acc = np.zeros(tc.epochs)
    eval_preds = np.zeros((tc.epochs, len(eval_graphs)), dtype=int)
    train_acc = np.zeros(tc.epochs) if track_train_accuracy else None
    losses = np.zeros(tc.epochs)

    for epoch in range(tc.epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, tc.batch_size):
            params.zero_grad()
            for idx in order[start:start + tc.batch_size]:
                with T.Tape() as tape:
                    loss = graph_loss(train_graphs[idx], params, cfg).total
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch + 1}, batch {start // tc.batch_size + 1}"
                        + (f", fold {fold}" if fold is not None else ""),
                        fold=fold, epoch=epoch + 1)
                T.backward(tape, loss, params)
                total += value
            opt.step()
        losses[epoch] = total / max(n_train, 1)
        eval_acc[epoch], eval_preds[epoch] = accuracy(eval_graphs, params, cfg.model)
        if train_acc is not None:
            train_acc[epoch], _ = accuracy(train_graphs, params, cfg.model)
        if on_epoch is not None:
            on_epoch(epoch, params)
        logger.debug("fold %s epoch %d loss %.4f eval acc %.4f",
                     fold, epoch + 1, losses[epoch], eval_acc[epoch])

    return FoldResult(eval_acc, eval_preds, np.array([g.label for g in eval_graphs]),
                      params.snapshot(), train_acc, losses)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvReport:
    accuracy_grid: np.ndarray                # folds x epochs
    criterion: str
    selected_epoch: int | str                # 1-based, or "per-fold" for C*
    fold_accuracies: np.ndarray
    fold_epochs: np.ndarray                  # 1-based epoch used per fold
    confusion: list[np.ndarray]
    seed: int
    config_hash: str = ""
    wall_time: float = 0.0
    fold_params: list[dict] = field(default_factory=list, repr=False)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.fold_accuracies))

    @property
    def k(self) -> int:
        return self.accuracy_grid.shape[0]


def select_epoch(grid: np.ndarray, criterion: str) -> tuple[int | str, np.ndarray, np.ndarray]:
    """Apply an epoch-selection rule to a folds x epochs accuracy grid.

    Returns (selected epoch, per-fold accuracies, per-fold 0-based epochs).
    ``shared`` picks the single epoch with the best mean over folds (earliest
    on ties); ``cstar`` takes every fold's own best epoch.
    """
    grid = np.asarray(grid, dtype=float)
    if criterion == SHARED:
        best = int(np.argmax(grid.mean(axis=0)))
        return best + 1, grid[:, best].copy(), np.full(grid.shape[0], best)
    if criterion == CSTAR:
        per_fold = np.argmax(grid, axis=1)
        return PER_FOLD, grid[np.arange(grid.shape[0]), per_fold], per_fold
    raise ValueError(f"unknown criterion {criterion!r}")


def summarize(grid: np.ndarray, predictions: Sequence[np.ndarray], labels: Sequence[np.ndarray],
              num_classes: int, criterion: str, seed: int, config_hash: str = "",
              wall_time: float = 0.0, fold_params=()) -> CvReport:
    selected, fold_acc, fold_epochs = select_epoch(grid, criterion)
    confusion = [confusion_matrix(labels[i], predictions[i][fold_epochs[i]], num_classes)
                 for i in range(len(labels))]
    return CvReport(np.asarray(grid, dtype=float), criterion, selected, fold_acc,
                    fold_epochs + 1, confusion, seed, config_hash, wall_time, list(fold_params))


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args) -> tuple[int, FoldResult]:
    dataset, train_idx, eval_idx, cfg, seed, fold = args
    train = [dataset.graphs[i] for i in train_idx]
    held = [dataset.graphs[i] for i in eval_idx]
    return fold, train_fold(train, held, cfg, _fold_seed(seed, fold), fold=fold)


def run_folds(dataset: Dataset, k: int, cfg: ExperimentConfig, seed: int,
              threads: int = 1) -> list[FoldResult]:
    plan = make_folds(dataset, k, seed)
    jobs = [(dataset, *plan.split(f), cfg, seed, f) for f in range(k)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            done = dict(pool.map(_run_fold, jobs))
    else:
        done = dict(_run_fold(j) for j in jobs)
    return [done[f] for f in range(k)]


def cross_validate(dataset: Dataset, k: int, cfg: ExperimentConfig, seed: int | None = None,
                   criterion: str | None = None, threads: int = 1,
                   config_hash: str = "") -> CvReport:
    seed = cfg.train.seed if seed is None else seed
    criterion = criterion or cfg.train.criterion
    start = time.perf_counter()
    folds = run_folds(dataset, k, cfg, seed, threads)
    grid = np.stack([f.eval_accuracy for f in folds])
    return summarize(grid, [f.eval_predictions for f in folds], [f.eval_labels for f in folds],
                     dataset.num_classes, criterion, seed, config_hash,
                     time.perf_counter() - start, [f.params for f in folds])


ABLATIONS = {
    "A1": {"disentangle": False},
    "A2": {"residual": False},
    "A3": {"recon": False},
}


def apply_ablation(cfg: ExperimentConfig, name: str | None) -> ExperimentConfig:
    if not name or name == "full":
        return cfg
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    flags = ABLATIONS[name]
    if "recon" in flags:
        return replace(cfg, objective=replace(cfg.objective, recon_enabled=False))
    return replace(cfg, model=replace(cfg.model, **flags))


def ablation_suite(dataset: Dataset, k: int, cfg: ExperimentConfig, seed: int | None = None,
                   criterion: str | None = None, threads: int = 1) -> dict[str, CvReport]:
    """Full model plus A1 (no disentanglement), A2 (no residual), A3 (no reconstruction)."""
    out = {}
    for name in ("full", *ABLATIONS):
        logger.info("ablation %s", name)
        out[name] = cross_validate(dataset, k, apply_ablation(cfg, name), seed, criterion, threads)
    return out


# ---------------------------------------------------------------------------
# report files


def grid_tsv(report: CvReport) -> str:
    k, epochs = report.accuracy_grid.shape
    lines = ["epoch\t" + "\t".join(f"fold_{i}" for i in range(k))]
    for e in range(epochs):
        lines.append(f"{e + 1}\t" + "\t".join(repr(float(a)) for a in report.accuracy_grid[:, e]))
    return "\n".join(lines) + "\n"


def read_grid_tsv(text: str) -> np.ndarray:
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows]).T


def report_kv(report: CvReport) -> str:
    pairs = [
        ("criterion", report.criterion),
        ("selected_epoch", report.selected_epoch),
        ("mean_accuracy", repr(report.mean_accuracy)),
        ("std_accuracy", repr(report.std_accuracy)),
        ("folds", report.k),
    ]
    for i, (acc, ep) in enumerate(zip(report.fold_accuracies, report.fold_epochs)):
        pairs.append((f"fold_{i}_accuracy", repr(float(acc))))
        pairs.append((f"fold_{i}_epoch", int(ep)))
    pairs += [("seed", report.seed), ("config_hash", report.config_hash),
              ("wall_time", f"{report.wall_time:.3f}")]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def report_text(report: CvReport, title: str = "") -> str:
    label = {SHARED: "shared epoch (best mean over folds)",
             CSTAR: "C* (best epoch per fold)"}[report.criterion]
    lines = []
    if title:
        lines.append(title)
    lines += [
        f"criterion: {label}",
        f"selected epoch: {report.selected_epoch}",
        f"accuracy: {100 * report.mean_accuracy:.2f} +- {100 * report.std_accuracy:.2f} "
        f"({report.k} folds, population std)",
        f"seed: {report.seed}",
        f"config hash: {report.config_hash}",
        f"wall time: {report.wall_time:.1f}s",
        f"note: {HOLDOUT_CAVEAT}",
        "",
        "fold  epoch  accuracy  confusion (rows = true class)",
    ]
    for i, (acc, ep, cm) in enumerate(zip(report.fold_accuracies, report.fold_epochs,
                                          report.confusion)):
        rows = " | ".join(" ".join(str(v) for v in row) for row in cm)
        lines.append(f"{i:>4}  {int(ep):>5}  {acc:8.4f}  {rows}")
    return "\n".join(lines) + "\n"


def write_report(report: CvReport, out_dir, title: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report_text(report, title))
    (out / "report.kv").write_text(report_kv(report))
    (out / "accuracy_grid.tsv").write_text(grid_tsv(report))


def ablation_table(reports: dict[str, CvReport]) -> str:
    lines = ["variant\tseed\tselected_epoch\tmean_accuracy\tstd_accuracy\tcstar_mean\tcstar_std"]
    for name, rep in reports.items():
        _, cstar, _ = select_epoch(rep.accuracy_grid, CSTAR)
        lines.append(f"{name}\t{rep.seed}\t{rep.selected_epoch}\t{rep.mean_accuracy:.6f}\t"
                     f"{rep.std_accuracy:.6f}\t{np.mean(cstar):.6f}\t{np.std(cstar):.6f}")
    return "\n".join(lines) + "\n"
