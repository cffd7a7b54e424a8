"""Two-stage LLP training: a DLLP warm start, then alternating OT pseudo-labeling
and robust supervised training (plus the PEOT variant with a Frobenius stopping
rule)."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .llp_data import LabeledDataset, LLPDataset
from .model import AdamState, MlpClassifier, adam_step, ce_loss, dllp_loss, mixup, sce_loss
from .ot_core import SinkhornConfig
from .pseudo_label import (
    NotConvergedError,
    PseudoLabelMatrix,
    assign_hard,
    assign_hard_exact,
    assign_soft,
    ensemble_average,
)

log = logging.getLogger(__name__)

OT_MODES = ("soft", "hard", "hard_exact", "none")
STAGE2_METHODS = ("plot", "peot")
LOSS_MODES = ("ce", "sce")
TD_OT_WINDOW = 5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 200
    stage2_epochs: int = 100
    minibatch_bags: int = 4
    stage2_method: str = "plot"
    lam: float = 25.0
    sinkhorn_max_iter: int = 10_000
    sinkhorn_tol: float = 1e-9
    log_domain: bool = True
    ot_mode: str = "soft"
    loss_mode: str = "sce"
    sce_alpha: float = 1.0
    sce_beta: float = 1.0
    rce_log_zero: float = -4.0
    use_mixup: bool = False
    mixup_alpha: float = 1.0
    ensemble_window: int = 1
    outer_tol: float = 1e-3
    peot_max_outer: int = 50
    peot_inner_steps: int = 50
    lr: float = 1e-3
    lr_halve_every: int = 100
    beta1: float = 0.5
    beta2: float = 0.999
    hidden: tuple = (32, 32, 32)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        problems = []
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            problems.append("epochs must be >= 0")
        if self.minibatch_bags < 1:
            problems.append("minibatch_bags must be >= 1")
        if not self.lam > 0:
            problems.append("lam must be > 0")
        if self.stage2_method not in STAGE2_METHODS:
            problems.append(f"stage2_method must be one of {STAGE2_METHODS}")
        if self.ot_mode not in OT_MODES:
            problems.append(f"ot_mode must be one of {OT_MODES}")
        if self.loss_mode not in LOSS_MODES:
            problems.append(f"loss_mode must be one of {LOSS_MODES}")
        if not self.outer_tol > 0:
            problems.append("outer_tol must be > 0")
        if self.ensemble_window < 1:
            problems.append("ensemble_window must be >= 1")
        if not self.lr >= 0 or self.lr_halve_every < 1:
            problems.append("lr must be >= 0 and lr_halve_every >= 1")
        if self.sce_alpha < 0 or self.sce_beta < 0 or self.sce_alpha + self.sce_beta == 0:
            problems.append("sce_alpha/sce_beta must be >= 0 and not both 0")
        if self.use_mixup and not self.mixup_alpha > 0:
            problems.append("mixup_alpha must be > 0")
        if not self.hidden or min(self.hidden) < 1:
            problems.append("hidden widths must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(
            lam=self.lam, max_iter=self.sinkhorn_max_iter, tol=self.sinkhorn_tol, log_domain=self.log_domain
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch within a stage (halved every ``lr_halve_every``)."""
        return self.lr * 0.5 ** ((epoch - 1) // self.lr_halve_every)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    loss: float
    td: float
    td_ot: float = math.nan
    td_ot_5: float = math.nan
    test_acc: float = math.nan
    delta: float = math.nan
    wall_time: float = 0.0


CSV_FIELDS = ("stage", "epoch", "loss", "td", "td_ot", "td_ot_5", "test_acc", "delta")


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    converged: bool | None = None
    final_labels: PseudoLabelMatrix | None = None

    def add(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must be strictly increasing")
        self.records.append(rec)

    def next_epoch(self) -> int:
        return self.records[-1].epoch + 1 if self.records else 1

    def stage(self, name: str) -> list:
        return [r for r in self.records if r.stage == name]

    def write_csv(self, path) -> None:
        """One row per epoch. Wall time is left out so reruns are byte-identical."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def read_metrics_csv(path) -> RunMetrics:
    metrics = RunMetrics()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            metrics.records.append(
                EpochRecord(
                    stage=row["stage"],
                    epoch=int(row["epoch"]),
                    **{k: float(row[k]) for k in CSV_FIELDS[2:]},
                )
            )
    return metrics


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray


def evaluate(model: MlpClassifier, data: LabeledDataset) -> EvalResult:
    """Argmax accuracy (ties to the lowest class), per-class recall and confusion matrix."""
    if data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model has {model.num_classes}")
    pred = model.predict(data.features)
    K = data.num_classes
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (data.labels, pred), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    return EvalResult(float(np.mean(pred == data.labels)), per_class, confusion)


def pseudo_label_accuracy(Q: PseudoLabelMatrix, labels) -> float:
    """Fraction of instances whose block-column argmax equals the hidden label."""
    labels = np.asarray(labels)
    stacked = Q.stacked()
    if stacked.shape[0] != labels.size:
        raise ValueError(f"{stacked.shape[0]} pseudo-labels for {labels.size} hidden labels")
    return float(np.mean(np.argmax(stacked, axis=1) == labels))


def inject_label_noise(Q: PseudoLabelMatrix, rate: float, seed: int = 0) -> PseudoLabelMatrix:
    """Harden ``Q`` and move a ``rate`` fraction of instances to a different random class."""
    rng = np.random.default_rng(seed)
    blocks = [assign_hard(b) for b in Q.blocks]
    K = blocks[0].shape[0]
    where = [(b, j) for b, block in enumerate(blocks) for j in range(block.shape[1])]
    n_flip = int(round(rate * len(where)))
    for idx in rng.choice(len(where), size=n_flip, replace=False):
        b, j = where[idx]
        old = int(np.argmax(blocks[b][:, j]))
        new = (old + rng.integers(1, K)) % K
        blocks[b][:, j] = 0.0
        blocks[b][new, j] = 1.0
    return PseudoLabelMatrix(blocks, mode="hard")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PLOT_THREADS", "1")))
    except ValueError:
        return 1


def _map_bags(fn, n_bags):
    n_threads = _threads()
    if n_threads == 1:
        return [fn(i) for i in range(n_bags)]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, range(n_bags)))


def bag_posteriors(model: MlpClassifier, llp: LLPDataset) -> list:
    """``K x n_i`` posterior block for every bag."""
    probs = model.forward(llp.features[llp.instance_indices()])
    out, start = [], 0
    for bag in llp.bags:
        out.append(probs[start : start + bag.size].T)
        start += bag.size
    return out


def _accuracy_of_blocks(blocks, labels) -> float:
    return float(np.mean(np.concatenate([np.argmax(b, axis=0) for b in blocks]) == labels))


def _rng(seed, stage, epoch):
    return np.random.default_rng([seed, stage, epoch])


def _check_loss(value, stage, epoch):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{stage} loss became {value} at epoch {epoch}")


def soft_labels(model: MlpClassifier, llp: LLPDataset, cfg: TrainConfig, metrics=None) -> PseudoLabelMatrix:
    """One entropic OT pass over every bag at the current model."""
    posts = bag_posteriors(model, llp)
    sk = cfg.sinkhorn

    def solve(i):
        return assign_soft(posts[i], llp.bags[i].proportions, sk, strict=False)

    return PseudoLabelMatrix(_map_bags(solve, llp.num_bags), mode="soft")


def stage1_dllp(model: MlpClassifier, llp: LLPDataset, cfg: TrainConfig, test=None, metrics=None, hook=None):
    """Minimize the bag-level KL loss, then produce first pseudo-labels by entropic OT.

    Returns ``(model, Q0)``; per-epoch records are appended to ``metrics``.
    ``hook(stage, epoch, model)`` runs after every epoch when given.
    """
    metrics = metrics if metrics is not None else RunMetrics()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    labels = llp.evaluation_labels()
    for epoch in range(1, cfg.stage1_epochs + 1):
        t0 = time.perf_counter()
        state.lr = cfg.lr_at(epoch)
        order = _rng(cfg.seed, 1, epoch).permutation(llp.num_bags)
        losses = []
        for start in range(0, llp.num_bags, cfg.minibatch_bags):
            batch = order[start : start + cfg.minibatch_bags]
            res = dllp_loss(
                model,
                [llp.bag_features(i) for i in batch],
                np.stack([llp.bags[i].proportions for i in batch]),
            )
            _check_loss(res.value, "stage1", epoch)
            adam_step(model, res.grads, state)
            losses.append(res.value)
        posts = bag_posteriors(model, llp)
        metrics.add(
            EpochRecord(
                stage="stage1",
                epoch=metrics.next_epoch(),
                loss=float(np.mean(losses)),
                td=_accuracy_of_blocks(posts, labels),
                test_acc=evaluate(model, test).accuracy if test is not None else math.nan,
                wall_time=time.perf_counter() - t0,
            )
        )
        if hook is not None:
            hook("stage1", epoch, model)
    Q0 = soft_labels(model, llp, cfg)
    return model, Q0


def _refresh_block(cfg, post, props, history, sk):
    """New OT block for one bag and the training target derived from it."""
    if cfg.ot_mode == "none":
        block = post
    elif cfg.ot_mode == "hard_exact":
        block = assign_hard_exact(post, props, cfg=sk)
    else:
        block = assign_soft(post, props, sk)
    history.append(block)
    target = ensemble_average(history, cfg.ensemble_window)
    if cfg.ot_mode == "hard":
        target = assign_hard(target)
    elif cfg.ot_mode == "hard_exact" and cfg.ensemble_window > 1:
        # re-solve on the averaged labels so the exact class counts survive averaging
        target = assign_hard_exact(target, props, cfg=sk)
    return block, target


def stage2_plot(
    model: MlpClassifier, llp: LLPDataset, Q0: PseudoLabelMatrix, cfg: TrainConfig, test=None, metrics=None, hook=None
):
    """Alternate supervised epochs on the current pseudo-labels with an OT refresh.

    Every minibatch update of an epoch finishes before that epoch's refresh.
    Returns ``(model, metrics)``; the final targets are in ``metrics.final_labels``.
    """
    metrics = metrics if metrics is not None else RunMetrics()
    if len(Q0.blocks) != llp.num_bags or any(
        b.shape != (llp.num_classes, bag.size) for b, bag in zip(Q0.blocks, llp.bags)
    ):
        raise ValueError("pseudo-label blocks do not match the bags")
    Q = Q0.copy()
    metrics.final_labels = Q
    if cfg.stage2_epochs == 0:
        return model, metrics

    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    labels = llp.evaluation_labels()
    sk = cfg.sinkhorn
    depth = max(TD_OT_WINDOW, cfg.ensemble_window)
    histories = [deque([b.copy()], maxlen=depth) for b in Q0.blocks]
    for epoch in range(1, cfg.stage2_epochs + 1):
        t0 = time.perf_counter()
        state.lr = cfg.lr_at(epoch)
        rng = _rng(cfg.seed, 2, epoch)
        order = rng.permutation(llp.num_bags)
        losses = []
        for start in range(0, llp.num_bags, cfg.minibatch_bags):
            batch = order[start : start + cfg.minibatch_bags]
            X = np.concatenate([llp.bag_features(i) for i in batch])
            T = np.concatenate([Q.blocks[i].T for i in batch])
            if cfg.use_mixup:
                perm = rng.permutation(X.shape[0])
                X, T = mixup(X, T, X[perm], T[perm], cfg.mixup_alpha, rng)
            if cfg.loss_mode == "sce":
                res = sce_loss(model, X, T, cfg.sce_alpha, cfg.sce_beta, cfg.rce_log_zero)
            else:
                res = ce_loss(model, X, T)
            _check_loss(res.value, "stage2", epoch)
            adam_step(model, res.grads, state)
            losses.append(res.value)

        posts = bag_posteriors(model, llp)

        def refresh(i):
            try:
                return _refresh_block(cfg, posts[i], llp.bags[i].proportions, histories[i], sk)
            except NotConvergedError as exc:
                return None, str(exc)

        results = _map_bags(refresh, llp.num_bags)
        fresh = []
        for i, (block, target) in enumerate(results):
            if block is None:
                metrics.events.append(f"epoch {epoch} bag {i}: {target}; kept previous labels")
                log.warning(metrics.events[-1])
                fresh.append(Q.blocks[i])
                continue
            fresh.append(block)
            Q.blocks[i] = target
        Q.mode = "hard" if cfg.ot_mode in ("hard", "hard_exact") else "soft"

        metrics.add(
            EpochRecord(
                stage="stage2",
                epoch=metrics.next_epoch(),
                loss=float(np.mean(losses)),
                td=_accuracy_of_blocks(posts, labels),
                td_ot=_accuracy_of_blocks(fresh, labels),
                td_ot_5=_accuracy_of_blocks(
                    [ensemble_average(h, TD_OT_WINDOW) for h in histories], labels
                ),
                test_acc=evaluate(model, test).accuracy if test is not None else math.nan,
                wall_time=time.perf_counter() - t0,
            )
        )
        if hook is not None:
            hook("stage2", epoch, model)
    return model, metrics


def peot_loop(model: MlpClassifier, llp: LLPDataset, cfg: TrainConfig, test=None, metrics=None, hook=None):
    """Entropic OT labeling alternated with full-data CE fitting.

    Stops once the Frobenius change ``delta`` of the stacked, ``1/n_i``
    scaled posterior matrix drops to ``cfg.outer_tol`` or after
    ``cfg.peot_max_outer`` rounds. ``metrics.converged`` reports which.
    """
    metrics = metrics if metrics is not None else RunMetrics()
    sizes = np.array([b.size for b in llp.bags], dtype=float)
    prev = [p / n for p, n in zip(bag_posteriors(model, llp), sizes)]
    X = llp.features[llp.instance_indices()]
    labels = llp.evaluation_labels()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    sk = cfg.sinkhorn
    delta = math.inf
    rounds = 0
    while delta > cfg.outer_tol and rounds < cfg.peot_max_outer:
        rounds += 1
        t0 = time.perf_counter()
        posts = bag_posteriors(model, llp)
        blocks = []
        for i, post in enumerate(posts):
            try:
                blocks.append(assign_soft(post, llp.bags[i].proportions, sk))
            except NotConvergedError as exc:
                metrics.events.append(f"round {rounds} bag {i}: {exc}")
                blocks.append(exc.block)
        Q = PseudoLabelMatrix(blocks)
        T = Q.stacked()
        loss = math.nan
        for _ in range(cfg.peot_inner_steps):
            res = ce_loss(model, X, T)
            _check_loss(res.value, "peot", rounds)
            adam_step(model, res.grads, state)
            loss = res.value
        current = [p / n for p, n in zip(bag_posteriors(model, llp), sizes)]
        delta = float(np.sqrt(sum(np.sum((c - p) ** 2) for c, p in zip(current, prev))))
        prev = current
        metrics.add(
            EpochRecord(
                stage="peot",
                epoch=metrics.next_epoch(),
                loss=float(loss),
                td=_accuracy_of_blocks(posts, labels),
                td_ot=_accuracy_of_blocks(blocks, labels),
                test_acc=evaluate(model, test).accuracy if test is not None else math.nan,
                delta=delta,
                wall_time=time.perf_counter() - t0,
            )
        )
        if hook is not None:
            hook("peot", rounds, model)
    metrics.converged = bool(delta <= cfg.outer_tol)
    metrics.final_labels = None
    return model, metrics


def new_model(llp: LLPDataset, cfg: TrainConfig) -> MlpClassifier:
    dims = [llp.parent.dim, *cfg.hidden, llp.num_classes]
    return MlpClassifier(dims, seed=cfg.seed)


def _mean(values) -> float:
    return float(np.mean(values)) if values else math.nan


def run_two_stage(llp: LLPDataset, cfg: TrainConfig, test=None, label_noise: float = 0.0, hook=None):
    """Stage 1 then stage 2 from a fresh model; returns ``(model, metrics, summary)``.

    Stage 2 is the per-epoch OT refresh loop, or the Frobenius-stopped
    alternation when ``cfg.stage2_method == "peot"``. ``label_noise`` flips
    that fraction of the stage-1 pseudo-labels before stage 2 starts.
    """
    if not 0 <= label_noise <= 1:
        raise ValueError("label_noise must lie in [0, 1]")
    model = new_model(llp, cfg)
    metrics = RunMetrics()
    model, Q0 = stage1_dllp(model, llp, cfg, test, metrics, hook)
    stage1_test = evaluate(model, test).accuracy if test is not None else math.nan
    labels = llp.evaluation_labels()
    q0_acc = pseudo_label_accuracy(Q0, labels)
    if label_noise > 0:
        Q0 = inject_label_noise(Q0, label_noise, seed=cfg.seed)
    skipped = cfg.stage2_epochs == 0
    if cfg.stage2_method == "peot" and not skipped:
        model, metrics = peot_loop(model, llp, cfg, test, metrics, hook)
        s2 = metrics.stage("peot")
        converged = bool(metrics.converged)
    else:
        model, metrics = stage2_plot(model, llp, Q0, cfg, test, metrics, hook)
        s2 = metrics.stage("stage2")
        converged = not metrics.events
    stage1_losses = [r.loss for r in metrics.stage("stage1")]
    summary = {
        "config": asdict(cfg),
        "stage1": {
            "epochs": cfg.stage1_epochs,
            "first_loss": stage1_losses[0] if stage1_losses else math.nan,
            "final_loss": stage1_losses[-1] if stage1_losses else math.nan,
            "test_accuracy": stage1_test,
            "pseudo_label_accuracy": q0_acc,
        },
        "stage2": {
            "method": cfg.stage2_method,
            "skipped": skipped,
            "epochs": len(s2),
            "converged": converged,
            "test_accuracy": evaluate(model, test).accuracy if test is not None else math.nan,
            "mean_td": _mean([r.td for r in s2]),
            "mean_td_ot": _mean([r.td_ot for r in s2]),
            "mean_td_ot_5": _mean([r.td_ot_5 for r in s2]),
            "label_noise": label_noise,
        },
        "events": list(metrics.events),
    }
    summary["config"]["hidden"] = list(cfg.hidden)
    return model, metrics, summary
