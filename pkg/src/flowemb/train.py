"""Training loop: semi-balanced epochs, AdamW, warmup + cosine schedule, retrieval validation."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassTable, FlowSet, SplitSpec, prepare_eval, select_classes, weighted_subsample_indices
from .metrics import EvalReport, compute_report
from .model import ArcFaceConfig, BackboneConfig, EmbeddingModel, dynamic_margins
from .retrieval import EmbeddingDB, rank, vote_all
from .rng import child_rng

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

# parameters left out of weight decay, by name
EXEMPT_PATTERNS = (
    r"\.bias$",
    r"(^|\.)(bn\d*|skip_bn)\.weight$",
    r"^stem\.size_emb$",
    r"^stem\.ipt_emb$",
    r"^gem\.p$",
)


class NumericalError(FloatingPointError):
    """Non-finite values reached the optimizer."""


def is_decay_exempt(name: str) -> bool:
    return any(re.search(p, name) for p in EXEMPT_PATTERNS)


def audit_decay_exemptions(model: EmbeddingModel) -> None:
    """Check every parameter's exemption flag against the name patterns."""
    wrong = [n for n, p in model.params.items() if p.weight_decay_exempt != is_decay_exempt(n)]
    if wrong:
        raise ValueError(f"weight-decay exemption mismatch: {wrong}")


@dataclass
class TrainConfig:
    epochs: int = 30
    samples_per_epoch: int = 20_000
    batch: int = 256
    lr: float = 0.0025
    warmup_iters: int = 150
    weight_decay: float = 0.0017
    lambda_sampler: float = 0.5
    koleo_weight: float = 1.0
    validate_every: int = 2
    seed: int = 0
    # validation partition inside the validation classes
    val_query_frac: float = 0.4
    val_db_frac: float = 0.3
    lambda_db: float = 0.5
    k: int = 20

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch < 2 or self.samples_per_epoch < 2:
            raise ValueError("epochs >= 1, batch >= 2 and samples_per_epoch >= 2 are required")
        if self.validate_every < 1:
            raise ValueError("validate_every must be >= 1")
        if self.lr <= 0 or self.warmup_iters < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive; warmup and weight decay non-negative")

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(self.samples_per_epoch / self.batch)

    @property
    def total_iters(self) -> int:
        return self.epochs * self.iters_per_epoch


def lr_at(it: int, total_iters: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr/3`` to ``lr`` over ``warmup_iters``, then cosine decay."""
    if not 0 <= it < total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters})")
    w = cfg.warmup_iters
    if it < w:
        return cfg.lr / 3 + (cfg.lr - cfg.lr / 3) * it / w
    span = total_iters - w
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * (it - w) / span))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params, state: OptimizerState, lr: float, weight_decay: float) -> None:
    """One AdamW update in place. ``params`` maps names to ``Parameter`` objects."""
    for name, p in params.items():
        if p.trainable and not np.all(np.isfinite(p.grad)):
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericalError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1 - BETA1 ** t
    c2 = 1 - BETA2 ** t
    for name, p in params.items():
        if not p.trainable:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v, g = state.m[name], state.v[name], p.grad
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        if not p.weight_decay_exempt:
            p.value *= 1 - lr * weight_decay
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.value.dtype)


def epoch_indices(labels: np.ndarray, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Shuffled indices of one epoch's semi-balanced sample.

    When the pool is smaller than ``samples_per_epoch`` the epoch is drawn
    with replacement under the same class weights.
    """
    rng = child_rng(cfg.seed, f"sampler:epoch{epoch}")
    n = len(labels)
    if cfg.samples_per_epoch <= n:
        idx = weighted_subsample_indices(labels, cfg.lambda_sampler, cfg.samples_per_epoch, rng)
    else:
        _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
        w = counts[inverse].astype(np.float64) ** (-cfg.lambda_sampler)
        idx = rng.choice(n, size=cfg.samples_per_epoch, replace=True, p=w / w.sum())
    return idx[rng.permutation(len(idx))]


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    epoch: int
    report: EvalReport | None


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[tuple[int, EvalReport]]
    losses: list[float]
    class_map: np.ndarray

    def metrics_log(self) -> str:
        lines = ["epoch,accuracy,macro_recall,q1,q2,q3,q4"]
        for ep, r in self.history:
            lines.append(f"{ep}," + r.line().split(",", 1)[1])
        return "\n".join(lines) + "\n"


class Trainer:
    """Owns the model and optimizer for one training run."""

    def __init__(
        self,
        flows: FlowSet,
        table: ClassTable,
        train_classes,
        cfg: TrainConfig,
        backbone: BackboneConfig | None = None,
        arc: ArcFaceConfig | None = None,
    ) -> None:
        self.cfg = cfg
        self.class_map = np.array(sorted(int(c) for c in train_classes), dtype=np.int64)
        if len(self.class_map) < 2:
            raise ValueError("training needs at least two classes")
        self.flows = select_classes(flows, self.class_map)
        if len(self.flows) < 2:
            raise ValueError("training set needs at least two flows")
        self.targets = np.searchsorted(self.class_map, self.flows.labels)
        arc = arc or ArcFaceConfig()
        counts = table.count_array()[self.class_map]
        self.margins = dynamic_margins(counts, arc.lambda_margin, arc.m_min, arc.m_max)
        self.model = EmbeddingModel(backbone, len(self.class_map), arc, seed=cfg.seed)
        audit_decay_exemptions(self.model)
        self.opt = OptimizerState()
        self.iteration = 0
        self.dropout_rng = child_rng(cfg.seed, "dropout")

    def train_epoch(self, epoch: int) -> float:
        """One pass over a fresh semi-balanced sample; returns the mean batch loss."""
        cfg = self.cfg
        order = epoch_indices(self.flows.labels, cfg, epoch)
        total = cfg.total_iters
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            if len(idx) < 2:
                # batch statistics and nearest-neighbor terms need two rows
                self.iteration += 1
                continue
            sub = self.flows.subset(idx)
            self.model.zero_grad()
            loss = self.model.loss_and_grad(
                sub.batch(), self.targets[idx], self.margins, cfg.koleo_weight, self.dropout_rng
            )
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at iteration {self.iteration}")
            adamw_step(self.model.params, self.opt, lr_at(min(self.iteration, total - 1), total, cfg), cfg.weight_decay)
            self.iteration += 1
            losses.append(loss)
        return float(np.mean(losses)) if losses else float("nan")


def embed_flows(model: EmbeddingModel, flows: FlowSet, chunk: int = 1024) -> np.ndarray:
    return model.embed(flows.batch(), chunk)


def evaluate(model: EmbeddingModel, database: FlowSet, queries: FlowSet, table: ClassTable, k: int = 20, scheme: str = "top1") -> EvalReport:
    db = EmbeddingDB(embed_flows(model, database), database.labels)
    nb = rank(db, embed_flows(model, queries), k)
    return compute_report(vote_all(nb, db.labels, scheme), queries.labels, table, scheme)


def fit(
    flows: FlowSet,
    table: ClassTable,
    splits: SplitSpec,
    cfg: TrainConfig,
    backbone: BackboneConfig | None = None,
    arc: ArcFaceConfig | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train on the train classes; keep the checkpoint with the best validation macro recall."""
    if not splits.val_classes:
        raise ValueError("no validation classes")
    val_flows = select_classes(flows, splits.val_classes)
    if len(val_flows) == 0:
        raise ValueError("validation classes have no flows")
    n_val = len(val_flows)
    part = prepare_eval(
        val_flows, int(n_val * cfg.val_query_frac), int(n_val * cfg.val_db_frac), cfg.lambda_db, cfg.seed, "validation"
    )
    trainer = Trainer(flows, table, splits.train_classes, cfg, backbone, arc)
    history: list[tuple[int, EvalReport]] = []
    losses: list[float] = []
    best: Checkpoint | None = None
    forbidden = set(splits.test_classes) | set(splits.train_classes)
    for epoch in range(cfg.epochs):
        loss = trainer.train_epoch(epoch)
        losses.append(loss)
        log.info("epoch %d loss %.4f", epoch + 1, loss)
        if (epoch + 1) % cfg.validate_every and epoch + 1 != cfg.epochs:
            continue
        seen = set(np.unique(part.database.labels).tolist()) | set(np.unique(part.queries.labels).tolist())
        assert not seen & forbidden, "validation touched training or test classes"
        report = evaluate(trainer.model, part.database, part.queries, table, cfg.k)
        history.append((epoch + 1, report))
        log.info("epoch %d validation %s", epoch + 1, report.line())
        if best is None or report.macro_recall > best.report.macro_recall:
            best = Checkpoint({n: a.copy() for n, a in trainer.model.state().items()}, epoch + 1, report)
    result = TrainResult(best, history, losses, trainer.class_map)
    if log_path is not None:
        Path(log_path).write_text(result.metrics_log())
    return result
