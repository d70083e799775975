"""End-to-end runs: generate, split, train, then compare against the input-space baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ClassTable, FlowSet, SplitSpec, prepare_eval, select_classes, split_classes
from .metrics import EvalReport, baseline_classify, compute_report
from .model import ArcFaceConfig, BackboneConfig, EmbeddingModel
from .synth import GeneratorConfig, gen_dataset
from .train import TrainConfig, TrainResult, evaluate, fit

log = logging.getLogger(__name__)

SPLIT_COUNTS = (30, 15, 15)
TEST_QUERY_FRAC = 0.4
TEST_DB_FRAC = 0.3


@dataclass
class RunOutcome:
    seed: int
    model_report: EvalReport
    baseline_report: EvalReport
    best_epoch: int
    seconds: float
    history: list = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.model_report.accuracy - self.baseline_report.accuracy


def heldout_partition(flows: FlowSet, splits: SplitSpec, lambda_db: float, seed: int):
    test = select_classes(flows, splits.test_classes)
    n = len(test)
    return prepare_eval(test, int(n * TEST_QUERY_FRAC), int(n * TEST_DB_FRAC), lambda_db, seed, "test")


def run_once(
    flows: FlowSet,
    table: ClassTable,
    splits: SplitSpec,
    cfg: TrainConfig,
    backbone: BackboneConfig | None = None,
    arc: ArcFaceConfig | None = None,
) -> RunOutcome:
    t0 = time.perf_counter()
    result: TrainResult = fit(flows, table, splits, cfg, backbone, arc)
    model = EmbeddingModel.from_state(result.best.state, arc)
    part = heldout_partition(flows, splits, cfg.lambda_db, cfg.seed)
    ours = evaluate(model, part.database, part.queries, table, cfg.k)
    base = compute_report(baseline_classify(part.database, part.queries), part.queries.labels, table)
    elapsed = time.perf_counter() - t0
    log.info("seed %d: model %.4f baseline %.4f (%.0f s)", cfg.seed, ours.accuracy, base.accuracy, elapsed)
    return RunOutcome(cfg.seed, ours, base, result.best.epoch, elapsed, result.history)


def run_seeds(
    seeds=(0, 1, 2),
    gen: GeneratorConfig | None = None,
    cfg: TrainConfig | None = None,
) -> list[RunOutcome]:
    """Default-config runs, one per seed; the seed drives the class split and training."""
    flows, table = gen_dataset(gen or GeneratorConfig())
    cfg = cfg or TrainConfig()
    out = []
    for s in seeds:
        splits = _split(table, s)
        run_cfg = TrainConfig(**{**cfg.__dict__, "seed": s})
        out.append(run_once(flows, table, splits, run_cfg))
    return out


def _split(table: ClassTable, seed: int) -> SplitSpec:
    return split_classes(table, SPLIT_COUNTS, seed)


def median_gap(outcomes: list[RunOutcome]) -> float:
    return float(np.median([o.gap for o in outcomes]))
