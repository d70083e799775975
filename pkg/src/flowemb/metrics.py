"""Accuracy, macro recall and frequency-quartile recalls; the input-space L1 baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import ClassTable, FlowSet, largest_remainder
from .retrieval import Neighborhoods, _rank_impl

BASELINE_PACKETS = 10


@dataclass
class EvalReport:
    scheme: str
    accuracy: float
    macro_recall: float
    quartile_recalls: tuple[float, float, float, float]
    per_class_recall: dict[int, float] = field(default_factory=dict)
    quartiles: tuple[tuple[int, ...], ...] = ()

    def line(self) -> str:
        """Machine-readable ``scheme,accuracy,macro_recall,q1,q2,q3,q4``."""
        vals = [self.accuracy, self.macro_recall, *self.quartile_recalls]
        return ",".join([self.scheme] + [f"{v:.6f}" for v in vals])

    def table(self, names: list[str] | None = None) -> str:
        q = " ".join(f"Q{i + 1}={v * 100:6.2f}" for i, v in enumerate(self.quartile_recalls))
        lines = [f"[{self.scheme}] accuracy={self.accuracy * 100:6.2f} recall={self.macro_recall * 100:6.2f} {q}"]
        for c, r in sorted(self.per_class_recall.items()):
            label = names[c] if names else str(c)
            lines.append(f"  {label:<40} {r * 100:6.2f}")
        return "\n".join(lines)


def frequency_quartiles(classes, table: ClassTable) -> tuple[tuple[int, ...], ...]:
    """Split ``classes`` into four frequency groups, most frequent first.

    Classes are sorted by table count (descending, ties by id) and cut into
    contiguous groups whose sizes come from largest-remainder rounding.
    """
    classes = sorted(int(c) for c in classes)
    counts = table.counts
    ordered = sorted(classes, key=lambda c: (-counts[c], c))
    sizes = largest_remainder(np.ones(4), len(ordered))
    groups, start = [], 0
    for s in sizes:
        groups.append(tuple(ordered[start:start + s]))
        start += s
    return tuple(groups)


def compute_report(predictions, truth, table: ClassTable, scheme: str = "top1") -> EvalReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and truth differ in length")
    if true.size == 0:
        raise ValueError("empty evaluation set")
    if true.min() < 0 or true.max() >= len(table):
        raise ValueError("truth contains a class absent from the class table")
    correct = pred == true
    present = np.unique(true)
    per_class = {}
    for c in present:
        sel = true == c
        per_class[int(c)] = float(correct[sel].sum() / sel.sum())
    groups = frequency_quartiles(present, table)
    q = tuple(float(np.mean([per_class[c] for c in g])) if g else float("nan") for g in groups)
    return EvalReport(
        scheme=scheme,
        accuracy=float(correct.mean()),
        macro_recall=float(np.mean(list(per_class.values()))),
        quartile_recalls=q,
        per_class_recall=per_class,
        quartiles=groups,
    )


def baseline_vectors(flows: FlowSet, sign_fold: bool = False) -> np.ndarray:
    """First-10-packet input-space vectors: sizes, directions, 0.1 * IPT seconds clipped at 1 s.

    With ``sign_fold`` the sizes carry the direction sign and the direction
    block is dropped.
    """
    n = BASELINE_PACKETS
    sizes = flows.sizes[:, :n].astype(np.float64)
    dirs = flows.dirs[:, :n].astype(np.float64)
    ipt = 0.1 * np.minimum(flows.ipts[:, :n] / 1000.0, 1.0)
    if sign_fold:
        return np.concatenate([sizes * dirs, ipt], axis=1)
    return np.concatenate([sizes, dirs, ipt], axis=1)


def _neg_l1(queries: np.ndarray, db_rows: np.ndarray) -> np.ndarray:
    return -cdist(queries, db_rows, metric="cityblock")


def baseline_rank(train_vecs: np.ndarray, test_vecs: np.ndarray, k: int = 1) -> Neighborhoods:
    """L1 ranking through the generic blocked top-k engine (similarity = -L1)."""
    return _rank_impl(train_vecs, test_vecs, k, 4096, 256, _neg_l1)


def baseline_classify(train: FlowSet, test: FlowSet, sign_fold: bool = False, block: int = 512) -> np.ndarray:
    """Label of the L1-closest training flow; ties go to the lower training index."""
    if len(train) == 0:
        raise ValueError("baseline needs a non-empty training set")
    a = baseline_vectors(train, sign_fold)
    b = baseline_vectors(test, sign_fold)
    pred = np.empty(len(b), dtype=np.int64)
    for start in range(0, len(b), block):
        d = cdist(b[start:start + block], a, metric="cityblock")
        pred[start:start + block] = train.labels[d.argmin(axis=1)]
    return pred
