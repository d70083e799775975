"""Flow records, class tables, domain normalization, splits and samplers."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import MAX_PACKET_SIZE, N_PACKETS, Batch
from .rng import child_rng

log = logging.getLogger(__name__)


class FlowFormatError(ValueError):
    """Malformed flow, class-table or split file."""


@dataclass(frozen=True)
class PacketSequence:
    sizes: tuple[int, ...]
    directions: tuple[int, ...]
    ipts: tuple[float, ...]
    pkt_count: int

    def __post_init__(self) -> None:
        n = self.pkt_count
        if not (len(self.sizes) == len(self.directions) == len(self.ipts) == N_PACKETS):
            raise ValueError(f"packet sequences have fixed length {N_PACKETS}")
        if not 1 <= n <= N_PACKETS:
            raise ValueError(f"pkt_count {n} outside [1, {N_PACKETS}]")
        for i in range(N_PACKETS):
            s, d, t = self.sizes[i], self.directions[i], self.ipts[i]
            if i < n:
                if d not in (-1, 1) or not 1 <= s <= MAX_PACKET_SIZE or t < 0:
                    raise ValueError(f"invalid packet {i}: size={s} dir={d} ipt={t}")
            elif s != 0 or d != 0 or t != 0:
                raise ValueError(f"packet {i} beyond pkt_count must be zero padding")


@dataclass(frozen=True)
class FlowRecord:
    flow_id: int
    label: int
    pkts: PacketSequence


@dataclass
class ClassTable:
    """Dense class ids ``0..C-1`` with names and flow counts."""

    names: list[str]
    counts: list[int]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.counts):
            raise ValueError("names and counts differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if any(c < 1 for c in self.counts):
            raise ValueError("class counts must be >= 1")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def ids(self) -> range:
        return range(len(self.names))

    def count_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def from_labels(cls, labels: np.ndarray, names: Sequence[str]) -> "ClassTable":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(names))
        return cls(list(names), [int(c) for c in counts])

    def save(self, path: str | Path) -> None:
        lines = ["class_id,name,count"]
        lines += [f"{i},{n},{c}" for i, (n, c) in enumerate(zip(self.names, self.counts))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "class_id,name,count":
            raise FlowFormatError(f"{path}: bad class-table header")
        names, counts = [], []
        for j, line in enumerate(lines[1:], start=2):
            parts = line.rsplit(",", 1)
            head = parts[0].split(",", 1) if len(parts) == 2 else []
            if len(head) != 2:
                raise FlowFormatError(f"{path}:{j}: expected class_id,name,count")
            try:
                cid, count = int(head[0]), int(parts[1])
            except ValueError as exc:
                raise FlowFormatError(f"{path}:{j}: {exc}") from None
            if cid != len(names):
                raise FlowFormatError(f"{path}:{j}: class ids must be dense and ordered")
            names.append(head[1])
            counts.append(count)
        try:
            return cls(names, counts)
        except ValueError as exc:
            raise FlowFormatError(f"{path}: {exc}") from None


@dataclass
class FlowSet:
    """Columnar storage for many flows; row ``i`` is one :class:`FlowRecord`."""

    flow_ids: np.ndarray
    labels: np.ndarray
    pkt_counts: np.ndarray
    sizes: np.ndarray
    dirs: np.ndarray
    ipts: np.ndarray

    def __post_init__(self) -> None:
        self.flow_ids = np.asarray(self.flow_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.pkt_counts = np.asarray(self.pkt_counts, dtype=np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64).reshape(-1, N_PACKETS)
        self.dirs = np.asarray(self.dirs, dtype=np.int64).reshape(-1, N_PACKETS)
        self.ipts = np.asarray(self.ipts, dtype=np.float64).reshape(-1, N_PACKETS)
        n = len(self.flow_ids)
        if not (len(self.labels) == len(self.pkt_counts) == len(self.sizes) == n):
            raise ValueError("FlowSet columns differ in length")

    def __len__(self) -> int:
        return len(self.flow_ids)

    def subset(self, idx) -> "FlowSet":
        idx = np.asarray(idx)
        return FlowSet(self.flow_ids[idx], self.labels[idx], self.pkt_counts[idx],
                       self.sizes[idx], self.dirs[idx], self.ipts[idx])

    def record(self, i: int) -> FlowRecord:
        pkts = PacketSequence(
            tuple(int(v) for v in self.sizes[i]),
            tuple(int(v) for v in self.dirs[i]),
            tuple(float(v) for v in self.ipts[i]),
            int(self.pkt_counts[i]),
        )
        return FlowRecord(int(self.flow_ids[i]), int(self.labels[i]), pkts)

    def records(self) -> list[FlowRecord]:
        return [self.record(i) for i in range(len(self))]

    @classmethod
    def from_records(cls, records: Iterable[FlowRecord]) -> "FlowSet":
        recs = list(records)
        return cls(
            [r.flow_id for r in recs],
            [r.label for r in recs],
            [r.pkts.pkt_count for r in recs],
            np.array([r.pkts.sizes for r in recs], dtype=np.int64).reshape(-1, N_PACKETS),
            np.array([r.pkts.directions for r in recs], dtype=np.int64).reshape(-1, N_PACKETS),
            np.array([r.pkts.ipts for r in recs], dtype=np.float64).reshape(-1, N_PACKETS),
        )

    @classmethod
    def concat(cls, parts: Sequence["FlowSet"]) -> "FlowSet":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("flow_ids", "labels", "pkt_counts", "sizes", "dirs", "ipts")))

    def batch(self) -> Batch:
        return Batch(self.sizes, self.dirs, self.ipts)

    def validate(self) -> None:
        """Check the padding and range invariants of every row."""
        pos = np.arange(N_PACKETS)[None, :]
        live = pos < self.pkt_counts[:, None]
        if np.any((self.pkt_counts < 1) | (self.pkt_counts > N_PACKETS)):
            raise FlowFormatError("pkt_count outside [1, 30]")
        if np.any(~live & ((self.sizes != 0) | (self.dirs != 0) | (self.ipts != 0))):
            raise FlowFormatError("non-zero padding beyond pkt_count")
        if np.any(live & ((self.sizes < 1) | (self.sizes > MAX_PACKET_SIZE))):
            raise FlowFormatError("packet size outside [1, 1500]")
        if np.any(live & (np.abs(self.dirs) != 1)):
            raise FlowFormatError("direction must be -1 or +1")
        if np.any(self.ipts < 0) or not np.all(np.isfinite(self.ipts)):
            raise FlowFormatError("negative or non-finite IPT")


# ---------------------------------------------------------------- flow CSV

CSV_HEADER = ",".join(
    ["flow_id", "label", "pkt_count"]
    + [f"size_{i}" for i in range(1, N_PACKETS + 1)]
    + [f"dir_{i}" for i in range(1, N_PACKETS + 1)]
    + [f"ipt_ms_{i}" for i in range(1, N_PACKETS + 1)]
)


def _fmt_ipt(v: float) -> str:
    return "0" if v == 0 else repr(float(v))


def write_flows_csv(flows: FlowSet, path: str | Path) -> None:
    out = [CSV_HEADER]
    for i in range(len(flows)):
        row = [str(int(flows.flow_ids[i])), str(int(flows.labels[i])), str(int(flows.pkt_counts[i]))]
        row += [str(int(v)) for v in flows.sizes[i]]
        row += [str(int(v)) for v in flows.dirs[i]]
        row += [_fmt_ipt(v) for v in flows.ipts[i]]
        out.append(",".join(row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_flows_csv(path: str | Path) -> FlowSet:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FlowFormatError(f"{path}: {exc}") from None
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise FlowFormatError(f"{path}: bad flow CSV header")
    n = len(lines) - 1
    ints = np.zeros((n, 3 + 2 * N_PACKETS), dtype=np.int64)
    ipts = np.zeros((n, N_PACKETS), dtype=np.float64)
    width = 3 + 3 * N_PACKETS
    for j, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != width:
            raise FlowFormatError(f"{path}:{j + 2}: expected {width} cells, got {len(cells)}")
        try:
            ints[j] = [int(c) for c in cells[:3 + 2 * N_PACKETS]]
            ipts[j] = [float(c) for c in cells[3 + 2 * N_PACKETS:]]
        except ValueError as exc:
            raise FlowFormatError(f"{path}:{j + 2}: {exc}") from None
        count = ints[j, 2]
        pad = cells[3 + min(max(count, 0), N_PACKETS):3 + N_PACKETS]
        pad += cells[3 + N_PACKETS + min(max(count, 0), N_PACKETS):3 + 2 * N_PACKETS]
        pad += cells[3 + 2 * N_PACKETS + min(max(count, 0), N_PACKETS):]
        if any(c != "0" for c in pad):
            raise FlowFormatError(f"{path}:{j + 2}: padding cells must be literal 0")
    flows = FlowSet(ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3:3 + N_PACKETS],
                    ints[:, 3 + N_PACKETS:], ipts)
    flows.validate()
    return flows


# ---------------------------------------------------------------- domains


def load_rules(path: str | Path) -> list[tuple[str, str]]:
    """Read ``pattern<TAB>replacement`` lines; ``#`` starts a comment line."""
    rules = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        pattern, _, repl = line.partition("\t")
        rules.append((pattern, repl.strip()))
    return rules


DEFAULT_RULES: list[tuple[str, str]] = [
    (r"^[a-c]\.tile\.openstreetmap\.org$", "$RND.tile.openstreetmap.org"),
    (r"^[a-z]+-[a-z]+\d+-gcp\.api\.snapchat\.com$", "$LOC-gcp.api.snapchat.com"),
]


def normalize_domain(sni: str, rules: Sequence[tuple[str, str]] = ()) -> str:
    """Map an SNI hostname to its domain class.

    Keeps the rightmost four labels, then applies the first matching regex
    rule. Replacements are literal text.
    """
    sni = sni.strip().rstrip(".").lower()
    if not sni:
        raise ValueError("empty domain")
    name = ".".join(sni.split(".")[-4:])
    for pattern, repl in rules:
        rx = re.compile(pattern)
        if rx.search(name):
            return rx.sub(repl.replace("\\", "\\\\"), name, count=1)
    return name


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train_classes: frozenset[int]
    val_classes: frozenset[int]
    test_classes: frozenset[int]
    seed: int

    def __post_init__(self) -> None:
        a, b, c = self.train_classes, self.val_classes, self.test_classes
        if a & b or a & c or b & c:
            raise ValueError("split class sets must be pairwise disjoint")

    def save(self, directory: str | Path, table: ClassTable) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for part in ("train", "val", "test"):
            ids = sorted(getattr(self, f"{part}_classes"))
            (d / f"{part}.txt").write_text("".join(table.names[i] + "\n" for i in ids), encoding="utf-8")
        (d / "seed.txt").write_text(f"seed={self.seed}\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, table: ClassTable) -> "SplitSpec":
        d = Path(directory)
        index = {n: i for i, n in enumerate(table.names)}
        sets = []
        try:
            for part in ("train", "val", "test"):
                names = [x for x in (d / f"{part}.txt").read_text(encoding="utf-8").splitlines() if x]
                missing = [x for x in names if x not in index]
                if missing:
                    raise FlowFormatError(f"{part}.txt names unknown classes: {missing[:3]}")
                sets.append(frozenset(index[x] for x in names))
            seed_line = (d / "seed.txt").read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise FlowFormatError(str(exc)) from None
        if not seed_line.startswith("seed="):
            raise FlowFormatError("seed.txt must contain seed=<int>")
        try:
            return cls(*sets, seed=int(seed_line[5:]))
        except ValueError as exc:
            raise FlowFormatError(str(exc)) from None


def split_classes(table: ClassTable, counts: tuple[int, int, int], seed: int) -> SplitSpec:
    """Uniformly random disjoint train/val/test class sets."""
    n_train, n_val, n_test = counts
    if min(counts) < 0 or n_train + n_val + n_test > len(table):
        raise ValueError(f"split sizes {counts} exceed {len(table)} classes")
    perm = child_rng(seed, "split").permutation(len(table))
    return SplitSpec(
        frozenset(int(i) for i in perm[:n_train]),
        frozenset(int(i) for i in perm[n_train:n_train + n_val]),
        frozenset(int(i) for i in perm[n_train + n_val:n_train + n_val + n_test]),
        seed,
    )


def select_classes(flows: FlowSet, classes: Iterable[int]) -> FlowSet:
    keep = np.isin(flows.labels, np.fromiter(classes, dtype=np.int64))
    return flows.subset(np.flatnonzero(keep))


# ---------------------------------------------------------------- sampling


SAMPLING_METHODS = ("pps", "sequential")


def inclusion_probabilities(weights: np.ndarray, size: int) -> np.ndarray:
    """Inclusion probabilities proportional to ``weights`` summing to ``size``.

    Rows whose share would exceed 1 are taken with certainty and the rest of
    the budget is spread over the others.
    """
    w = np.asarray(weights, dtype=np.float64)
    pi = np.zeros(len(w))
    sure = np.zeros(len(w), dtype=bool)
    while True:
        budget = size - int(sure.sum())
        rest = w * ~sure
        pi = np.where(sure, 1.0, budget * rest / rest.sum() if budget else 0.0)
        over = (pi > 1) & ~sure
        if not over.any():
            return pi
        sure |= over


def _pps_systematic(w: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    pi = inclusion_probabilities(w, size)
    order = rng.permutation(len(w))
    cum = np.cumsum(pi[order])
    points = rng.random() + np.arange(size)
    pos = np.minimum(np.searchsorted(cum, points, side="right"), len(w) - 1)
    picked = order[pos]
    if len(np.unique(picked)) != size:
        raise RuntimeError("systematic sampling produced a duplicate")
    return picked


def _sequential_keys(w: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(w))
    keys = w / -np.log1p(-u)
    return np.argpartition(-keys, size - 1)[:size]


def weighted_subsample_indices(
    labels: np.ndarray, lam: float, size: int, rng: np.random.Generator, method: str = "pps"
) -> np.ndarray:
    """Indices of ``size`` distinct rows drawn with weights ``N_C ** -lam``.

    ``pps`` (default) makes every row's inclusion probability proportional to
    its weight (systematic sampling over a random order), so expected class
    shares follow ``N_C ** (1 - lam)``. ``sequential`` draws one row at a
    time proportional to weight and removes it (exponential keys); its class
    shares drift toward the larger classes as the small ones deplete.
    Returned in ascending order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if method not in SAMPLING_METHODS:
        raise ValueError(f"unknown sampling method {method!r}")
    if size > len(labels) or size < 0:
        raise ValueError(f"cannot draw {size} samples from {len(labels)} records")
    if size == len(labels):
        return np.arange(len(labels))
    if size == 0:
        return np.empty(0, dtype=np.int64)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    w = counts[inverse].astype(np.float64) ** (-lam)
    pick = _pps_systematic if method == "pps" else _sequential_keys
    return np.sort(pick(w, size, rng))


def weighted_subsample(flows: FlowSet, lam: float, size: int, seed: int, label: str = "sampler") -> FlowSet:
    return flows.subset(weighted_subsample_indices(flows.labels, lam, size, child_rng(seed, label)))


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``.

    Ties in the fractional remainder go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() == 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = w * total / w.sum()
    base = np.floor(exact).astype(np.int64)
    rest = total - int(base.sum())
    order = np.lexsort((np.arange(len(w)), -(exact - base)))
    base[order[:rest]] += 1
    return base


@dataclass
class EvalPartition:
    database: FlowSet
    queries: FlowSet
    lambda_db: float
    warnings: list[str] = field(default_factory=list)


def stratified_query_indices(labels: np.ndarray, q_size: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Pick ``q_size`` rows preserving class frequencies; singleton classes are never picked."""
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    warnings = []
    eligible = counts >= 2
    for c in classes[~eligible]:
        warnings.append(f"class {int(c)} has a single sample; kept wholly in the database")
    cap = np.where(eligible, counts - 1, 0)
    if q_size > cap.sum():
        raise ValueError(f"q_size {q_size} too large for a stratified split")
    quota = np.zeros(len(classes), dtype=np.int64)
    remaining = q_size
    active = eligible.copy()
    # a class may not give all of its samples to the queries
    while remaining > 0:
        alloc = np.minimum(largest_remainder(np.where(active, counts, 0), remaining), cap - quota)
        quota += alloc
        remaining -= int(alloc.sum())
        active &= quota < cap
    picked = []
    for j, c in enumerate(classes):
        if quota[j]:
            members = np.flatnonzero(inverse == j)
            picked.append(rng.choice(members, size=int(quota[j]), replace=False))
    idx = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    return idx, warnings


def prepare_eval(flows: FlowSet, q_size: int, db_size: int, lambda_db: float, seed: int, label: str = "eval") -> EvalPartition:
    """Stratified query split, then a semi-balanced database from the remainder."""
    if q_size + db_size > len(flows):
        raise ValueError(f"q_size + db_size = {q_size + db_size} exceeds {len(flows)} records")
    rng = child_rng(seed, f"{label}:queries")
    q_idx, warnings = stratified_query_indices(flows.labels, q_size, rng)
    for w in warnings:
        log.warning(w)
    rest = np.setdiff1d(np.arange(len(flows)), q_idx)
    db_rel = weighted_subsample_indices(flows.labels[rest], lambda_db, db_size, child_rng(seed, f"{label}:database"))
    return EvalPartition(flows.subset(rest[db_rel]), flows.subset(q_idx), lambda_db, warnings)
