"""Deterministic synthetic flow datasets with class structure and Zipf imbalance.

Classes come in small families that share a handshake-like prefix; class
identity lives in the later packets and in the timing profile. Each class has
one to three modes (intra-class variants) that share the family prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClassTable, FlowSet, largest_remainder
from .model import MAX_PACKET_SIZE, N_PACKETS
from .rng import child_rng


@dataclass
class GeneratorConfig:
    n_classes: int = 60
    samples_total: int = 30_000
    zipf_exponent: float = 1.0
    seed: int = 0
    max_modes: int = 3
    family_size: int = 10
    prefix_len: tuple[int, int] = (10, 12)
    length: tuple[int, int] = (16, 30)
    size_jitter_sd: float = 20.0
    ipt_log_sd: float = 0.5
    ipt_log_mean: tuple[float, float] = (math.log(0.5), math.log(200.0))
    ipt_mode_sd: float = 0.3
    insert_prob: float = 0.3

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.samples_total < 2 * self.n_classes:
            raise ValueError("samples_total must be at least 2 * n_classes")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        lo, hi = self.length
        if not 4 <= lo <= hi <= N_PACKETS:
            raise ValueError(f"length range must lie in [4, {N_PACKETS}]")
        if not 3 <= self.prefix_len[0] <= self.prefix_len[1] < lo:
            raise ValueError("prefix length must be >= 3 and shorter than every flow")


@dataclass
class ModeTemplate:
    base_sizes: np.ndarray
    base_dirs: np.ndarray
    ipt_log_mean: float
    ipt_log_sd: float
    size_jitter_sd: float

    @property
    def length(self) -> int:
        return len(self.base_sizes)


@dataclass
class ClassTemplate:
    class_id: int
    modes: list[ModeTemplate]

    def signature(self) -> tuple:
        return tuple((tuple(m.base_sizes), tuple(m.base_dirs)) for m in self.modes)


def _draw_sizes(rng: np.random.Generator, n: int) -> np.ndarray:
    kind = rng.choice(3, size=n, p=[0.4, 0.3, 0.3])
    small = rng.integers(40, 121, size=n)
    medium = rng.integers(121, 1200, size=n)
    full = rng.integers(1200, MAX_PACKET_SIZE + 1, size=n)
    return np.choose(kind, [small, medium, full])


def _draw_dirs(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.where(rng.random(n) < 0.5, -1, 1)


def class_shares(cfg: GeneratorConfig) -> np.ndarray:
    """Per-class flow counts: ``rank ** -zipf`` shares, at least 2 each."""
    ranks = np.arange(1, cfg.n_classes + 1, dtype=np.float64)
    w = ranks ** -cfg.zipf_exponent
    counts = largest_remainder(w, cfg.samples_total)
    if counts.min() < 2:
        counts = 2 + largest_remainder(w, cfg.samples_total - 2 * cfg.n_classes)
    return counts


def make_templates(cfg: GeneratorConfig) -> list[ClassTemplate]:
    rng = child_rng(cfg.seed, "synth:templates")
    templates: list[ClassTemplate] = []
    seen: set[tuple] = set()
    n_families = math.ceil(cfg.n_classes / cfg.family_size)
    for f in range(n_families):
        p_len = int(rng.integers(cfg.prefix_len[0], cfg.prefix_len[1] + 1))
        prefix_sizes = _draw_sizes(rng, p_len)
        prefix_dirs = _draw_dirs(rng, p_len)
        prefix_dirs[0] = 1
        for _ in range(cfg.family_size):
            cid = len(templates)
            if cid >= cfg.n_classes:
                break
            while True:
                class_ipt = float(rng.uniform(*cfg.ipt_log_mean))
                modes = []
                for _m in range(int(rng.integers(1, cfg.max_modes + 1))):
                    length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
                    tail = length - p_len
                    modes.append(ModeTemplate(
                        np.concatenate([prefix_sizes, _draw_sizes(rng, tail)]),
                        np.concatenate([prefix_dirs, _draw_dirs(rng, tail)]),
                        class_ipt + float(rng.normal(0, cfg.ipt_mode_sd)),
                        cfg.ipt_log_sd,
                        cfg.size_jitter_sd,
                    ))
                tpl = ClassTemplate(cid, modes)
                if tpl.signature() not in seen:
                    seen.add(tpl.signature())
                    templates.append(tpl)
                    break
    return templates


def _emit(rng: np.random.Generator, mode: ModeTemplate, insert_prob: float):
    sizes = mode.base_sizes + np.rint(rng.normal(0, mode.size_jitter_sd, mode.length)).astype(np.int64)
    sizes = np.clip(sizes, 1, MAX_PACKET_SIZE)
    dirs = mode.base_dirs.copy()
    if rng.random() < insert_prob:
        # a stray small packet shifts everything after it
        pos = int(rng.integers(1, min(10, mode.length)))
        sizes = np.insert(sizes, pos, int(rng.integers(40, 90)))
        dirs = np.insert(dirs, pos, -dirs[pos - 1])
    n = min(len(sizes), N_PACKETS)
    ipts = np.exp(rng.normal(mode.ipt_log_mean, mode.ipt_log_sd, n))
    ipts[0] = 0.0
    out_s = np.zeros(N_PACKETS, dtype=np.int64)
    out_d = np.zeros(N_PACKETS, dtype=np.int64)
    out_t = np.zeros(N_PACKETS, dtype=np.float64)
    out_s[:n], out_d[:n], out_t[:n] = sizes[:n], dirs[:n], np.round(ipts, 3)
    return n, out_s, out_d, out_t


def gen_dataset(cfg: GeneratorConfig | None = None) -> tuple[FlowSet, ClassTable]:
    """Generate flows and their class table; fully determined by ``cfg``.

    Each flow draws from its own child stream keyed by its index, so the
    output does not depend on generation order.
    """
    cfg = cfg or GeneratorConfig()
    templates = make_templates(cfg)
    counts = class_shares(cfg)
    labels = np.repeat(np.arange(cfg.n_classes), counts)
    n = len(labels)
    sizes = np.zeros((n, N_PACKETS), dtype=np.int64)
    dirs = np.zeros((n, N_PACKETS), dtype=np.int64)
    ipts = np.zeros((n, N_PACKETS), dtype=np.float64)
    pkt_counts = np.zeros(n, dtype=np.int64)
    for i, c in enumerate(labels):
        rng = child_rng(cfg.seed, f"synth:flow{i}")
        tpl = templates[c]
        mode = tpl.modes[int(rng.integers(len(tpl.modes)))]
        pkt_counts[i], sizes[i], dirs[i], ipts[i] = _emit(rng, mode, cfg.insert_prob)
    flows = FlowSet(np.arange(n), labels, pkt_counts, sizes, dirs, ipts)
    names = [f"class{c:03d}.synthetic.example" for c in range(cfg.n_classes)]
    return flows, ClassTable(names, [int(c) for c in counts])
