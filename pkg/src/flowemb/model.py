"""The 30pktTCNET_256 embedding network, the sub-center ArcFace head and KoLeo."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels as K
from .kernels import Parameter
from .rng import child_rng

N_PACKETS = 30
MAX_PACKET_SIZE = 1500
IPT_BINS = 200
IPT_MIN_MS = 1.0
IPT_MAX_MS = 30_000.0

ENCODING_MODES = ("emb_ple", "ple", "scalar")


@dataclass
class BackboneConfig:
    pkt_size_emb_dim: int = 20
    ipt_emb_dim: int = 10
    ipt_bins: int = IPT_BINS
    dir_dims: int = 2
    blocks: tuple[tuple[int, int, float], ...] = (
        (192, 7, 0.0),
        (256, 7, 0.1),
        (384, 5, 0.2),
        (448, 3, 0.3),
    )
    bottleneck_ratio: float = 0.25
    refine_dim: int = 448
    embedding_size: int = 256
    gem_p_init: float = 3.0
    encoding: str = "emb_ple"

    def __post_init__(self) -> None:
        self.blocks = tuple(tuple(b) for b in self.blocks)
        if self.encoding not in ENCODING_MODES:
            raise ValueError(f"unknown encoding {self.encoding!r}, expected one of {ENCODING_MODES}")
        for c_out, k, r in self.blocks:
            mid = c_out * self.bottleneck_ratio
            if mid != int(mid) or mid < 1:
                raise ValueError(f"C_out={c_out} times bottleneck ratio is not a positive integer")
            if k % 2 != 1:
                raise ValueError(f"kernel size {k} must be odd")
            if not 0 <= r < 1:
                raise ValueError(f"dropout rate {r} outside [0, 1)")
        if self.refine_dim != self.blocks[-1][0]:
            raise ValueError("refine_dim must equal the last block's channel count")

    @property
    def stem_dim(self) -> int:
        if self.encoding == "scalar":
            return 2 + self.dir_dims
        return self.pkt_size_emb_dim + self.ipt_emb_dim + self.dir_dims


@dataclass
class ArcFaceConfig:
    scale: float = 30.0
    subcenters: int = 3
    m_min: float = 0.15
    m_max: float = 0.25
    lambda_margin: float = 0.25

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("ArcFace scale must be positive")
        if self.subcenters < 1:
            raise ValueError("need at least one sub-center")
        if not 0 <= self.m_min <= self.m_max < math.pi / 2:
            raise ValueError("margins must satisfy 0 <= m_min <= m_max < pi/2")


# ---------------------------------------------------------------- stem inputs


def ipt_bin_edges(bins: int = IPT_BINS) -> np.ndarray:
    """Geometric edges of the regular IPT bins ``1 .. bins-2``.

    Bin 0 holds ``ipt == 0`` (first packet and padding), bin ``bins-1``
    everything at or beyond the last edge.
    """
    return np.geomspace(IPT_MIN_MS, IPT_MAX_MS, bins - 1)


def ipt_bin_index(ipts: np.ndarray, bins: int = IPT_BINS) -> np.ndarray:
    ipts = np.asarray(ipts, dtype=np.float64)
    edges = ipt_bin_edges(bins)
    idx = 1 + np.clip(np.searchsorted(edges, ipts, side="right") - 1, 0, bins - 3)
    idx = np.where(ipts <= 0, 0, idx)
    idx = np.where(ipts >= edges[-1], bins - 1, idx)
    return idx.astype(np.int64)


def ipt_bin_values(bins: int = IPT_BINS) -> np.ndarray:
    """Representative IPT (ms) of every bin: 0, geometric midpoints, last edge."""
    edges = ipt_bin_edges(bins)
    mids = np.sqrt(edges[:-1] * edges[1:])
    return np.concatenate([[0.0], mids, [edges[-1]]])


def direction_index(dirs: np.ndarray) -> np.ndarray:
    """Backward (-1) -> 0, forward (+1) -> 1, padding (0) -> -1 (all-zero one-hot)."""
    dirs = np.asarray(dirs)
    return np.where(dirs > 0, 1, np.where(dirs < 0, 0, -1))


def ple_init(bin_edges: Iterable[float], values: Iterable[float]) -> np.ndarray:
    """Piecewise linear encoding of ``values`` over ``len(bin_edges) - 1`` segments.

    ``row(v)[t]`` is 1 past segment ``t``, the linear position inside it, and
    0 before it.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("PLE bin edges must be strictly increasing with at least two entries")
    v = np.asarray(values, dtype=np.float64)[:, None]
    lo, hi = edges[:-1][None, :], edges[1:][None, :]
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def size_table_init(dim: int) -> np.ndarray:
    return ple_init(np.linspace(0, MAX_PACKET_SIZE, dim + 1), np.arange(MAX_PACKET_SIZE + 1))


def ipt_table_init(dim: int, bins: int = IPT_BINS) -> np.ndarray:
    v = np.log1p(ipt_bin_values(bins))
    return ple_init(np.linspace(0, math.log1p(IPT_MAX_MS), dim + 1), v)


def impute_unseen_rows(table: np.ndarray, observed: Iterable[int]) -> np.ndarray:
    """Fill rows of never-observed packet sizes.

    Unobserved sizes 1-19 copy row 0; every other unobserved size copies the
    nearest observed size (ties go to the smaller size). Observed rows are kept.
    """
    obs = np.unique(np.fromiter((int(s) for s in observed), dtype=np.int64))
    if obs.size == 0:
        raise ValueError("observed packet-size set is empty")
    out = table.copy()
    sizes = np.arange(table.shape[0])
    unseen = ~np.isin(sizes, obs)
    pos = np.searchsorted(obs, sizes)
    left = obs[np.clip(pos - 1, 0, obs.size - 1)]
    right = obs[np.clip(pos, 0, obs.size - 1)]
    nearest = np.where(np.abs(sizes - left) <= np.abs(right - sizes), left, right)
    src = np.where((sizes >= 1) & (sizes <= 19), 0, nearest)
    out[unseen] = table[src[unseen]]
    return out


# ---------------------------------------------------------------- margins / losses


def dynamic_margins(counts, lambda_margin: float = 0.25, m_min: float = 0.15, m_max: float = 0.25) -> np.ndarray:
    """Per-class margins ``a * N_C**-lambda + b`` spanning ``[m_min, m_max]``.

    The most frequent class gets ``m_min``, the rarest ``m_max``.
    """
    n = np.asarray(counts, dtype=np.float64)
    if n.size == 0 or np.any(n <= 0):
        raise ValueError("class counts must be positive")
    x = n ** (-lambda_margin)
    x_lo, x_hi = x.min(), x.max()
    if x_hi == x_lo:
        return np.full(n.shape, 0.5 * (m_min + m_max))
    a = (m_max - m_min) / (x_hi - x_lo)
    b = m_min - a * x_lo
    margins = a * x + b
    margins[n == n.max()] = m_min
    margins[n == n.min()] = m_max
    return np.clip(margins, m_min, m_max)


COS_CLAMP = 1e-7


def arcface_loss(embeddings: np.ndarray, labels: np.ndarray, centers: np.ndarray, margins, s: float):
    """Sub-center ArcFace cross-entropy with per-class additive angular margins.

    Args:
        embeddings: ``(B, d)``; normalized internally.
        labels: ``(B,)`` class ids in ``[0, C)``.
        centers: ``(C, K, d)`` sub-centers; normalized internally.
        margins: ``(C,)`` angular margins (a scalar broadcasts).
        s: logit scale.

    Returns:
        ``(loss, cache)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes, n_sub, d = centers.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    margins = np.broadcast_to(np.asarray(margins, dtype=np.float64), (n_classes,))
    b = embeddings.shape[0]
    e, e_cache = K.l2_normalize(embeddings)
    flat = centers.reshape(n_classes * n_sub, d)
    w, w_cache = K.l2_normalize(flat)
    cos_all = (e @ w.T).reshape(b, n_classes, n_sub).astype(np.float64)
    which = cos_all.argmax(axis=2)
    cos = np.take_along_axis(cos_all, which[..., None], axis=2)[..., 0]
    inside = (cos > -1 + COS_CLAMP) & (cos < 1 - COS_CLAMP)
    cos = np.clip(cos, -1 + COS_CLAMP, 1 - COS_CLAMP)

    rows = np.arange(b)
    c_y = cos[rows, labels]
    m_y = margins[labels]
    theta = np.arccos(c_y)
    sin_t = np.sqrt(1 - c_y * c_y)
    use_angle = theta + m_y < math.pi
    target = np.where(use_angle, np.cos(theta + m_y), c_y - m_y * np.sin(m_y))
    # derivative of the target logit w.r.t. c_y
    dtarget = np.where(use_angle, np.cos(m_y) + c_y / sin_t * np.sin(m_y), 1.0)

    logits = s * cos
    logits[rows, labels] = s * target
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    z = ex.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(z[:, 0]) + shift[:, 0] - logits[rows, labels]))
    cache = (e, e_cache, w, w_cache, which, inside, ex / z, dtarget, labels, s, centers.shape)
    return loss, cache


def arcface_loss_backward(cache, dloss: float = 1.0):
    e, e_cache, w, w_cache, which, inside, prob, dtarget, labels, s, shape = cache
    n_classes, n_sub, d = shape
    b = e.shape[0]
    rows = np.arange(b)
    dlogits = prob.copy()
    dlogits[rows, labels] -= 1
    dlogits *= dloss / b
    dcos = s * dlogits
    dcos[rows, labels] *= dtarget
    dcos *= inside
    dcos_all = np.zeros((b, n_classes, n_sub), dtype=e.dtype)
    np.put_along_axis(dcos_all, which[..., None], dcos[..., None].astype(e.dtype), axis=2)
    dcos_all = dcos_all.reshape(b, n_classes * n_sub)
    de = dcos_all @ w
    dw = dcos_all.T @ e
    demb = K.l2_normalize_backward(de, e_cache)
    dcenters = K.l2_normalize_backward(dw, w_cache).reshape(shape)
    return demb, dcenters


KOLEO_FLOOR = 1e-8


def koleo(embeddings: np.ndarray):
    """``-(1/B) * sum_i log(min_j ||x_i - x_j||)`` with a distance floor."""
    x = embeddings
    b = x.shape[0]
    if b < 2:
        raise ValueError("KoLeo needs at least two embeddings")
    x64 = x.astype(np.float64)
    sq = np.einsum("ij,ij->i", x64, x64)
    d2 = sq[:, None] + sq[None, :] - 2 * (x64 @ x64.T)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    diff = x64 - x64[nn]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    floored = dist < KOLEO_FLOOR
    dist = np.maximum(dist, KOLEO_FLOOR)
    loss = float(-np.mean(np.log(dist)))
    return loss, (nn, diff, dist, floored, x.dtype)


def koleo_backward(cache, dloss: float = 1.0) -> np.ndarray:
    nn, diff, dist, floored, dtype = cache
    b = diff.shape[0]
    coef = np.where(floored, 0.0, -dloss / (b * dist * dist))[:, None]
    g = coef * diff
    dx = g.copy()
    np.add.at(dx, nn, -g)
    return dx.astype(dtype)


# ---------------------------------------------------------------- network


@dataclass
class Batch:
    """Stem-ready integer/float views of a batch of packet sequences."""

    sizes: np.ndarray
    dirs: np.ndarray
    ipts: np.ndarray

    def __post_init__(self) -> None:
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.dirs = np.asarray(self.dirs, dtype=np.int64)
        self.ipts = np.asarray(self.ipts, dtype=np.float64)
        if self.sizes.size and (self.sizes.min() < 0 or self.sizes.max() > MAX_PACKET_SIZE):
            raise ValueError(f"packet size outside [0, {MAX_PACKET_SIZE}]")

    def __len__(self) -> int:
        return self.sizes.shape[0]


def _bn_names(prefix: str) -> list[str]:
    return [f"{prefix}.weight", f"{prefix}.bias"]


class EmbeddingModel:
    """Parameters plus hand-chained forward/backward of the embedding network.

    ``params`` and ``buffers`` preserve a fixed insertion order that is also
    the order used by the weights file.
    """

    def __init__(
        self,
        cfg: BackboneConfig | None = None,
        n_classes: int = 0,
        arc: ArcFaceConfig | None = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        self.cfg = cfg or BackboneConfig()
        self.arc = arc or ArcFaceConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(n_classes, seed)

    # -- construction

    def _add(self, name: str, value: np.ndarray, exempt: bool = False, trainable: bool = True) -> None:
        self.params[name] = Parameter(name, np.ascontiguousarray(value, dtype=self.dtype), exempt, trainable)

    def _uniform(self, seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return child_rng(seed, f"init:{name}").uniform(-bound, bound, size=shape)

    def _conv(self, seed: int, name: str, c_out: int, c_in: int, k: int) -> None:
        self._add(name, self._uniform(seed, name, (c_out, c_in, k), c_in * k))

    def _bn(self, prefix: str, c: int) -> None:
        self._add(f"{prefix}.weight", np.ones(c), exempt=True)
        self._add(f"{prefix}.bias", np.zeros(c), exempt=True)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(c, dtype=self.dtype)

    def _linear(self, seed: int, prefix: str, c_out: int, c_in: int) -> None:
        self._add(f"{prefix}.weight", self._uniform(seed, f"{prefix}.weight", (c_out, c_in), c_in))
        self._add(f"{prefix}.bias", np.zeros(c_out), exempt=True)

    def _build(self, n_classes: int, seed: int) -> None:
        cfg = self.cfg
        if cfg.encoding != "scalar":
            frozen = cfg.encoding == "ple"
            self._add("stem.size_emb", size_table_init(cfg.pkt_size_emb_dim), exempt=True, trainable=not frozen)
            self._add("stem.ipt_emb", ipt_table_init(cfg.ipt_emb_dim, cfg.ipt_bins), exempt=True, trainable=not frozen)
        c_in = cfg.stem_dim
        for i, (c_out, k, _r) in enumerate(cfg.blocks):
            mid = int(c_out * cfg.bottleneck_ratio)
            p = f"blocks.{i}"
            self._conv(seed, f"{p}.conv1.weight", mid, c_in, 1)
            self._bn(f"{p}.bn1", mid)
            self._conv(seed, f"{p}.conv2.weight", mid, mid, k)
            self._bn(f"{p}.bn2", mid)
            self._conv(seed, f"{p}.conv3.weight", c_out, mid, 1)
            self._bn(f"{p}.bn3", c_out)
            if c_in != c_out:
                self._conv(seed, f"{p}.skip.weight", c_out, c_in, 1)
                self._bn(f"{p}.skip_bn", c_out)
            c_in = c_out
        self._add("gem.p", np.array([cfg.gem_p_init]), exempt=True)
        self._linear(seed, "refine.linear", cfg.refine_dim, c_in)
        self._bn("refine.bn", cfg.refine_dim)
        self._linear(seed, "neck.linear", cfg.embedding_size, cfg.refine_dim)
        self._bn("neck.bn", cfg.embedding_size)
        if n_classes > 0:
            d = cfg.embedding_size
            shape = (n_classes, self.arc.subcenters, d)
            self._add("head.centers", self._uniform(seed, "head.centers", shape, d))

    # -- bookkeeping

    def backbone_param_count(self) -> int:
        """Trainable parameters of the embedding function (ArcFace head excluded)."""
        return sum(p.value.size for n, p in self.params.items() if p.trainable and not n.startswith("head."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {n: p.value for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def astype(self, dtype) -> "EmbeddingModel":
        other = EmbeddingModel.__new__(EmbeddingModel)
        other.cfg, other.arc, other.dtype = self.cfg, self.arc, np.dtype(dtype)
        other.params = {}
        for n, p in self.params.items():
            q = Parameter(n, p.value.astype(dtype), p.weight_decay_exempt, p.trainable)
            other.params[n] = q
        other.buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        return other

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], arc: ArcFaceConfig | None = None) -> "EmbeddingModel":
        """Rebuild a model from saved tensors, inferring the architecture from shapes.

        Dropout rates are not recoverable from weights and are set to 0 (they
        only matter in train mode).
        """
        blocks = []
        i = 0
        while f"blocks.{i}.conv2.weight" in tensors:
            c_out = tensors[f"blocks.{i}.conv3.weight"].shape[0]
            k = tensors[f"blocks.{i}.conv2.weight"].shape[2]
            blocks.append((c_out, k, 0.0))
            i += 1
        if not blocks:
            raise ValueError("weights contain no convolutional blocks")
        mid0 = tensors["blocks.0.conv1.weight"].shape[0]
        if "stem.size_emb" in tensors:
            size_dim = tensors["stem.size_emb"].shape[1]
            ipt_bins, ipt_dim = tensors["stem.ipt_emb"].shape
            encoding = "emb_ple"
        else:
            size_dim, ipt_dim, ipt_bins, encoding = 20, 10, IPT_BINS, "scalar"
        cfg = BackboneConfig(
            pkt_size_emb_dim=size_dim,
            ipt_emb_dim=ipt_dim,
            ipt_bins=ipt_bins,
            blocks=tuple(blocks),
            bottleneck_ratio=mid0 / blocks[0][0],
            refine_dim=tensors["refine.linear.weight"].shape[0],
            embedding_size=tensors["neck.linear.weight"].shape[0],
            gem_p_init=float(tensors["gem.p"].reshape(-1)[0]),
            encoding=encoding,
        )
        arc = arc or ArcFaceConfig()
        if "head.centers" in tensors:
            arc = ArcFaceConfig(arc.scale, tensors["head.centers"].shape[1], arc.m_min, arc.m_max, arc.lambda_margin)
        n_classes = tensors["head.centers"].shape[0] if "head.centers" in tensors else 0
        dtype = tensors["neck.linear.weight"].dtype
        model = cls(cfg, n_classes, arc, seed=0, dtype=dtype)
        for name, value in tensors.items():
            if name in model.params:
                target = model.params[name].value
            elif name in model.buffers:
                target = model.buffers[name]
            else:
                raise ValueError(f"unexpected tensor {name!r} in weights")
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {target.shape}")
            target[...] = value
        missing = set(model.state()) - set(tensors)
        if missing:
            raise ValueError(f"weights are missing tensors: {sorted(missing)}")
        return model

    # -- forward / backward

    def _v(self, name: str) -> np.ndarray:
        return self.params[name].value

    def _bn_fwd(self, prefix: str, x: np.ndarray, train: bool):
        return K.batchnorm1d(
            x,
            self._v(f"{prefix}.weight"),
            self._v(f"{prefix}.bias"),
            self.buffers[f"{prefix}.running_mean"],
            self.buffers[f"{prefix}.running_var"],
            train,
        )

    def _bn_bwd(self, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
        dx, dg, db = K.batchnorm1d_backward(dout, cache)
        self.params[f"{prefix}.weight"].grad += dg
        self.params[f"{prefix}.bias"].grad += db
        return dx

    def _conv_bwd(self, name: str, dout: np.ndarray, cache) -> np.ndarray:
        dx, dw = K.conv1d_same_backward(dout, cache)
        self.params[name].grad += dw
        return dx

    def stem_forward(self, batch: Batch):
        """Per-packet feature vectors, shape ``(B, 30, R)``."""
        cfg = self.cfg
        dir_oh = K.one_hot(direction_index(batch.dirs), 2, dtype=self.dtype)
        if cfg.encoding == "scalar":
            size_f = (batch.sizes / MAX_PACKET_SIZE)[..., None]
            ipt_f = (np.log1p(np.maximum(batch.ipts, 0)) / math.log1p(IPT_MAX_MS))[..., None]
            x = np.concatenate([size_f, ipt_f, dir_oh], axis=-1).astype(self.dtype)
            return x, None
        se, c_size = K.embedding_lookup(self._v("stem.size_emb"), batch.sizes)
        ie, c_ipt = K.embedding_lookup(self._v("stem.ipt_emb"), ipt_bin_index(batch.ipts, cfg.ipt_bins))
        x = np.concatenate([se, ie, dir_oh], axis=-1)
        return x, (c_size, c_ipt)

    def _stem_backward(self, dx: np.ndarray, cache) -> None:
        if cache is None:
            return
        c_size, c_ipt = cache
        a = self.cfg.pkt_size_emb_dim
        b = a + self.cfg.ipt_emb_dim
        if self.params["stem.size_emb"].trainable:
            self.params["stem.size_emb"].grad += K.embedding_lookup_backward(dx[..., :a], c_size)
            self.params["stem.ipt_emb"].grad += K.embedding_lookup_backward(dx[..., a:b], c_ipt)

    def block_forward(self, i: int, x: np.ndarray, train: bool, rng: np.random.Generator | None):
        """Bottleneck residual block: 1x1 -> k -> dropout -> 1x1 plus (projected) skip."""
        p = f"blocks.{i}"
        rate = self.cfg.blocks[i][2]
        h, c1 = K.conv1d_same(x, self._v(f"{p}.conv1.weight"))
        h, b1 = self._bn_fwd(f"{p}.bn1", h, train)
        h, r1 = K.relu(h)
        h, c2 = K.conv1d_same(h, self._v(f"{p}.conv2.weight"))
        h, b2 = self._bn_fwd(f"{p}.bn2", h, train)
        h, r2 = K.relu(h)
        h, dr = K.dropout(h, rate, train, rng, mask_shape=(h.shape[0], 1, h.shape[2]))
        h, c3 = K.conv1d_same(h, self._v(f"{p}.conv3.weight"))
        h, b3 = self._bn_fwd(f"{p}.bn3", h, train)
        proj = f"{p}.skip.weight" in self.params
        if proj:
            s, cs = K.conv1d_same(x, self._v(f"{p}.skip.weight"))
            s, bs = self._bn_fwd(f"{p}.skip_bn", s, train)
        else:
            s, cs, bs = x, None, None
        out, ro = K.relu(h + s)
        return out, (c1, b1, r1, c2, b2, r2, dr, c3, b3, cs, bs, ro, proj)

    def block_backward(self, i: int, dout: np.ndarray, cache) -> np.ndarray:
        c1, b1, r1, c2, b2, r2, dr, c3, b3, cs, bs, ro, proj = cache
        p = f"blocks.{i}"
        d = K.relu_backward(dout, ro)
        if proj:
            ds = self._bn_bwd(f"{p}.skip_bn", d, bs)
            dx = self._conv_bwd(f"{p}.skip.weight", ds, cs)
        else:
            dx = d
        h = self._bn_bwd(f"{p}.bn3", d, b3)
        h = self._conv_bwd(f"{p}.conv3.weight", h, c3)
        h = K.dropout_backward(h, dr)
        h = K.relu_backward(h, r2)
        h = self._bn_bwd(f"{p}.bn2", h, b2)
        h = self._conv_bwd(f"{p}.conv2.weight", h, c2)
        h = K.relu_backward(h, r1)
        h = self._bn_bwd(f"{p}.bn1", h, b1)
        h = self._conv_bwd(f"{p}.conv1.weight", h, c1)
        return dx + h

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None):
        """Embed a batch; returns ``(embeddings (B, d), cache)``."""
        x, stem_cache = self.stem_forward(batch)
        block_caches = []
        for i in range(len(self.cfg.blocks)):
            x, c = self.block_forward(i, x, train, rng)
            block_caches.append(c)
        g, cg = K.gem_pool(x, self._v("gem.p"))
        h, cl1 = K.linear(g, self._v("refine.linear.weight"), self._v("refine.linear.bias"))
        h, cb1 = self._bn_fwd("refine.bn", h, train)
        h, cr = K.relu(h)
        z, cl2 = K.linear(h, self._v("neck.linear.weight"), self._v("neck.linear.bias"))
        z, cb2 = self._bn_fwd("neck.bn", z, train)
        emb, cn = K.l2_normalize(z)
        return emb, (stem_cache, block_caches, cg, cl1, cb1, cr, cl2, cb2, cn)

    def backward(self, demb: np.ndarray, cache) -> None:
        """Accumulate parameter gradients for upstream gradient ``demb``."""
        stem_cache, block_caches, cg, cl1, cb1, cr, cl2, cb2, cn = cache
        dz = K.l2_normalize_backward(demb, cn)
        dz = self._bn_bwd("neck.bn", dz, cb2)
        dh, dw, db = K.linear_backward(dz, cl2)
        self.params["neck.linear.weight"].grad += dw
        self.params["neck.linear.bias"].grad += db
        dh = K.relu_backward(dh, cr)
        dh = self._bn_bwd("refine.bn", dh, cb1)
        dg, dw, db = K.linear_backward(dh, cl1)
        self.params["refine.linear.weight"].grad += dw
        self.params["refine.linear.bias"].grad += db
        dx, dp = K.gem_pool_backward(dg, cg)
        self.params["gem.p"].grad += dp.astype(self.dtype)
        for i in reversed(range(len(self.cfg.blocks))):
            dx = self.block_backward(i, dx, block_caches[i])
        self._stem_backward(dx, stem_cache)

    def embed(self, batch: Batch, chunk: int = 1024) -> np.ndarray:
        """Eval-mode embeddings, computed in chunks."""
        out = np.empty((len(batch), self.cfg.embedding_size), dtype=self.dtype)
        for start in range(0, len(batch), chunk):
            sl = slice(start, start + chunk)
            sub = Batch(batch.sizes[sl], batch.dirs[sl], batch.ipts[sl])
            out[sl], _ = self.forward(sub, train=False)
        return out

    def loss_and_grad(
        self,
        batch: Batch,
        labels: np.ndarray,
        margins: np.ndarray,
        koleo_weight: float = 1.0,
        rng: np.random.Generator | None = None,
        train: bool = True,
    ) -> float:
        """Train-mode loss ``arcface + koleo_weight * koleo``; gradients are accumulated."""
        emb, cache = self.forward(batch, train=train, rng=rng)
        loss, acache = arcface_loss(emb, labels, self._v("head.centers"), margins, self.arc.scale)
        demb, dcenters = arcface_loss_backward(acache)
        self.params["head.centers"].grad += dcenters.astype(self.dtype)
        if koleo_weight:
            kl, kcache = koleo(emb)
            loss += koleo_weight * kl
            demb = demb + koleo_weight * koleo_backward(kcache)
        self.backward(demb.astype(self.dtype), cache)
        return loss
