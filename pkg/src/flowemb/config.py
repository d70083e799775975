"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .model import ArcFaceConfig, BackboneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # architecture
    pkt_size_emb_dim: int = 20
    ipt_emb_dim: int = 10
    ipt_bins: int = 200
    encoding: str = "emb_ple"
    bottleneck_ratio: float = 0.25
    refine_dim: int = 448
    embedding_size: int = 256
    gem_p_init: float = 3.0
    # head
    scale: float = 30.0
    subcenters: int = 3
    m_min: float = 0.15
    m_max: float = 0.25
    lambda_margin: float = 0.25
    # optimisation
    lr: float = 0.0025
    warmup_iters: int = 150
    weight_decay: float = 0.0017
    koleo_weight: float = 1.0
    epochs: int = 30
    batch: int = 256
    samples_per_epoch: int = 20_000
    lambda_sampler: float = 0.5
    validate_every: int = 2
    # evaluation
    lambda_db: float = 0.5
    query_frac: float = 0.4
    db_frac: float = 0.3
    k: int = 20
    seed: int = 0

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            pkt_size_emb_dim=self.pkt_size_emb_dim,
            ipt_emb_dim=self.ipt_emb_dim,
            ipt_bins=self.ipt_bins,
            bottleneck_ratio=self.bottleneck_ratio,
            refine_dim=self.refine_dim,
            embedding_size=self.embedding_size,
            gem_p_init=self.gem_p_init,
            encoding=self.encoding,
        )

    def arcface(self) -> ArcFaceConfig:
        return ArcFaceConfig(self.scale, self.subcenters, self.m_min, self.m_max, self.lambda_margin)

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            samples_per_epoch=self.samples_per_epoch,
            batch=self.batch,
            lr=self.lr,
            warmup_iters=self.warmup_iters,
            weight_decay=self.weight_decay,
            lambda_sampler=self.lambda_sampler,
            koleo_weight=self.koleo_weight,
            validate_every=self.validate_every,
            seed=self.seed,
            val_query_frac=self.query_frac,
            val_db_frac=self.db_frac,
            lambda_db=self.lambda_db,
            k=self.k,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = type(getattr(ExperimentConfig(), key))
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    cfg = dataclasses.replace(base or ExperimentConfig(), **values)
    try:
        cfg.backbone(), cfg.arcface(), cfg.train()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
