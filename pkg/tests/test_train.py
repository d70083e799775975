import math

import numpy as np
import pytest

from flowemb import train as T
from flowemb.data import split_classes
from flowemb.formats import encode_weights
from flowemb.kernels import Parameter
from flowemb.metrics import EvalReport
from flowemb.model import BackboneConfig, EmbeddingModel
from flowemb.synth import GeneratorConfig, gen_dataset
from flowemb.train import (
    OptimizerState,
    Trainer,
    TrainConfig,
    adamw_step,
    audit_decay_exemptions,
    epoch_indices,
    fit,
    is_decay_exempt,
    lr_at,
)

TINY = BackboneConfig(blocks=((8, 3, 0.0), (8, 3, 0.0), (12, 3, 0.2)), refine_dim=12, embedding_size=6)


# -- schedule


def test_lr_examples():
    cfg = TrainConfig()
    total = cfg.total_iters
    assert lr_at(0, total, cfg) == 0.0025 / 3
    assert lr_at(150, total, cfg) == 0.0025
    assert lr_at(total - 1, total, cfg) < 0.0025 * 1e-3


def test_lr_continuous_at_junction():
    cfg = TrainConfig()
    total = cfg.total_iters
    before, at, after = (lr_at(i, total, cfg) for i in (149, 150, 151))
    slope = (0.0025 - 0.0025 / 3) / 150
    assert at - before == pytest.approx(slope, rel=1e-9)
    assert at - after < slope


def test_lr_range_checked():
    cfg = TrainConfig(epochs=1, samples_per_epoch=512, batch=256)
    with pytest.raises(ValueError):
        lr_at(2, 2, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, 2, cfg)


def test_total_iters_rounds_up():
    assert TrainConfig(epochs=3, samples_per_epoch=1000, batch=256).total_iters == 12


# -- AdamW


def param(name, value, exempt):
    p = Parameter(name, np.array(value, dtype=np.float64))
    p.weight_decay_exempt = exempt
    return p


def test_zero_grad_exempt_unchanged():
    p = param("x.bias", [1.0, -2.0, 3.0], True)
    adamw_step({"x.bias": p}, OptimizerState(), 0.01, 0.5)
    assert p.value.tolist() == [1.0, -2.0, 3.0]


def test_zero_grad_decayed_scaled():
    p = param("x.weight", [1.0, -2.0, 3.0], False)
    adamw_step({"x.weight": p}, OptimizerState(), 0.01, 0.5)
    f = 1 - 0.01 * 0.5
    assert p.value.tolist() == [1.0 * f, -2.0 * f, 3.0 * f]


def reference_adamw(values, grads_seq, lr, wd):
    """Scalar AdamW written from the update rule, one element at a time."""
    x = list(values)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, g in enumerate(grads_seq, start=1):
        for i in range(len(x)):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mhat = m[i] / (1 - 0.9 ** t)
            vhat = v[i] / (1 - 0.999 ** t)
            x[i] = x[i] * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + 1e-8)
    return x


def test_matches_reference_adamw():
    rng = np.random.default_rng(0)
    start = rng.normal(size=3)
    grads = [rng.normal(size=3) for _ in range(4)]
    p = param("w", start, False)
    state = OptimizerState()
    for g in grads:
        p.grad[...] = g
        adamw_step({"w": p}, state, 0.0025, 0.0017)
        if state.step == 1:
            np.testing.assert_allclose(p.value, reference_adamw(start, grads[:1], 0.0025, 0.0017), rtol=0, atol=1e-12)
    np.testing.assert_allclose(p.value, reference_adamw(start, grads, 0.0025, 0.0017), rtol=0, atol=1e-12)
    assert state.m["w"].shape == state.v["w"].shape == (3,)


def test_non_finite_gradient_aborts():
    p = param("w", [1.0, 2.0], False)
    p.grad[1] = np.nan
    with pytest.raises(T.NumericalError, match="w"):
        adamw_step({"w": p}, OptimizerState(), 0.01, 0.0)
    assert p.value.tolist() == [1.0, 2.0]


# -- decay exemption


def test_exemption_audit_on_real_model():
    model = EmbeddingModel(None, 5)
    audit_decay_exemptions(model)
    exempt = {n for n, p in model.params.items() if p.weight_decay_exempt}
    assert "stem.size_emb" in exempt and "stem.ipt_emb" in exempt and "gem.p" in exempt
    assert all(n.endswith(".bias") or "bn" in n or n.split(".")[0] in ("stem", "gem") for n in exempt)
    decayed = set(model.params) - exempt
    assert any("conv" in n for n in decayed) and "head.centers" in decayed


def test_exemption_patterns():
    assert is_decay_exempt("refine.bias")
    assert is_decay_exempt("block2.bn1.weight")
    assert not is_decay_exempt("block2.conv1.weight")
    assert not is_decay_exempt("head.centers")


def test_audit_catches_flipped_flag():
    model = EmbeddingModel(TINY, 3)
    model.params["gem.p"].weight_decay_exempt = False
    with pytest.raises(ValueError, match="gem.p"):
        audit_decay_exemptions(model)


# -- epochs


def test_lambda_zero_keeps_dataset_shares():
    labels = np.repeat([0, 1, 2], [600, 300, 100])
    cfg = TrainConfig(samples_per_epoch=500, lambda_sampler=0.0)
    shares = np.mean([np.bincount(labels[epoch_indices(labels, cfg, e)], minlength=3) / 500 for e in range(40)], axis=0)
    np.testing.assert_allclose(shares, [0.6, 0.3, 0.1], atol=0.02)


def test_epoch_draws_with_replacement_when_pool_is_small():
    labels = np.repeat([0, 1], [30, 10])
    idx = epoch_indices(labels, TrainConfig(samples_per_epoch=100), 0)
    assert len(idx) == 100
    share = np.mean(labels[idx] == 1)
    assert 0.2 < share < 0.55


def toy_problem(seed, n_classes=5, samples=400):
    flows, table = gen_dataset(GeneratorConfig(n_classes=n_classes, samples_total=samples, family_size=5, seed=seed))
    return flows, table


def test_toy_loss_decreases():
    per_seed = []
    for seed in range(5):
        flows, table = toy_problem(seed)
        cfg = TrainConfig(epochs=3, samples_per_epoch=256, batch=32, warmup_iters=4, seed=seed, lr=0.01)
        tr = Trainer(flows, table, range(5), cfg, TINY)
        per_seed.append([tr.train_epoch(e) for e in range(3)])
    med = np.median(per_seed, axis=0)
    assert med[0] > med[1] > med[2]


def test_train_epoch_is_deterministic():
    flows, table = toy_problem(1)
    cfg = TrainConfig(epochs=1, samples_per_epoch=96, batch=32, warmup_iters=2, seed=7)
    runs = []
    for _ in range(2):
        tr = Trainer(flows, table, range(5), cfg, TINY)
        tr.train_epoch(0)
        runs.append(encode_weights(tr.model.state()))
    assert runs[0] == runs[1]


# -- fit


def fake_report(recall):
    return EvalReport("top1", recall, recall, (recall,) * 4)


def small_split(seed=0):
    flows, table = gen_dataset(GeneratorConfig(n_classes=12, samples_total=600, family_size=4, seed=seed))
    return flows, table, split_classes(table, (6, 3, 3), seed)


def test_fit_validation_cadence(monkeypatch):
    monkeypatch.setattr(Trainer, "train_epoch", lambda self, e: 0.0)
    monkeypatch.setattr(T, "evaluate", lambda *a, **k: fake_report(0.5))
    flows, table, splits = small_split()
    res = fit(flows, table, splits, TrainConfig(epochs=30), TINY)
    assert [e for e, _ in res.history] == list(range(2, 31, 2))
    # a model that never improves keeps the first validated checkpoint
    assert res.best.epoch == 2


def test_fit_keeps_best_and_earliest_tie(monkeypatch):
    recalls = iter([0.2, 0.6, 0.6, 0.4])
    monkeypatch.setattr(Trainer, "train_epoch", lambda self, e: 0.0)
    monkeypatch.setattr(T, "evaluate", lambda *a, **k: fake_report(next(recalls)))
    flows, table, splits = small_split()
    res = fit(flows, table, splits, TrainConfig(epochs=8), TINY)
    assert res.best.epoch == 4


def test_fit_validates_final_odd_epoch(monkeypatch):
    monkeypatch.setattr(Trainer, "train_epoch", lambda self, e: 0.0)
    monkeypatch.setattr(T, "evaluate", lambda *a, **k: fake_report(0.5))
    flows, table, splits = small_split()
    res = fit(flows, table, splits, TrainConfig(epochs=5), TINY)
    assert [e for e, _ in res.history] == [2, 4, 5]


def test_fit_never_validates_on_other_splits(monkeypatch):
    seen = []

    def spy(model, database, queries, table, k=20, scheme="top1"):
        seen.append(set(database.labels.tolist()) | set(queries.labels.tolist()))
        return fake_report(0.5)

    monkeypatch.setattr(Trainer, "train_epoch", lambda self, e: 0.0)
    monkeypatch.setattr(T, "evaluate", spy)
    flows, table, splits = small_split()
    fit(flows, table, splits, TrainConfig(epochs=4), TINY)
    assert seen and all(s <= set(splits.val_classes) for s in seen)


def test_fit_requires_validation_classes():
    flows, table, splits = small_split()
    empty = type(splits)(splits.train_classes, frozenset(), splits.test_classes, splits.seed)
    with pytest.raises(ValueError, match="validation"):
        fit(flows, table, empty, TrainConfig(epochs=1), TINY)


def test_fit_reproducible(tmp_path):
    flows, table, splits = small_split(3)
    cfg = TrainConfig(epochs=2, samples_per_epoch=64, batch=32, warmup_iters=2, seed=3)
    a = fit(flows, table, splits, cfg, TINY, log_path=tmp_path / "a.csv")
    b = fit(flows, table, splits, cfg, TINY, log_path=tmp_path / "b.csv")
    assert a.best.epoch == b.best.epoch
    assert encode_weights(a.best.state) == encode_weights(b.best.state)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("epoch,accuracy,macro_recall,q1,q2,q3,q4\n2,")
