import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from flowemb.data import read_flows_csv, write_flows_csv
from flowemb.synth import GeneratorConfig, class_shares, gen_dataset, make_templates


def small(**kw):
    base = dict(n_classes=8, samples_total=400, family_size=4)
    base.update(kw)
    return GeneratorConfig(**base)


def test_uniform_classes():
    flows, table = gen_dataset(small(n_classes=4, samples_total=400, zipf_exponent=0.0))
    assert table.counts == [100, 100, 100, 100]
    np.testing.assert_array_equal(np.bincount(flows.labels), [100] * 4)


@pytest.mark.parametrize("total,expected", [(250, [120, 60, 40, 30]), (100, [48, 24, 16, 12])])
def test_harmonic_shares(total, expected):
    # weights 1, 1/2, 1/3, 1/4 sum to 25/12, so total * 12/25 * w is integral here
    assert class_shares(small(n_classes=4, samples_total=total, zipf_exponent=1.0)).tolist() == expected


def test_every_class_gets_two_flows():
    counts = class_shares(GeneratorConfig(n_classes=50, samples_total=100, zipf_exponent=3.0))
    assert counts.min() >= 2 and counts.sum() == 100


def test_table_counts_match_records():
    flows, table = gen_dataset(small(samples_total=500, zipf_exponent=1.0))
    np.testing.assert_array_equal(np.bincount(flows.labels, minlength=len(table)), table.counts)


def test_same_config_same_bytes(tmp_path):
    cfg = small()
    write_flows_csv(gen_dataset(cfg)[0], tmp_path / "a.csv")
    write_flows_csv(gen_dataset(cfg)[0], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_seed_changes_output():
    a, _ = gen_dataset(small(seed=0))
    b, _ = gen_dataset(small(seed=1))
    assert not np.array_equal(a.sizes, b.sizes)


def test_rejects_too_few_samples():
    with pytest.raises(ValueError):
        GeneratorConfig(n_classes=10, samples_total=19)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), zipf=st.floats(0.0, 2.0))
def test_emitted_sequences_are_valid(seed, zipf, tmp_path_factory):
    flows, _ = gen_dataset(small(seed=seed, zipf_exponent=zipf, samples_total=80))
    for i in range(len(flows)):
        rec = flows.record(i)
        n = rec.pkts.pkt_count
        assert 1 <= n <= 30
        assert all(1 <= s <= 1500 for s in rec.pkts.sizes[:n])
        assert all(d in (-1, 1) for d in rec.pkts.directions[:n])
        assert rec.pkts.ipts[0] == 0.0
    path = tmp_path_factory.mktemp("synth") / "f.csv"
    write_flows_csv(flows, path)
    back = read_flows_csv(path)
    np.testing.assert_array_equal(back.sizes, flows.sizes)


def test_templates_never_collide():
    # tiny size ranges force candidate collisions, which must be redrawn
    cfg = GeneratorConfig(n_classes=60, samples_total=120, family_size=10)
    sigs = [t.signature() for t in make_templates(cfg)]
    assert len(set(sigs)) == len(sigs) == 60


def test_family_members_share_prefix():
    cfg = GeneratorConfig()
    tpls = make_templates(cfg)
    a, b = tpls[0].modes[0], tpls[1].modes[0]
    lo = cfg.prefix_len[0]
    np.testing.assert_array_equal(a.base_sizes[:lo], b.base_sizes[:lo])
    assert not np.array_equal(a.base_sizes[lo:], tpls[cfg.family_size].modes[0].base_sizes[lo:len(a.base_sizes)])


def raw_features(flows):
    return np.concatenate([flows.sizes, flows.dirs, np.log1p(flows.ipts)], axis=1).astype(np.float64)


def test_intra_class_neighbors_are_closer():
    flows, _ = gen_dataset(GeneratorConfig())
    sub = np.random.default_rng(0).choice(len(flows), 3000, replace=False)
    vec = raw_features(flows)[sub]
    lab = flows.labels[sub]
    d = cdist(vec, vec, metric="cityblock")
    np.fill_diagonal(d, np.inf)
    same = lab[:, None] == lab[None, :]
    intra = np.where(same, d, np.inf).min(axis=1)
    inter = np.where(~same, d, np.inf).min(axis=1)
    ok = np.isfinite(intra)
    assert intra[ok].mean() < inter[ok].mean()
