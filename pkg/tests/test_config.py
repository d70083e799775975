import pytest

from flowemb.config import ConfigError, ExperimentConfig, load_config, parse_config


def test_defaults_match_desk_settings():
    cfg = ExperimentConfig()
    tc = cfg.train()
    assert (tc.lr, tc.warmup_iters, tc.weight_decay, tc.batch, tc.epochs) == (0.0025, 150, 0.0017, 256, 30)
    arc = cfg.arcface()
    assert (arc.scale, arc.subcenters, arc.m_min, arc.m_max) == (30.0, 3, 0.15, 0.25)
    assert cfg.backbone().embedding_size == 256


def test_parse_with_comments_and_types():
    cfg = parse_config("# desk run\nembedding_size = 64  # smaller\nlr=0.01\n\nencoding = scalar\n")
    assert cfg.embedding_size == 64 and cfg.lr == 0.01 and cfg.encoding == "scalar"
    assert isinstance(cfg.embedding_size, int)


def test_dumps_roundtrip():
    cfg = ExperimentConfig().replace(seed=9, lambda_db=0.25)
    assert parse_config(cfg.dumps()) == cfg


@pytest.mark.parametrize("text,match", [
    ("nonsense = 1", "unknown key"),
    ("k = 3\nk = 4", "duplicate"),
    ("epochs = many", "expected int"),
    ("just words", "key = value"),
    ("epochs = 0", "epochs"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_config(tmp_path):
    assert load_config(None) == ExperimentConfig()
    p = tmp_path / "c.cfg"
    p.write_text("seed = 4\n")
    assert load_config(p).seed == 4
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
