import json
import os
import subprocess
import sys

import numpy as np
import pytest
from fixtures_data import quartile_fixture

from flowemb import cli, formats
from flowemb.data import ClassTable, read_flows_csv
from flowemb.retrieval import EmbeddingDB

SMALL_CONFIG = """\
epochs = 2
batch = 32
samples_per_epoch = 64
warmup_iters = 2
embedding_size = 32
k = 5
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    (d / "small.cfg").write_text(SMALL_CONFIG)
    assert run("synth", "--out", d / "flows.csv", "--classes-out", d / "classes.csv",
               "--n-classes", 9, "--samples", 450, "--seed", 2) == 0
    assert run("split", "--classes", d / "classes.csv", "--out", d / "splits", "--counts", "5,2,2", "--seed", 2) == 0
    assert run("train", "--flows", d / "flows.csv", "--classes", d / "classes.csv", "--splits", d / "splits",
               "--out", d / "w.bin", "--config", d / "small.cfg") == 0
    assert run("partition", "--flows", d / "flows.csv", "--classes", d / "classes.csv", "--splits", d / "splits",
               "--db-out", d / "db.csv", "--queries-out", d / "q.csv", "--config", d / "small.cfg") == 0
    for name in ("db", "q"):
        assert run("embed", "--weights", d / "w.bin", "--flows", d / f"{name}.csv", "--classes", d / "classes.csv",
                   "--out", d / f"{name}.emb", "--config", d / "small.cfg") == 0
    return d


def test_pipeline_writes_manifests(pipeline):
    m = json.loads((pipeline / "w.bin.manifest.json").read_text())
    assert m["command"] == "train"
    assert m["config"]["epochs"] == 2 and m["config"]["seed"] == 0
    assert m["outputs"]["weights"]["sha256"] == formats.sha256_file(pipeline / "w.bin")
    assert m["inputs"]["flows"]["sha256"] == formats.sha256_file(pipeline / "flows.csv")
    assert (pipeline / "w.bin.metrics.csv").read_text().startswith("epoch,accuracy")


def test_partition_has_disjoint_rows(pipeline):
    db, q = read_flows_csv(pipeline / "db.csv"), read_flows_csv(pipeline / "q.csv")
    assert not set(db.flow_ids.tolist()) & set(q.flow_ids.tolist())


def test_self_rank_retrieves_itself(pipeline):
    out = pipeline / "self.csv"
    assert run("rank", "--db", pipeline / "db.emb", "--queries", pipeline / "db.emb", "--k", 3, "--out", out) == 0
    nb = formats.load_neighbors(out)
    db = formats.load_embdb(pipeline / "db.emb")
    # a row can only lose first place to an exact duplicate with a smaller index
    first = nb.indices[:, 0]
    same = np.all(db.vectors[first] == db.vectors, axis=1)
    assert same.all()
    assert (first == np.arange(len(db))).mean() > 0.9


def test_train_twice_identical(pipeline, tmp_path):
    d = pipeline
    assert run("train", "--flows", d / "flows.csv", "--classes", d / "classes.csv", "--splits", d / "splits",
               "--out", tmp_path / "w2.bin", "--config", d / "small.cfg") == 0
    assert (tmp_path / "w2.bin").read_bytes() == (d / "w.bin").read_bytes()


def test_eval_and_baseline_reports(pipeline, capsys):
    out = pipeline / "report.txt"
    assert run("eval", "--db", pipeline / "db.emb", "--queries", pipeline / "q.emb", "--classes",
               pipeline / "classes.csv", "--scheme", "maj3", "--out", out) == 0
    assert out.read_text().startswith("maj3,")
    assert run("baseline", "--train", pipeline / "db.csv", "--test", pipeline / "q.csv", "--classes",
               pipeline / "classes.csv", "--out", pipeline / "base.txt") == 0
    assert len((pipeline / "base.txt").read_text().strip().split(",")) == 7
    assert "accuracy=" in capsys.readouterr().out


def test_eval_hand_fixture(tmp_path):
    pred, truth, table = quartile_fixture()
    table.save(tmp_path / "classes.csv")
    eye = np.eye(4)
    formats.save_embdb(tmp_path / "db.emb", EmbeddingDB(eye, np.arange(4)), table.names)
    formats.save_embdb(tmp_path / "q.emb", EmbeddingDB(eye[pred], truth), table.names)
    assert run("eval", "--db", tmp_path / "db.emb", "--queries", tmp_path / "q.emb",
               "--classes", tmp_path / "classes.csv", "--out", tmp_path / "r.txt") == 0
    assert (tmp_path / "r.txt").read_text() == "top1,0.700000,0.750000,1.000000,0.000000,1.000000,1.000000\n"


def test_sweep_lambda_db(pipeline, tmp_path):
    d = pipeline
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--flows", d / "flows.csv", "--classes", d / "classes.csv", "--splits", d / "splits",
               "--param", "lambda_db", "--values", "0,1", "--weights", d / "w.bin", "--config", d / "small.cfg",
               "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("lambda_db,scheme") and len(lines) == 3


# -- exit codes


def test_exit_codes(pipeline, tmp_path, monkeypatch):
    d = pipeline
    truncated = tmp_path / "cut.bin"
    truncated.write_bytes((d / "w.bin").read_bytes()[:-20])
    embed = ["embed", "--flows", d / "q.csv", "--classes", d / "classes.csv", "--out", tmp_path / "x.emb",
             "--config", d / "small.cfg", "--weights"]
    assert run(*embed, truncated) == 4
    assert run(*embed, tmp_path / "absent.bin") == 3
    bad_csv = tmp_path / "bad.csv"
    bad_csv.write_text("not,a,flow,file\n")
    assert run("baseline", "--train", bad_csv, "--test", d / "q.csv", "--classes", d / "classes.csv") == 3
    assert run("rank", "--db", d / "db.emb") == 2
    assert run("sweep", "--flows", d / "flows.csv", "--classes", d / "classes.csv", "--splits", d / "splits",
               "--param", "lambda_db", "--values", "0") == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("no_such_key = 1\n")
    assert run(*embed[:-2], "--config", bad_cfg, "--weights", d / "w.bin") == 2
    monkeypatch.setenv("FLOWEMB_THREADS", "0")
    assert run("rank", "--db", d / "db.emb", "--queries", d / "q.emb", "--out", tmp_path / "n.csv") == 2


def test_numerical_failure_exit_code(pipeline, tmp_path):
    state = formats.load_weights(pipeline / "w.bin")
    name = next(n for n in state if n.endswith("conv1.weight"))
    state[name] = np.full_like(state[name], np.nan)
    formats.save_weights(tmp_path / "nan.bin", state)
    assert run("embed", "--weights", tmp_path / "nan.bin", "--flows", pipeline / "q.csv", "--classes",
               pipeline / "classes.csv", "--out", tmp_path / "x.emb", "--config", pipeline / "small.cfg") == 5


def test_embdb_corruption_exit_code(pipeline, tmp_path):
    data = bytearray((pipeline / "db.emb").read_bytes())
    data[20] ^= 0x04
    (tmp_path / "bad.emb").write_bytes(bytes(data))
    assert run("rank", "--db", tmp_path / "bad.emb", "--queries", pipeline / "q.emb", "--out", tmp_path / "n.csv") == 4


@pytest.mark.parametrize("threads", ["1", "4"])
def test_entry_point_thread_invariance(pipeline, tmp_path, threads):
    env = {**os.environ, "FLOWEMB_THREADS": threads}
    out = tmp_path / f"n{threads}.csv"
    subprocess.run([sys.executable, "-m", "flowemb", "rank", "--db", str(pipeline / "db.emb"), "--queries",
                    str(pipeline / "q.emb"), "--k", "5", "--out", str(out)], check=True, env=env)
    ref = pipeline / "ref_neighbors.csv"
    if not ref.exists():
        assert run("rank", "--db", pipeline / "db.emb", "--queries", pipeline / "q.emb", "--k", 5, "--out", ref) == 0
    assert out.read_bytes() == ref.read_bytes()


def test_classes_file_matches_synth(pipeline):
    table = ClassTable.load(pipeline / "classes.csv")
    assert sum(table.counts) == 450 and len(table) == 9
