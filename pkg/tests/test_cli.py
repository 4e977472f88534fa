import json

import numpy as np
import pytest

from graphtext import data
from graphtext import numerics as nx
from graphtext.cli import embed_records, main, read_vectors
from graphtext.training import Checkpoint

GEN = """task = "pair"
variant = "graph-sensitive"
seed = 4
sizes = { train = 24, dev = 8, test = 8 }
"""

RUN = """task = "pair"
output = "runs/out"

[data]
train = "data/train.jsonl"
dev = "data/dev.jsonl"
test = "data/test.jsonl"

[backbone]
vocab_size = 64
dim = 16
num_layers = 1
ffn_dim = 32
context_length = 32

[encoder]
hidden_dim = 8
num_layers = 2

[train]
epochs = 1
batch_size = 8
precision = "float64"
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "gen.toml").write_text(GEN)
    (tmp_path / "run.toml").write_text(RUN)
    assert main(["gen", str(tmp_path / "gen.toml"), str(tmp_path / "data")]) == 0
    return tmp_path


def test_gen_writes_three_identical_splits(workdir, tmp_path_factory):
    again = tmp_path_factory.mktemp("again")
    assert main(["gen", str(workdir / "gen.toml"), str(again)]) == 0
    for split in ("train", "dev", "test"):
        assert (workdir / "data" / f"{split}.jsonl").read_bytes() == (again / f"{split}.jsonl").read_bytes()


def test_gen_missing_spec(tmp_path, capsys):
    assert main(["gen", str(tmp_path / "nope.toml"), str(tmp_path)]) == 1
    assert "nope.toml" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1


def test_train_eval_embed(workdir, capsys):
    assert main(["train", str(workdir / "run.toml"), "--set", "train.lam=0.1"]) == 0
    out = capsys.readouterr().out
    echoed = json.loads(out.splitlines()[0].removeprefix("# config: "))
    assert echoed["train"]["lam"] == 0.1 and echoed["model"]["encoder"]["relation_count"] == 9
    run = workdir / "runs" / "out"
    assert (run / "best.manifest").exists() and (run / "best.params").exists()
    rows = [r.split("\t") for r in (run / "metrics.tsv").read_text().splitlines()]
    assert {r[2] for r in rows} == {"train", "dev", "test"}

    assert main(["eval", str(run / "best"), str(workdir / "data" / "test.jsonl")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# config: ")
    assert {ln.split("\t")[3] for ln in lines[1:]} == {"accuracy", "distance"}

    dev = workdir / "data" / "dev.jsonl"
    assert main(["embed", str(run / "best"), str(dev), str(workdir / "vec" / "dev")]) == 0
    ids, vectors = read_vectors(workdir / "vec" / "dev")
    records = data.load(dev)
    assert ids == [r.id for r in records]
    model = Checkpoint.load(run / "best").restore()
    with nx.precision("float64"):
        want = embed_records(model, records)
    assert vectors.dtype == np.dtype("<f4") and vectors.tobytes() == want.tobytes()


def test_embed_empty_dataset_warns(workdir):
    assert main(["train", str(workdir / "run.toml"), "--epochs", "0", "--out", str(workdir / "r0")]) == 0
    empty = workdir / "empty.jsonl"
    empty.write_text("")
    with pytest.warns(UserWarning, match="empty"):
        assert main(["embed", str(workdir / "r0" / "best"), str(empty), str(workdir / "e")]) == 0
    ids, vectors = read_vectors(workdir / "e")
    assert ids == [] and vectors.shape == (0, 16)


def test_train_rejects_negative_lambda(workdir, capsys):
    assert main(["train", str(workdir / "run.toml"), "--set", "train.lam=-1"]) == 1
    assert "lambda" in capsys.readouterr().err
    assert main(["train", str(workdir / "run.toml"), "--set", "nonsense"]) == 1


def test_flags_reach_the_config(workdir, capsys):
    args = ["train", str(workdir / "run.toml"), "--epochs", "0", "--no-graph", "--no-align",
            "--branch", "orig-only", "--gnn-layers", "3", "--seed", "5", "--out", str(workdir / "f")]
    assert main(args) == 0
    cfg = json.loads(capsys.readouterr().out.splitlines()[0].removeprefix("# config: "))
    assert cfg["model"]["use_graph"] is False and cfg["train"]["lam"] == 0.0
    assert cfg["train"]["branch"] == "orig-only" and cfg["model"]["encoder"]["num_layers"] == 3
    assert cfg["train"]["seed"] == 5


def test_eval_on_wrong_task_fails(workdir, capsys):
    assert main(["train", str(workdir / "run.toml"), "--epochs", "0", "--out", str(workdir / "r")]) == 0
    qa = workdir / "qa.jsonl"
    data.save(qa, data.generate(data.GeneratorSpec(task="qa", sizes={"train": 2}, nodes_min=6))["train"])
    assert main(["eval", str(workdir / "r" / "best"), str(qa)]) != 0
    assert "task" in capsys.readouterr().err
    assert main(["eval", str(workdir / "missing"), str(qa)]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert "gradient check passed" in capsys.readouterr().out
    assert main(["gradcheck", "--inject-fault"]) == 2
    err = capsys.readouterr().err
    assert "FAILED blocks" in err and "weight" in err
