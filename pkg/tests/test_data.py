import json
import time

import pytest

from graphtext import data
from graphtext.alignment import serialize_graph
from graphtext.data import DatasetError, GeneratorSpec
from graphtext.graph import validate_graph
from graphtext.tasks import PairInstance, QaInstance, RetrievalInstance

SMALL = {"train": 30, "dev": 10, "test": 10}


def graphs_of(rec):
    if isinstance(rec, RetrievalInstance):
        return [rec.query.graph] + [d.graph for d in rec.pool]
    return [rec.graph]


def all_records(spec):
    return [r for recs in data.generate(spec).values() for r in recs]


@pytest.mark.parametrize("variant", ["standard", "graph-sensitive"])
def test_pairs_are_balanced(variant):
    spec = GeneratorSpec(task="pair", variant=variant, sizes={"train": 40, "dev": 7})
    out = data.generate(spec)
    assert sum(r.label for r in out["train"]) == 20
    assert sum(r.label for r in out["dev"]) == 3


def test_standard_pair_labels_match_serialisation_oracle():
    for rec in all_records(GeneratorSpec(task="pair", sizes=SMALL)):
        assert (rec.text == serialize_graph(rec.graph)) == bool(rec.label)


def test_graph_sensitive_labels_match_schema_oracle():
    spec = GeneratorSpec(task="pair", variant="graph-sensitive", sizes=SMALL)
    for rec in all_records(spec):
        assert data.schema_consistent(rec.graph, spec.domain_types) == bool(rec.label)
        assert rec.text == f"a statement about {rec.graph.nodes[0].name}"


def test_pair_noise_flips_labels():
    spec = GeneratorSpec(task="pair", sizes={"train": 400}, noise=0.5)
    flipped = sum((r.text == serialize_graph(r.graph)) != bool(r.label) for r in all_records(spec))
    assert 120 < flipped < 280


def test_pair_needs_two_records():
    with pytest.raises(DatasetError):
        data.generate(GeneratorSpec(task="pair", sizes={"train": 1}))


def test_qa_gold_follows_the_path():
    spec = GeneratorSpec(task="qa", sizes=SMALL, nodes_min=6, nodes_max=10)
    for rec in all_records(spec):
        assert len(rec.choices) == 5
        holds = [data.qa_path_holds(rec, j) for j in range(5)]
        assert holds[rec.gold] and sum(holds) == 1
        assert rec.choices[rec.gold] == rec.graph.nodes[rec.choice_nodes[rec.gold]].name


def test_qa_graph_too_small():
    with pytest.raises(DatasetError):
        data.generate(GeneratorSpec(task="qa", nodes_min=3, nodes_max=4))


def test_retrieval_has_one_relevant_candidate():
    spec = GeneratorSpec(task="retrieval", sizes=SMALL, pool_size=6)
    for rec in all_records(spec):
        ids = [d.id for d in rec.pool]
        assert len(set(ids)) == len(ids) == 6
        assert rec.gains == {rec.positive.id: 1.0} and rec.positive in rec.pool
        overlaps = [bool(data.motif_overlap(rec.query.graph, d.graph)) for d in rec.pool]
        assert overlaps.count(True) == 1 and overlaps[ids.index(rec.positive.id)]


@pytest.mark.parametrize("task", ["pair", "qa", "retrieval"])
def test_generated_graphs_are_valid_and_capped(task):
    spec = GeneratorSpec(task=task, sizes=SMALL, nodes_min=6, nodes_max=9)
    records = all_records(spec)
    for rec in records:
        for g in graphs_of(rec):
            assert validate_graph(g) == [] and g.num_nodes <= spec.node_cap
    ids = [r.id for r in records]
    assert len(set(ids)) == len(ids)


def test_spec_validation():
    with pytest.raises(DatasetError):
        GeneratorSpec(nodes_max=300)
    with pytest.raises(DatasetError):
        GeneratorSpec(n_choice=1)
    with pytest.raises(DatasetError):
        GeneratorSpec(pool_size=1)
    with pytest.raises(DatasetError):
        GeneratorSpec(task="summaries")


def test_spec_from_toml(tmp_path):
    path = tmp_path / "gen.toml"
    path.write_text('task = "qa"\nseed = 3\nnodes_min = 6\n[sizes]\ntrain = 4\n')
    spec = GeneratorSpec.from_toml(path)
    assert spec.task == "qa" and spec.sizes == {"train": 4}
    path.write_text("colour = 1\n")
    with pytest.raises(DatasetError, match="colour"):
        GeneratorSpec.from_toml(path)
    with pytest.raises(DatasetError, match="not found"):
        GeneratorSpec.from_toml(tmp_path / "missing.toml")


@pytest.mark.parametrize("task", ["pair", "qa", "retrieval"])
def test_same_seed_gives_identical_bytes(tmp_path, task):
    spec = GeneratorSpec(task=task, sizes=SMALL, nodes_min=6)
    a = data.write_splits(spec, tmp_path / "a")
    b = data.write_splits(spec, tmp_path / "b")
    for split in SMALL:
        assert a[split].read_bytes() == b[split].read_bytes()
    c = data.write_splits(GeneratorSpec(task=task, sizes=SMALL, nodes_min=6, seed=1), tmp_path / "c")
    assert c["train"].read_bytes() != a["train"].read_bytes()


@pytest.mark.parametrize("task", ["pair", "qa", "retrieval"])
def test_round_trip(tmp_path, task):
    records = data.generate(GeneratorSpec(task=task, sizes={"train": 6}, nodes_min=6))["train"]
    data.save(tmp_path / "x.jsonl", records)
    assert data.load(tmp_path / "x.jsonl") == records


def test_truncated_final_line(tmp_path):
    path = tmp_path / "x.jsonl"
    data.save(path, data.generate(GeneratorSpec(sizes={"train": 3}))["train"])
    text = path.read_text()
    path.write_text(text[: len(text) - 20])
    with pytest.raises(DatasetError, match="line 3"):
        data.load(path)


def test_unknown_field_names_line_and_field(tmp_path):
    recs = data.generate(GeneratorSpec(sizes={"train": 2}))["train"]
    rows = [data.to_json(r) for r in recs]
    rows[1]["colour"] = "red"
    path = tmp_path / "x.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(DatasetError, match=r"line 2: field 'colour'"):
        data.load(path)


def test_bad_graph_rejected(tmp_path):
    row = data.to_json(data.generate(GeneratorSpec(sizes={"train": 2}))["train"][0])
    row["graph"]["edges"].append({"src": 0, "rel": 0, "dst": 99})
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps(row) + "\n")
    with pytest.raises(DatasetError, match="dangling dst"):
        data.load(path)


def test_wrong_type_and_duplicate_id(tmp_path):
    row = data.to_json(data.generate(GeneratorSpec(sizes={"train": 2}))["train"][0])
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps({**row, "label": "yes"}) + "\n")
    with pytest.raises(DatasetError, match="field 'label'"):
        data.load(path)
    path.write_text((json.dumps(row) + "\n") * 2)
    with pytest.raises(DatasetError, match="line 2: field 'id'"):
        data.load(path)


def test_ten_thousand_records_load_quickly(tmp_path):
    base = data.generate(GeneratorSpec(sizes={"train": 100}))["train"]
    records = [PairInstance(f"r{i}-{b.id}", b.graph, b.text, b.linked, b.label) for i in range(100) for b in base]
    path = tmp_path / "big.jsonl"
    data.save(path, records)
    start = time.perf_counter()
    loaded = data.load(path)
    assert len(loaded) == 10_000
    assert time.perf_counter() - start < 5.0


def test_dataset_shape_is_shared():
    spec = GeneratorSpec(task="pair", variant="graph-sensitive", sizes=SMALL)
    assert data.dataset_shape(all_records(spec)) == (9, 6)
    mixed = all_records(spec)[:1] + all_records(GeneratorSpec(sizes={"train": 2}))
    with pytest.raises(DatasetError):
        data.dataset_shape(mixed)


def test_qa_record_kinds():
    rec = data.generate(GeneratorSpec(task="qa", sizes={"train": 1}, nodes_min=6))["train"][0]
    assert isinstance(rec, QaInstance)
    assert rec.question.startswith("what does ")
