"""Synthetic task generators and the JSON Lines dataset format."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from graphtext.alignment import serialize_graph
from graphtext.graph import LINKED_TYPE, REGULAR_TYPE, RESERVED_NODE_TYPES, TypedGraph, validate_graph
from graphtext.tasks import Document, Instance, PairInstance, QaInstance, RetrievalInstance

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SPLITS = ("train", "dev", "test")
GENERATORS = ("pair", "qa", "retrieval")
PAIR_VARIANTS = ("standard", "graph-sensitive")

_SYLLABLES = ("ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "vu", "ze", "ba", "do", "fi", "gu", "ha", "je")
TYPE_WORDS = ("tool", "place", "agent", "substance", "event", "idea", "animal", "device")
DEFAULT_RELATIONS = (
    "causes", "contains", "uses", "precedes", "requires", "produces",
    "supports", "blocks", "follows", "feeds", "owns", "cites",
)


class DatasetError(ValueError):
    pass


def default_entities() -> tuple[str, ...]:
    return tuple(a + b + c for a in _SYLLABLES for b in _SYLLABLES for c in _SYLLABLES)


@dataclass(frozen=True)
class GeneratorSpec:
    task: str = "pair"
    variant: str = "standard"
    seed: int = 0
    sizes: dict[str, int] = field(default_factory=lambda: {"train": 200, "dev": 50, "test": 50})
    entities: tuple[str, ...] = ()
    relations: tuple[str, ...] = ()
    nodes_min: int = 4
    nodes_max: int = 8
    extra_edges: float = 0.5
    noise: float = 0.0
    n_choice: int = 5
    pool_size: int = 10
    domain_types: int = 3
    node_cap: int = 200

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities) or default_entities())
        object.__setattr__(self, "relations", tuple(self.relations) or DEFAULT_RELATIONS)
        object.__setattr__(self, "sizes", {k: int(v) for k, v in dict(self.sizes).items()})
        if self.task not in GENERATORS:
            raise DatasetError(f"task must be one of {GENERATORS}")
        if self.variant not in PAIR_VARIANTS:
            raise DatasetError(f"variant must be one of {PAIR_VARIANTS}")
        if set(self.sizes) - set(SPLITS) or any(v < 0 for v in self.sizes.values()):
            raise DatasetError(f"sizes must map a subset of {SPLITS} to non-negative counts")
        if not 2 <= self.nodes_min <= self.nodes_max:
            raise DatasetError("need 2 <= nodes_min <= nodes_max")
        if self.nodes_max > self.node_cap:
            raise DatasetError(f"nodes_max {self.nodes_max} exceeds the node cap {self.node_cap}")
        if not 0.0 <= self.noise <= 1.0:
            raise DatasetError("noise must be in [0, 1]")
        if self.n_choice < 2:
            raise DatasetError("n_choice must be at least 2")
        if self.pool_size < 2:
            raise DatasetError("pool_size must be at least 2")
        if len(set(self.entities)) != len(self.entities) or len(self.entities) < self.nodes_max:
            raise DatasetError("entity vocabulary must be unique and at least nodes_max long")
        if self.variant == "graph-sensitive" and len(self.relations) < self.domain_types**2:
            raise DatasetError("graph-sensitive pairs need domain_types**2 relation names")
        if self.variant == "graph-sensitive" and self.domain_types > len(TYPE_WORDS):
            raise DatasetError(f"at most {len(TYPE_WORDS)} domain types")

    @property
    def node_type_count(self) -> int:
        extra = self.domain_types if self.variant == "graph-sensitive" else 0
        return len(RESERVED_NODE_TYPES) + extra

    @property
    def relation_names(self) -> tuple[str, ...]:
        if self.variant == "graph-sensitive":
            return self.relations[: self.domain_types**2]
        return self.relations

    @classmethod
    def from_toml(cls, path: str | Path) -> GeneratorSpec:
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"generator spec not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise DatasetError(f"{path}: unknown key(s) {', '.join(unknown)}")
        return cls(**raw)


# graph sampling ------------------------------------------------------------------

def _rng(spec: GeneratorSpec, split: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, GENERATORS.index(spec.task), SPLITS.index(split)])


def _names(rng: np.random.Generator, spec: GeneratorSpec, n: int) -> list[str]:
    return [spec.entities[i] for i in rng.choice(len(spec.entities), size=n, replace=False)]


def _skeleton(rng: np.random.Generator, spec: GeneratorSpec, n: int) -> list[tuple[int, int]]:
    """Random connected edge list (spanning tree plus extras), no self-loops."""
    pairs = []
    for v in range(1, n):
        u = int(rng.integers(v))
        pairs.append((u, v) if rng.random() < 0.5 else (v, u))
    for _ in range(int(round(spec.extra_edges * n))):
        u, v = (int(x) for x in rng.choice(n, size=2, replace=False))
        pairs.append((u, v))
    return pairs


def random_graph(rng: np.random.Generator, spec: GeneratorSpec, n: int | None = None) -> TypedGraph:
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1)) if n is None else n
    names = _names(rng, spec, n)
    rels = spec.relation_names
    triples = [(u, int(rng.integers(len(rels))), v) for u, v in _skeleton(rng, spec, n)]
    return TypedGraph.build(names, triples, rels, [REGULAR_TYPE] * n, spec.node_type_count)


def _with_types(g: TypedGraph, types: dict[int, int]) -> TypedGraph:
    return TypedGraph.build(
        g.names(), [(e.src, e.rel, e.dst) for e in g.edges], g.relation_names,
        [types.get(node.id, node.type) for node in g.nodes], g.node_type_count,
    )


# schema for the graph-sensitive pair variant -----------------------------------------

def schema_relation(src_type: int, dst_type: int, domain_types: int) -> int:
    """The one relation allowed between two domain node types."""
    base = len(RESERVED_NODE_TYPES)
    return (src_type - base) * domain_types + (dst_type - base)


def schema_consistent(g: TypedGraph, domain_types: int) -> bool:
    """Oracle: every KG edge uses the relation its endpoint types prescribe."""
    return all(
        e.rel == schema_relation(g.nodes[e.src].type, g.nodes[e.dst].type, domain_types)
        for e in g.edges
        if e.rel != g.query_link
    )


def _schema_graph(rng: np.random.Generator, spec: GeneratorSpec, consistent: bool) -> TypedGraph:
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    base = len(RESERVED_NODE_TYPES)
    types = [base + int(t) for t in rng.integers(spec.domain_types, size=n)]
    # the type word keeps the serialised description as informative as the graph
    names = [f"{TYPE_WORDS[t - base]} {name}" for t, name in zip(types, _names(rng, spec, n))]
    k = spec.domain_types**2
    triples = []
    for u, v in _skeleton(rng, spec, n):
        right = schema_relation(types[u], types[v], spec.domain_types)
        if consistent:
            rel = right
        else:
            rel = (right + 1 + int(rng.integers(k - 1))) % k
        triples.append((u, rel, v))
    return TypedGraph.build(names, triples, spec.relation_names, types, spec.node_type_count)


# generators --------------------------------------------------------------------

def _labels(rng: np.random.Generator, n: int) -> list[int]:
    labels = [1] * (n // 2) + [0] * (n - n // 2)
    return [labels[i] for i in rng.permutation(n)]


def _flip(rng: np.random.Generator, label: int, noise: float) -> int:
    return 1 - label if noise and rng.random() < noise else label


def gen_pairs(spec: GeneratorSpec) -> dict[str, list[PairInstance]]:
    """Balanced graph/text match pairs per split."""
    out = {}
    for split, size in spec.sizes.items():
        if size < 2:
            raise DatasetError(f"{split}: pair datasets need at least 2 records to form mismatches")
        rng = _rng(spec, split)
        records = []
        if spec.variant == "graph-sensitive":
            for i, label in enumerate(_labels(rng, size)):
                g = _schema_graph(rng, spec, consistent=bool(label))
                text = f"a statement about {g.nodes[0].name}"
                records.append(PairInstance(f"{split}-{i:06d}", g, text, (0,), _flip(rng, label, spec.noise)))
        else:
            graphs = [random_graph(rng, spec) for _ in range(size)]
            texts = [serialize_graph(g) for g in graphs]
            for i, label in enumerate(_labels(rng, size)):
                text = texts[i]
                if not label:
                    j = int(rng.integers(size - 1))
                    j += j >= i
                    while texts[j] == texts[i]:
                        j = (j + 1) % size
                    text = texts[j]
                records.append(PairInstance(f"{split}-{i:06d}", graphs[i], text, (0,), _flip(rng, label, spec.noise)))
        out[split] = records
    return out


def gen_qa(spec: GeneratorSpec) -> dict[str, list[QaInstance]]:
    """Questions "what does X <rel>?" whose gold answer is the X -rel-> Y neighbour."""
    need = max(spec.nodes_min, spec.n_choice + 1)
    if need > spec.nodes_max:
        raise DatasetError(f"qa graphs need at least {need} nodes; raise nodes_max")
    out = {}
    for split, size in spec.sizes.items():
        rng = _rng(spec, split)
        records = []
        i = 0
        while len(records) < size:
            n = int(rng.integers(need, spec.nodes_max + 1))
            g = random_graph(rng, spec, n)
            e = g.edges[int(rng.integers(len(g.edges)))]
            q, rel = e.src, e.rel
            adjacent = {x.dst for x in g.edges if x.src == q} | {x.src for x in g.edges if x.dst == q} | {q}
            gold_nodes = sorted({x.dst for x in g.edges if x.src == q and x.rel == rel})
            pool = [v for v in range(n) if v not in adjacent]
            if len(pool) < spec.n_choice - 1:
                continue
            distractors = [pool[k] for k in rng.choice(len(pool), size=spec.n_choice - 1, replace=False)]
            answer = gold_nodes[int(rng.integers(len(gold_nodes)))]
            choice_nodes = distractors + [answer]
            order = rng.permutation(spec.n_choice)
            choice_nodes = [int(choice_nodes[k]) for k in order]
            gold = choice_nodes.index(answer)
            if spec.noise and rng.random() < spec.noise:
                gold = int(rng.integers(spec.n_choice))
            g = _with_types(g, {q: LINKED_TYPE})
            records.append(
                QaInstance(
                    id=f"{split}-{i:06d}",
                    question=f"what does {g.nodes[q].name} {g.relation_names[rel]}?",
                    choices=tuple(g.nodes[v].name for v in choice_nodes),
                    graph=g,
                    linked=(q,),
                    choice_nodes=tuple(choice_nodes),
                    gold=gold,
                )
            )
            i += 1
        out[split] = records
    return out


def qa_path_holds(inst: QaInstance, choice: int) -> bool:
    """Oracle: the choice node is reached from the question entity by the question's relation."""
    g = inst.graph
    rel_name = inst.question.rsplit(" ", 1)[1].rstrip("?")
    rel = g.relation_names.index(rel_name)
    (q,) = inst.linked
    return any(e.src == q and e.rel == rel and e.dst == inst.choice_nodes[choice] for e in g.edges)


def gen_retrieval(spec: GeneratorSpec) -> dict[str, list[RetrievalInstance]]:
    """Query/candidate documents; the one relevant candidate shares a triple with the query."""
    out = {}
    for split, size in spec.sizes.items():
        rng = _rng(spec, split)
        records = []
        for i in range(size):
            qg = random_graph(rng, spec)
            motif = qg.edges[int(rng.integers(len(qg.edges)))]
            q_triples = set(qg.triples())
            pg = _plant(rng, spec, qg, motif)
            docs = []
            while len(docs) < spec.pool_size - 1:
                dg = random_graph(rng, spec)
                if not q_triples & set(dg.triples()):
                    docs.append(dg)
            graphs = docs + [pg]
            order = rng.permutation(spec.pool_size)
            pool = tuple(
                _document(f"{split}-{i:06d}-d{slot:02d}", graphs[k]) for slot, k in enumerate(order)
            )
            positive = pool[int(np.flatnonzero(order == spec.pool_size - 1)[0])]
            query = _document(f"{split}-{i:06d}-q", qg)
            records.append(RetrievalInstance(f"{split}-{i:06d}", query, positive, pool))
        out[split] = records
    return out


def _plant(rng: np.random.Generator, spec: GeneratorSpec, qg: TypedGraph, motif) -> TypedGraph:
    """A fresh graph that contains the motif triple (same names, same relation)."""
    while True:
        g = random_graph(rng, spec)
        names = g.names()
        a, b = qg.nodes[motif.src].name, qg.nodes[motif.dst].name
        others = [x for x in names if x not in (a, b)]
        names = [a, b] + others[: len(names) - 2]
        triples = [(e.src, e.rel, e.dst) for e in g.edges]
        triples[0] = (0, motif.rel, 1)
        planted = TypedGraph.build(names, triples, g.relation_names, None, g.node_type_count)
        if not validate_graph(planted):
            return planted


def _document(doc_id: str, g: TypedGraph) -> Document:
    return Document(doc_id, serialize_graph(g), g, (0,))


def motif_overlap(a: TypedGraph, b: TypedGraph) -> set[tuple[str, str, str]]:
    """Oracle: shared (src name, relation, dst name) triples."""
    return set(a.triples()) & set(b.triples())


def generate(spec: GeneratorSpec) -> dict[str, list[Instance]]:
    return {"pair": gen_pairs, "qa": gen_qa, "retrieval": gen_retrieval}[spec.task](spec)


# wire format ---------------------------------------------------------------------

def graph_to_json(g: TypedGraph) -> dict[str, Any]:
    return {
        "nodes": [{"id": n.id, "name": n.name, "type": n.type} for n in g.nodes],
        "edges": [{"src": e.src, "rel": e.rel, "dst": e.dst} for e in g.edges],
        "relations": list(g.relation_names),
        "node_types": g.node_type_count,
    }


def _doc_json(d: Document) -> dict[str, Any]:
    return {"id": d.id, "text": d.text, "graph": graph_to_json(d.graph), "linked": list(d.linked)}


def to_json(inst: Instance) -> dict[str, Any]:
    if isinstance(inst, PairInstance):
        return {
            "kind": "pair", "id": inst.id, "text": inst.text, "graph": graph_to_json(inst.graph),
            "linked": list(inst.linked), "label": inst.label,
        }
    if isinstance(inst, QaInstance):
        return {
            "kind": "qa", "id": inst.id, "question": inst.question, "choices": list(inst.choices),
            "graph": graph_to_json(inst.graph), "linked": list(inst.linked),
            "choice_nodes": list(inst.choice_nodes), "gold": inst.gold,
        }
    return {
        "kind": "retrieval", "id": inst.id, "query": _doc_json(inst.query),
        "positive": inst.positive.id, "pool": [_doc_json(d) for d in inst.pool],
    }


class _Reader:
    """Field access that names the line and field on every failure."""

    def __init__(self, line: int):
        self.line = line

    def fail(self, where: str, why: str):
        raise DatasetError(f"line {self.line}: field '{where}': {why}")

    def obj(self, value, where: str, required: Sequence[str]) -> dict:
        if not isinstance(value, dict):
            self.fail(where, "expected an object")
        unknown = sorted(set(value) - set(required))
        if unknown:
            self.fail(f"{where}.{unknown[0]}" if where else unknown[0], "unknown field")
        missing = [k for k in required if k not in value]
        if missing:
            self.fail(f"{where}.{missing[0]}" if where else missing[0], "missing")
        return value

    def typed(self, value, where: str, kind):
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
        if not ok:
            self.fail(where, f"expected {kind.__name__}")
        return value

    def int_list(self, value, where: str, allow_none: bool = False) -> tuple:
        if not isinstance(value, list):
            self.fail(where, "expected a list")
        return tuple(None if (allow_none and v is None) else self.typed(v, where, int) for v in value)

    def graph(self, value, where: str) -> TypedGraph:
        raw = self.obj(value, where, ("nodes", "edges", "relations", "node_types"))
        names, types, triples = [], [], []
        for key in ("nodes", "edges"):
            if not isinstance(raw[key], list):
                self.fail(f"{where}.{key}", "expected a list")
        for k, node in enumerate(raw["nodes"]):
            nd = self.obj(node, f"{where}.nodes[{k}]", ("id", "name", "type"))
            if self.typed(nd["id"], f"{where}.nodes[{k}].id", int) != k:
                self.fail(f"{where}.nodes[{k}].id", "node ids must be dense and in order")
            names.append(self.typed(nd["name"], f"{where}.nodes[{k}].name", str))
            types.append(self.typed(nd["type"], f"{where}.nodes[{k}].type", int))
        for k, edge in enumerate(raw["edges"]):
            ed = self.obj(edge, f"{where}.edges[{k}]", ("src", "rel", "dst"))
            triples.append(tuple(self.typed(ed[f], f"{where}.edges[{k}].{f}", int) for f in ("src", "rel", "dst")))
        rels = raw["relations"]
        if not isinstance(rels, list) or not all(isinstance(r, str) for r in rels):
            self.fail(f"{where}.relations", "expected a list of strings")
        g = TypedGraph.build(names, triples, rels, types, self.typed(raw["node_types"], f"{where}.node_types", int))
        problems = validate_graph(g)
        if problems:
            self.fail(where, "; ".join(problems))
        return g

    def doc(self, value, where: str) -> Document:
        raw = self.obj(value, where, ("id", "text", "graph", "linked"))
        return Document(
            self.typed(raw["id"], f"{where}.id", str),
            self.typed(raw["text"], f"{where}.text", str),
            self.graph(raw["graph"], f"{where}.graph"),
            self.int_list(raw["linked"], f"{where}.linked"),
        )


_FIELDS = {
    "pair": ("kind", "id", "text", "graph", "linked", "label"),
    "qa": ("kind", "id", "question", "choices", "graph", "linked", "choice_nodes", "gold"),
    "retrieval": ("kind", "id", "query", "positive", "pool"),
}


def from_json(raw: Any, line: int = 1) -> Instance:
    r = _Reader(line)
    if not isinstance(raw, dict):
        r.fail("", "record must be an object")
    kind = raw.get("kind")
    if kind not in _FIELDS:
        r.fail("kind", f"expected one of {sorted(_FIELDS)}")
    raw = r.obj(raw, "", _FIELDS[kind])
    rid = r.typed(raw["id"], "id", str)
    try:
        if kind == "pair":
            return PairInstance(
                id=rid,
                graph=r.graph(raw["graph"], "graph"),
                text=r.typed(raw["text"], "text", str),
                linked=r.int_list(raw["linked"], "linked"),
                label=r.typed(raw["label"], "label", int),
            )
        if kind == "qa":
            choices = raw["choices"]
            if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
                r.fail("choices", "expected a list of strings")
            return QaInstance(
                rid, r.typed(raw["question"], "question", str), tuple(choices),
                r.graph(raw["graph"], "graph"), r.int_list(raw["linked"], "linked"),
                r.int_list(raw["choice_nodes"], "choice_nodes", allow_none=True),
                r.typed(raw["gold"], "gold", int),
            )
        pool_raw = raw["pool"]
        if not isinstance(pool_raw, list):
            r.fail("pool", "expected a list")
        pool = tuple(r.doc(d, f"pool[{k}]") for k, d in enumerate(pool_raw))
        ids = [d.id for d in pool]
        if len(set(ids)) != len(ids):
            r.fail("pool", "document ids must be unique")
        positive = r.typed(raw["positive"], "positive", str)
        if positive not in ids:
            r.fail("positive", f"{positive!r} is not in the pool")
        return RetrievalInstance(rid, r.doc(raw["query"], "query"), pool[ids.index(positive)], pool)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DatasetError):
            raise
        r.fail(kind, str(exc))


def save(path: str | Path, records: Iterable[Instance]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(to_json(rec), ensure_ascii=False, separators=(",", ":")) + "\n")


def load(path: str | Path) -> list[Instance]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    out, seen = [], set()
    with path.open("r", encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {number}: malformed JSON ({exc.msg} at column {exc.colno})") from None
            rec = from_json(raw, number)
            if rec.id in seen:
                raise DatasetError(f"line {number}: field 'id': duplicate id {rec.id!r}")
            seen.add(rec.id)
            out.append(rec)
    return out


def write_splits(spec: GeneratorSpec, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for split, records in generate(spec).items():
        paths[split] = out_dir / f"{split}.jsonl"
        save(paths[split], records)
    return paths


def dataset_shape(records: Sequence[Instance]) -> tuple[int, int]:
    """(relation_count, node_type_count) shared by every graph in the records."""
    shapes = set()
    for rec in records:
        graphs = [rec.graph] if not isinstance(rec, RetrievalInstance) else [rec.query.graph] + [d.graph for d in rec.pool]
        shapes.update((g.relation_count, g.node_type_count) for g in graphs)
    if len(shapes) != 1:
        raise DatasetError(f"records disagree on (relation_count, node_type_count): {sorted(shapes)}")
    return shapes.pop()
