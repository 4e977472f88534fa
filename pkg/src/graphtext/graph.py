"""Typed multigraphs, node initialisation and query-node integration."""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from graphtext.backbone import Backbone

QUERY_TYPE = 0
LINKED_TYPE = 1
REGULAR_TYPE = 2
RESERVED_NODE_TYPES = ("query", "linked", "regular")

INIT_MODES = ("backbone-name-encoding", "seeded-random")


class GraphError(ValueError):
    pass


class IsolatedQueryNodeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    type: int


@dataclass(frozen=True)
class Edge:
    src: int
    rel: int
    dst: int


@dataclass(frozen=True)
class TypedGraph:
    """Nodes with type ids, directed typed edges and the relation vocabulary.

    ``query_node`` is set only on graphs returned by ``integrate_query_node``;
    edges leaving it use the reserved relation id ``relation_count``.
    """

    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()
    relation_names: tuple[str, ...] = ()
    node_type_count: int = len(RESERVED_NODE_TYPES)
    query_node: int | None = None

    @property
    def relation_count(self) -> int:
        return len(self.relation_names)

    @property
    def query_link(self) -> int:
        return self.relation_count

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def triples(self) -> list[tuple[str, str, str]]:
        """(src name, relation name, dst name) for every KG edge, in edge order."""
        out = []
        for e in self.edges:
            if e.rel == self.query_link:
                continue
            out.append((self.nodes[e.src].name, self.relation_names[e.rel], self.nodes[e.dst].name))
        return out

    @classmethod
    def build(
        cls,
        names: Sequence[str],
        triples: Iterable[tuple[int, int, int]],
        relation_names: Sequence[str],
        types: Sequence[int] | None = None,
        node_type_count: int = len(RESERVED_NODE_TYPES),
    ) -> TypedGraph:
        types = [REGULAR_TYPE] * len(names) if types is None else list(types)
        return cls(
            nodes=tuple(Node(i, n, t) for i, (n, t) in enumerate(zip(names, types))),
            edges=tuple(Edge(s, r, d) for s, r, d in triples),
            relation_names=tuple(relation_names),
            node_type_count=node_type_count,
        )


def validate_graph(g: TypedGraph) -> list[str]:
    """Every invariant violation in ``g``; an empty list means the graph is valid."""
    problems = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        problems.append("duplicate node id")
    if sorted(set(ids)) != list(range(len(set(ids)))) or ids != list(range(len(ids))):
        problems.append("node ids not dense 0..n-1 in order")
    if g.node_type_count < len(RESERVED_NODE_TYPES):
        problems.append("node_type_count below reserved types")
    for n in g.nodes:
        if not 0 <= n.type < g.node_type_count:
            problems.append(f"node {n.id}: type out of range")
    n_nodes = len(g.nodes)
    for i, e in enumerate(g.edges):
        if not 0 <= e.src < n_nodes:
            problems.append(f"edge {i}: dangling src")
        if not 0 <= e.dst < n_nodes:
            problems.append(f"edge {i}: dangling dst")
        query_edge = g.query_node is not None and e.src == g.query_node and e.rel == g.query_link
        if not (0 <= e.rel < g.relation_count or query_edge):
            problems.append(f"edge {i}: relation out of range")
        if e.src == e.dst:
            problems.append(f"edge {i}: self-loop")
    return problems


def _name_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def init_node_embeddings(
    g: TypedGraph,
    mode: str,
    seed: int = 0,
    backbone: Backbone | None = None,
    dim: int | None = None,
) -> np.ndarray:
    """Frozen initial node features, one row per node.

    ``backbone-name-encoding`` mean-pools the backbone's token embeddings of the
    node name; ``seeded-random`` draws a standard normal row keyed by
    (name, seed).  Both are pure functions of their inputs.
    """
    if mode == "backbone-name-encoding":
        if backbone is None:
            raise GraphError("backbone-name-encoding needs a backbone")
        return np.stack([backbone.name_encoding(n.name) for n in g.nodes]) if g.nodes else (
            np.zeros((0, backbone.config.dim), dtype=backbone.token_embedding.data.dtype)
        )
    if mode == "seeded-random":
        if dim is None:
            raise GraphError("seeded-random initialisation needs dim")
        rows = [np.random.default_rng([seed, _name_seed(n.name)]).standard_normal(dim) for n in g.nodes]
        return np.stack(rows) if rows else np.zeros((0, dim))
    raise GraphError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")


@dataclass(frozen=True)
class QueryContext:
    query_text: str
    linked_node_ids: frozenset[int]
    query_embedding: np.ndarray = field(repr=False)


def integrate_query_node(
    g: TypedGraph, init: np.ndarray, ctx: QueryContext
) -> tuple[TypedGraph, np.ndarray]:
    """Append the query node v_q (id n) and an edge v_q -> u for each linked u."""
    if g.query_node is not None or any(n.type == QUERY_TYPE for n in g.nodes):
        raise GraphError("query node already present")
    if init.shape[0] != g.num_nodes:
        raise GraphError(f"{init.shape[0]} init rows for {g.num_nodes} nodes")
    if init.shape[0] and ctx.query_embedding.shape[-1] != init.shape[1]:
        raise GraphError(
            f"query embedding dim {ctx.query_embedding.shape[-1]} != node init dim {init.shape[1]}"
        )
    missing = [u for u in ctx.linked_node_ids if not 0 <= u < g.num_nodes]
    if missing:
        raise GraphError(f"linked node ids not in graph: {sorted(missing)}")
    vq = g.num_nodes
    if not ctx.linked_node_ids:
        warnings.warn("query node has no linked nodes (isolated)", IsolatedQueryNodeWarning, stacklevel=2)
    links = tuple(Edge(vq, g.relation_count, u) for u in sorted(ctx.linked_node_ids))
    integrated = replace(
        g,
        nodes=g.nodes + (Node(vq, ctx.query_text, QUERY_TYPE),),
        edges=g.edges + links,
        query_node=vq,
    )
    row = np.asarray(ctx.query_embedding, dtype=init.dtype).reshape(1, -1)
    return integrated, np.concatenate([init, row], axis=0)


def remove_query_node(g: TypedGraph) -> TypedGraph:
    if g.query_node is None:
        return g
    vq = g.query_node
    return replace(
        g,
        nodes=tuple(n for n in g.nodes if n.id != vq),
        edges=tuple(e for e in g.edges if vq not in (e.src, e.dst)),
        query_node=None,
    )


def relabel(g: TypedGraph, perm: Sequence[int]) -> TypedGraph:
    """Renumber nodes so that old node i becomes node perm[i]."""
    perm = list(perm)
    if sorted(perm) != list(range(g.num_nodes)):
        raise GraphError("perm must be a permutation of node ids")
    nodes = sorted((Node(perm[n.id], n.name, n.type) for n in g.nodes), key=lambda n: n.id)
    edges = tuple(Edge(perm[e.src], e.rel, perm[e.dst]) for e in g.edges)
    query = None if g.query_node is None else perm[g.query_node]
    return replace(g, nodes=tuple(nodes), edges=edges, query_node=query)
