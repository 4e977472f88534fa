"""Random graphs and encoder batches shared by the tests."""

import warnings

import numpy as np

from graphtext.encoder import EncoderConfig, GraphBatch, GraphEncoder
from graphtext.graph import LINKED_TYPE, REGULAR_TYPE, QueryContext, TypedGraph, integrate_query_node

RELS = ("causes", "part", "uses", "near")


def random_graph(rng, n_min=2, n_max=9, rels=RELS, types=4):
    n = int(rng.integers(n_min, n_max + 1))
    edges = []
    for _ in range(int(rng.integers(0, 2 * n + 1))):
        s, d = rng.choice(n, size=2, replace=False)
        edges.append((int(s), int(rng.integers(len(rels))), int(d)))
    kinds = [int(t) for t in rng.integers(REGULAR_TYPE, types, size=n)]
    kinds[0] = LINKED_TYPE
    return TypedGraph.build([f"v{i}" for i in range(n)], edges, rels, kinds, node_type_count=types)


def integrated(rng, g, dim, linked=None):
    linked = {0} if linked is None else linked
    ctx = QueryContext("q", frozenset(linked), rng.normal(size=dim))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return integrate_query_node(g, rng.normal(size=(g.num_nodes, dim)), ctx)


def encoder(dim=8, init_dim=6, layers=2, types=4, **kw):
    cfg = EncoderConfig(
        hidden_dim=dim, num_layers=layers, num_heads=2, dropout=0.0, node_type_count=types,
        relation_count=len(RELS), init_dim=init_dim, query_dim=init_dim, **kw,
    )
    return GraphEncoder(cfg)


def batch_of(pairs, init_dim):
    graphs = [g for g, _ in pairs]
    inits = [i for _, i in pairs]
    queries = [i[g.query_node] for g, i in pairs]
    return GraphBatch.collate(graphs, inits, queries, len(RELS))
