"""Typed graph attention encoder with query-node pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from graphtext import numerics as nx
from graphtext.graph import TypedGraph
from graphtext.layers import MLP, Linear, Module, seeded_rng
from graphtext.numerics import Parameter, Tensor

MESSAGE_MODES = ("sender", "receiver")
ATTENTION_NORMS = ("sender", "receiver")


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 32
    num_layers: int = 3
    num_heads: int = 2
    dropout: float = 0.2
    node_type_count: int = 3
    relation_count: int = 1
    init_dim: int = 32
    query_dim: int = 32
    type_dim: int | None = None
    relation_dim: int | None = None
    relation_feature_dim: int | None = None
    pool_dim: int | None = None
    # "receiver" feeds the receiving node's state and type into f_m instead
    message_mode: str = "sender"
    attention_norm: str = "sender"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ValueError("num_heads must divide hidden_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.message_mode not in MESSAGE_MODES:
            raise ValueError(f"message_mode must be one of {MESSAGE_MODES}")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ValueError(f"attention_norm must be one of {ATTENTION_NORMS}")
        if self.node_type_count < 3 or self.relation_count < 0:
            raise ValueError("bad node_type_count / relation_count")

    @property
    def d_type(self) -> int:
        return self.type_dim or self.hidden_dim

    @property
    def d_rel(self) -> int:
        return self.relation_dim or self.hidden_dim

    @property
    def d_relfeat(self) -> int:
        return self.relation_feature_dim or self.hidden_dim

    @property
    def d_pool(self) -> int:
        return self.pool_dim or self.hidden_dim

    @property
    def relation_slots(self) -> int:
        # KG relations + query link, their inverses, and the self relation
        return 2 * (self.relation_count + 1) + 1


@dataclass
class GraphBatch:
    """Disjoint union of integrated graphs with the augmented edge set.

    Every stored edge s->v also appears as v->s under the inverse relation,
    and each node has a self edge, so in-neighbourhoods are N_v plus v.
    """

    node_init: np.ndarray
    node_type: np.ndarray
    node_graph: np.ndarray
    query_index: np.ndarray
    query_embedding: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_graphs(self) -> int:
        return len(self.query_index)

    @classmethod
    def collate(
        cls,
        graphs: Sequence[TypedGraph],
        inits: Sequence[np.ndarray],
        query_embeddings: Sequence[np.ndarray],
        relation_count: int,
    ) -> GraphBatch:
        base = relation_count + 1
        self_rel = 2 * base
        types, owner, queries, src, dst, rel = [], [], [], [], [], []
        offset = 0
        for gi, g in enumerate(graphs):
            if g.query_node is None:
                raise nx.ContractError("graphs must be integrated with a query node first")
            if g.relation_count != relation_count:
                raise nx.ContractError(
                    f"graph has {g.relation_count} relations, encoder expects {relation_count}"
                )
            n = g.num_nodes
            types.extend(node.type for node in g.nodes)
            owner.extend([gi] * n)
            queries.append(offset + g.query_node)
            for e in g.edges:
                src += [offset + e.src, offset + e.dst]
                dst += [offset + e.dst, offset + e.src]
                rel += [e.rel, e.rel + base]
            src.extend(range(offset, offset + n))
            dst.extend(range(offset, offset + n))
            rel.extend([self_rel] * n)
            offset += n
        as_int = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
        return cls(
            node_init=np.concatenate(list(inits), axis=0),
            node_type=as_int(types),
            node_graph=as_int(owner),
            query_index=as_int(queries),
            query_embedding=np.stack(list(query_embeddings)),
            src=as_int(src),
            dst=as_int(dst),
            rel=as_int(rel),
        )


@dataclass
class MessagePassingTrace:
    src: np.ndarray
    dst: np.ndarray
    relation_features: np.ndarray
    messages: np.ndarray
    queries: np.ndarray
    keys: np.ndarray
    logits: np.ndarray
    attention: np.ndarray  # (edges, heads)


@dataclass
class NodeStates:
    layers: list[Tensor] = field(default_factory=list)
    traces: list[MessagePassingTrace] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


class GatLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.type_embedding = Parameter(rng.normal(0.0, 1.0, (cfg.node_type_count, cfg.d_type)))
        self.relation_embedding = Parameter(rng.normal(0.0, 1.0, (cfg.relation_slots, cfg.d_rel)))
        self.f_r = MLP(cfg.d_rel + 2 * cfg.d_type, cfg.d_relfeat, cfg.d_relfeat, rng)
        self.f_m = Linear(d + cfg.d_type + cfg.d_relfeat, d, rng)
        self.f_q = Linear(d + cfg.d_type, d, rng)
        # no bias: q_s . b would be constant over a sender's softmax group
        self.f_k = Linear(d + cfg.d_type + cfg.d_relfeat, d, rng, bias=False)
        self.f_n = MLP(d, d, d, rng)

    def relation_features(self, batch: GraphBatch) -> Tensor:
        u = self.type_embedding
        x = nx.concat(
            [
                self.relation_embedding[batch.rel],
                u[batch.node_type[batch.src]],
                u[batch.node_type[batch.dst]],
            ]
        )
        return self.f_r(x)

    def messages(self, h: Tensor, batch: GraphBatch, r: Tensor) -> Tensor:
        ends = batch.src if self.cfg.message_mode == "sender" else batch.dst
        return self.f_m(nx.concat([h[ends], self.type_embedding[batch.node_type[ends]], r]))

    def attention(self, h: Tensor, batch: GraphBatch, r: Tensor) -> tuple[Tensor, dict]:
        heads = self.cfg.num_heads
        head_dim = self.cfg.hidden_dim // heads
        u = self.type_embedding[batch.node_type]
        q = self.f_q(nx.concat([h, u]))[batch.src]
        k = self.f_k(nx.concat([h[batch.dst], u[batch.dst], r]))
        e = len(batch.src)
        logits = nx.scale(
            nx.dot(q.reshape(e, heads, head_dim), k.reshape(e, heads, head_dim)),
            1.0 / math.sqrt(head_dim),
        )
        groups = batch.src if self.cfg.attention_norm == "sender" else batch.dst
        alpha = nx.segment_softmax(logits, groups, batch.num_nodes)
        return alpha, {"queries": q.data, "keys": k.data, "logits": logits.data}

    def __call__(
        self,
        h: Tensor,
        batch: GraphBatch,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, MessagePassingTrace]:
        cfg = self.cfg
        r = self.relation_features(batch)
        m = self.messages(h, batch, r)
        alpha, parts = self.attention(h, batch, r)
        e = len(batch.src)
        weighted = m.reshape(e, cfg.num_heads, -1) * alpha.reshape(e, cfg.num_heads, 1)
        agg = nx.segment_sum(weighted, batch.dst, batch.num_nodes).reshape(batch.num_nodes, cfg.hidden_dim)
        if training and cfg.dropout > 0:
            agg = nx.dropout(agg, cfg.dropout, rng)
        trace = MessagePassingTrace(
            src=batch.src,
            dst=batch.dst,
            relation_features=r.data,
            messages=m.data,
            attention=alpha.data,
            **parts,
        )
        return self.f_n(agg) + h, trace


class GraphEncoder(Module):
    """Input projection, L typed attention layers, then the pooling MLP."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = seeded_rng(config.seed, 202)
        self.input_proj = Linear(config.init_dim, config.hidden_dim, rng)
        self.layers = [GatLayer(config, rng) for _ in range(config.num_layers)]
        d = config.hidden_dim
        self.pool = MLP(2 * d + config.query_dim, d, config.d_pool, rng)
        self._dropout_rng = seeded_rng(config.seed, 303)

    def encode(self, batch: GraphBatch, training: bool = False) -> NodeStates:
        h = self.input_proj(nx.Tensor(batch.node_init))
        states = NodeStates(layers=[h])
        for layer in self.layers:
            h, trace = layer(h, batch, training=training, rng=self._dropout_rng)
            states.layers.append(h)
            states.traces.append(trace)
        return states

    def pool_graph(self, states: NodeStates, batch: GraphBatch) -> Tensor:
        h = states.final
        counts = np.bincount(batch.node_graph, minlength=batch.num_graphs).astype(h.data.dtype)
        mean = nx.segment_sum(h, batch.node_graph, batch.num_graphs) / counts[:, None]
        query = nx.Tensor(batch.query_embedding)
        return self.pool(nx.concat([h[batch.query_index], mean, query]))

    def __call__(self, batch: GraphBatch, training: bool = False) -> Tensor:
        return self.pool_graph(self.encode(batch, training), batch)
