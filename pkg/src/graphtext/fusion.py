"""Graph-token adapter and the graph + text joint embedding pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from graphtext import numerics as nx
from graphtext.backbone import BOS, EOS, Backbone, TokenSequence
from graphtext.encoder import EncoderConfig, GraphBatch, GraphEncoder
from graphtext.graph import QueryContext, TypedGraph, init_node_embeddings, integrate_query_node
from graphtext.layers import MLP, Module, seeded_rng
from graphtext.numerics import Tensor


class Adapter(Module):
    """Two-layer relu MLP mapping the pooled graph vector into token space."""

    def __init__(self, d_graph: int, d_token: int, d_hidden: int | None = None, seed: int = 0):
        self.d_graph, self.d_token = d_graph, d_token
        self.mlp = MLP(d_graph, d_hidden or max(d_graph, d_token), d_token, seeded_rng(seed, 404))

    def __call__(self, g: Tensor) -> Tensor:
        if g.shape[-1] != self.d_graph:
            raise nx.ShapeError(f"adapter expects dim {self.d_graph}, got {g.shape[-1]}")
        return self.mlp(g)


def build_fused_sequence(graph_token: Tensor, text_ids: Sequence[int], context_length: int) -> TokenSequence:
    """[graph token, <s>, text..., </s>], truncating only the text."""
    kept = tuple(text_ids[: max(context_length - 3, 0)])
    return TokenSequence((BOS, *kept, EOS), graph_token=graph_token)


def text_sequence(text_ids: Sequence[int], context_length: int) -> TokenSequence:
    return TokenSequence((BOS, *text_ids[: context_length - 2], EOS))


@dataclass(frozen=True)
class JointInput:
    graph: TypedGraph
    linked: frozenset[int]
    query_text: str
    text: str


@dataclass
class Prepared:
    """A JointInput with its frozen pieces precomputed."""

    graph: TypedGraph
    init: np.ndarray = field(repr=False)
    query_embedding: np.ndarray = field(repr=False)
    text_ids: tuple[int, ...]


@dataclass
class JointEmbedding:
    z: np.ndarray

    @property
    def z_normalized(self) -> np.ndarray:
        return self.z / np.linalg.norm(self.z)


class GraphTextModel(Module):
    """Graph encoder + adapter in front of the frozen backbone."""

    def __init__(
        self,
        backbone: Backbone,
        encoder_config: EncoderConfig,
        adapter_hidden: int | None = None,
        init_mode: str = "backbone-name-encoding",
        init_seed: int = 0,
    ):
        if encoder_config.init_dim != backbone.config.dim or encoder_config.query_dim != backbone.config.dim:
            raise ValueError("encoder init_dim and query_dim must equal the backbone dim")
        self.backbone = backbone
        self.encoder = GraphEncoder(encoder_config)
        self.adapter = Adapter(encoder_config.d_pool, backbone.config.dim, adapter_hidden, encoder_config.seed)
        self.init_mode = init_mode
        self.init_seed = init_seed

    @property
    def context_length(self) -> int:
        return self.backbone.config.context_length

    def query_context(self, query_text: str, linked: Iterable[int]) -> QueryContext:
        return QueryContext(query_text, frozenset(linked), self.backbone.sentence_embedding(query_text))

    def node_init(self, graph: TypedGraph) -> np.ndarray:
        return init_node_embeddings(
            graph, self.init_mode, self.init_seed, backbone=self.backbone, dim=self.backbone.config.dim
        )

    def prepare(self, item: JointInput) -> Prepared:
        ctx = self.query_context(item.query_text, item.linked)
        graph, init = integrate_query_node(item.graph, self.node_init(item.graph), ctx)
        return Prepared(graph, init, ctx.query_embedding, tuple(self.backbone.tokenize(item.text)))

    def collate(self, items: Sequence[Prepared]) -> GraphBatch:
        return GraphBatch.collate(
            [p.graph for p in items],
            [p.init for p in items],
            [p.query_embedding for p in items],
            self.encoder.config.relation_count,
        )

    def graph_tokens(self, items: Sequence[Prepared], training: bool = False) -> Tensor:
        return self.adapter(self.encoder(self.collate(items), training=training))

    def embed(self, items: Sequence[Prepared], training: bool = False, use_graph: bool = True) -> Tensor:
        """z for each item, shape (batch, backbone dim)."""
        if not use_graph:
            return self.backbone.embed([text_sequence(p.text_ids, self.context_length) for p in items])
        tokens = self.graph_tokens(items, training)
        d = self.backbone.config.dim
        seqs = [
            build_fused_sequence(tokens[i].reshape(1, d), p.text_ids, self.context_length)
            for i, p in enumerate(items)
        ]
        return self.backbone.embed(seqs)

    def joint_embed(self, graph: TypedGraph, ctx: QueryContext, text: str, use_graph: bool = True) -> JointEmbedding:
        graph2, init = integrate_query_node(graph, self.node_init(graph), ctx)
        item = Prepared(graph2, init, ctx.query_embedding, tuple(self.backbone.tokenize(text)))
        with nx.no_grad():
            z = self.embed([item], use_graph=use_graph)
        return JointEmbedding(z.data[0].copy())
