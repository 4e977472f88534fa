"""The micro configuration used for end-to-end gradient checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphtext import numerics as nx
from graphtext.backbone import Backbone, BackboneConfig
from graphtext.encoder import EncoderConfig
from graphtext.fusion import GraphTextModel
from graphtext.graph import LINKED_TYPE, TypedGraph
from graphtext.numerics import GradReport
from graphtext.tasks import PairInstance, TaskModel

MICRO_RELATIONS = ("causes", "part", "uses")


@dataclass(frozen=True)
class MicroConfig:
    nodes: int = 6
    hidden_dim: int = 8
    token_dim: int = 16
    num_layers: int = 2
    vocab_size: int = 64
    batch: int = 3
    seed: int = 0


def micro_graph(rng: np.random.Generator, n: int) -> TypedGraph:
    names = [f"node{i} w{int(rng.integers(50))}" for i in range(n)]
    triples = [(i, int(rng.integers(len(MICRO_RELATIONS))), i + 1) for i in range(n - 1)]
    triples += [(n - 1, 0, 0), (2, 1, 4)]
    types = [LINKED_TYPE] + [2] * (n - 1)
    return TypedGraph.build(names, triples, MICRO_RELATIONS, types)


def micro_model(cfg: MicroConfig = MicroConfig()) -> tuple[TaskModel, list[PairInstance]]:
    """Dual-branch pair model and a tiny batch; build under 64-bit precision for checks."""
    backbone = Backbone(
        BackboneConfig(vocab_size=cfg.vocab_size, dim=cfg.token_dim, num_layers=1, num_heads=2,
                       ffn_dim=2 * cfg.token_dim, context_length=32, seed=cfg.seed)
    )
    enc = EncoderConfig(
        hidden_dim=cfg.hidden_dim, num_layers=cfg.num_layers, num_heads=2, dropout=0.0,
        relation_count=len(MICRO_RELATIONS), init_dim=cfg.token_dim, query_dim=cfg.token_dim, seed=cfg.seed,
    )
    model = TaskModel("pair", GraphTextModel(backbone, enc), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 777])
    batch = [
        PairInstance(f"m{i}", micro_graph(rng, cfg.nodes), f"text {i} about node0", (0, 3), i % 2)
        for i in range(cfg.batch)
    ]
    return model, batch


def micro_gradcheck(cfg: MicroConfig = MicroConfig(), tol: float = 1e-4, fault: str | None = None) -> GradReport:
    """Check every trainable block of the micro model against finite differences in 64-bit."""
    with nx.precision("float64"):
        model, batch = micro_model(cfg)
        model.forward_batch(batch, training=False)  # populate caches outside the check
        named = [(n, p) for n, p in model.named_parameters() if p.trainable]

        def loss():
            return model.forward_batch(batch, training=False).loss.total

        if fault is None:
            return nx.grad_check(loss, named, tol=tol)
        with nx.inject_fault(fault):
            return nx.grad_check(loss, named, tol=tol)
