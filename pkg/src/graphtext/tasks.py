"""Task instances, scoring heads, task losses and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from graphtext import numerics as nx
from graphtext.alignment import DescriptionBranch, alignment_distance, info_nce
from graphtext.fusion import GraphTextModel, JointInput, Prepared
from graphtext.graph import TypedGraph
from graphtext.layers import MLP, Module, seeded_rng
from graphtext.numerics import Tensor

log = logging.getLogger(__name__)

TASK_KINDS = ("pair", "qa", "retrieval")
BRANCH_MODES = ("dual", "orig-only", "desc-only")
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class PairInstance:
    id: str
    graph: TypedGraph
    text: str
    linked: tuple[int, ...]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class QaInstance:
    id: str
    question: str
    choices: tuple[str, ...]
    graph: TypedGraph
    linked: tuple[int, ...]
    choice_nodes: tuple[int | None, ...]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError("need at least two choices")
        if len(self.choice_nodes) != len(self.choices):
            raise ValueError("one choice node (or None) per choice")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError("gold index out of range")


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    graph: TypedGraph
    linked: tuple[int, ...]


@dataclass(frozen=True)
class RetrievalInstance:
    id: str
    query: Document
    positive: Document
    pool: tuple[Document, ...] = ()

    @property
    def gains(self) -> dict[str, float]:
        return {self.positive.id: 1.0}


Instance = PairInstance | QaInstance | RetrievalInstance


def task_kind(inst: Instance) -> str:
    return {PairInstance: "pair", QaInstance: "qa", RetrievalInstance: "retrieval"}[type(inst)]


# losses ---------------------------------------------------------------------

def _clamped_log(p: Tensor, what: str) -> Tensor:
    if np.any(p.data < LOG_FLOOR):
        log.warning("%s: probability below %g clamped before log", what, LOG_FLOOR)
    return nx.log(nx.clamp_min(p, LOG_FLOOR))


def qa_loss(probs: Tensor, gold: Sequence[int]) -> Tensor:
    """Cross-entropy summed over the batch; ``probs`` rows are per-choice probabilities."""
    gold = np.asarray(gold, dtype=np.int64)
    picked = probs[np.arange(len(gold)), gold]
    return -nx.sum_(_clamped_log(picked, "qa_loss"))


def pair_loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Binary cross-entropy summed over the batch."""
    y = np.asarray(labels, dtype=probs.data.dtype)
    pos = _clamped_log(probs, "pair_loss") * y
    neg = _clamped_log(1.0 - probs, "pair_loss") * (1.0 - y)
    return -nx.sum_(pos + neg)


def retrieval_loss(queries: Tensor, positives: Tensor, tau: float = 0.05) -> Tensor:
    """In-batch contrastive loss on cosine similarity; positives on the diagonal."""
    if tau <= 0:
        raise nx.ContractError("tau must be positive")
    for name, x in (("query", queries), ("positive", positives)):
        if np.any(np.linalg.norm(x.data, axis=-1) == 0):
            raise nx.ContractError(f"zero-norm {name} embedding")
    sims = nx.l2_normalize(queries) @ nx.l2_normalize(positives).transpose()
    n = queries.shape[0]
    return -nx.sum_(nx.log_softmax(nx.scale(sims, 1.0 / tau), axis=-1)[np.arange(n), np.arange(n)])


@dataclass
class LossBreakdown:
    task: float
    info_nce: float
    combined: float
    lam: float
    total: Tensor | None = field(default=None, repr=False)


def combined_loss(task: Tensor | float, align: Tensor | float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    task_t = task if isinstance(task, Tensor) else nx.Tensor(task)
    align_t = align if isinstance(align, Tensor) else nx.Tensor(align)
    total = task_t + nx.scale(align_t, lam)
    return LossBreakdown(task_t.item(), align_t.item(), total.item(), lam, total)


# metrics --------------------------------------------------------------------

def metric_accuracy(preds: Sequence, golds: Sequence) -> float:
    if len(preds) != len(golds):
        raise ValueError("preds and golds differ in length")
    if not len(preds):
        raise ValueError("accuracy of an empty set is undefined")
    return sum(int(p == g) for p, g in zip(preds, golds)) / len(preds)


def ndcg_at_k(ranked_ids: Sequence[str], gains: Mapping[str, float], k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
    if not ideal:
        log.warning("ndcg_at_k: no relevant documents; returning 0")
        return 0.0
    dcg = sum(gains.get(doc, 0.0) / math.log2(rank + 2) for rank, doc in enumerate(ranked_ids[:k]))
    idcg = sum(g / math.log2(rank + 2) for rank, g in enumerate(ideal))
    return dcg / idcg


def rank_by_cosine(query: np.ndarray, candidates: np.ndarray, ids: Sequence[str]) -> list[str]:
    """Candidate ids by descending cosine similarity, ties by ascending id."""
    if len(ids) == 0:
        raise ValueError("empty candidate pool")
    q = query / np.linalg.norm(query)
    c = candidates / np.linalg.norm(candidates, axis=1, keepdims=True)
    sims = c @ q
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))]


# model -------------------------------------------------------------------------

class ScoreHead(Module):
    def __init__(self, dim: int, seed: int, stream: int):
        self.mlp = MLP(dim, dim, 1, seeded_rng(seed, stream))

    def __call__(self, z: Tensor) -> Tensor:
        return self.mlp(z).reshape(z.shape[0])


@dataclass
class BatchOutput:
    loss: LossBreakdown
    z_orig: np.ndarray | None
    z_new: np.ndarray | None


class TaskModel(Module):
    """Joint embedder plus one scoring head per branch.

    The original (graph + text) branch and the description (serialised graph +
    text) branch each own a head; inference uses the original branch unless
    the model was trained description-only.
    """

    def __init__(
        self,
        kind: str,
        joint: GraphTextModel,
        branch: str = "dual",
        use_graph: bool = True,
        lam: float = 0.05,
        tau: float = 0.05,
        nce_temperature: float = 1.0,
        seed: int = 0,
    ):
        if kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {kind!r}")
        if branch not in BRANCH_MODES:
            raise ValueError(f"unknown branch mode {branch!r}")
        self.kind, self.branch, self.use_graph = kind, branch, use_graph
        self.lam, self.tau, self.nce_temperature = lam, tau, nce_temperature
        self.joint = joint
        dim = joint.backbone.config.dim
        if kind != "retrieval":
            self.head_orig = ScoreHead(dim, seed, 501)
            self.head_desc = ScoreHead(dim, seed, 502)
        self.descriptions = DescriptionBranch(joint.backbone)
        self._prepared: dict[str, Prepared] = {}

    # rows -----------------------------------------------------------------
    def rows(self, inst: Instance) -> list[tuple[str, JointInput]]:
        """(cache key, joint input) for every embedding an instance needs in training."""
        if isinstance(inst, PairInstance):
            return [(inst.id, JointInput(inst.graph, frozenset(inst.linked), inst.text, inst.text))]
        if isinstance(inst, QaInstance):
            out = []
            for j, choice in enumerate(inst.choices):
                text = f"{inst.question} {choice}"
                extra = () if inst.choice_nodes[j] is None else (inst.choice_nodes[j],)
                out.append((f"{inst.id}#{j}", JointInput(inst.graph, frozenset(inst.linked + extra), text, text)))
            return out
        return [
            (f"{inst.id}#q", _doc_input(inst.query)),
            (f"{inst.id}#p:{inst.positive.id}", _doc_input(inst.positive)),
        ]

    def pool_rows(self, inst: RetrievalInstance) -> list[tuple[str, JointInput]]:
        return [(f"{inst.id}#p:{doc.id}", _doc_input(doc)) for doc in inst.pool]

    def prepared(self, key: str, item: JointInput) -> Prepared:
        if key not in self._prepared:
            self._prepared[key] = self.joint.prepare(item)
        return self._prepared[key]

    def description(self, key: str, item: JointInput) -> np.ndarray:
        return self.descriptions.embed(key, item.graph, item.text)

    # forward --------------------------------------------------------------
    def embed_rows(self, rows: Sequence[tuple[str, JointInput]], training: bool = False) -> Tensor:
        items = [self.prepared(k, r) for k, r in rows]
        return self.joint.embed(items, training=training, use_graph=self.use_graph)

    def description_rows(self, rows: Sequence[tuple[str, JointInput]]) -> Tensor:
        return nx.Tensor(np.stack([self.description(k, r) for k, r in rows]))

    def _task_loss(self, z: Tensor, head: ScoreHead | None, batch: Sequence[Instance]) -> Tensor:
        if self.kind == "pair":
            return pair_loss(nx.sigmoid(head(z)), [inst.label for inst in batch])
        if self.kind == "qa":
            scores = head(z).reshape(len(batch), -1)
            return qa_loss(nx.softmax(scores, axis=-1), [inst.gold for inst in batch])
        n = len(batch)
        pairs = z.reshape(n, 2, z.shape[-1])
        return retrieval_loss(pairs[:, 0], pairs[:, 1], self.tau)

    def forward_batch(self, batch: Sequence[Instance], training: bool = True) -> BatchOutput:
        rows = [row for inst in batch for row in self.rows(inst)]
        use_orig = self.branch in ("dual", "orig-only")
        use_desc = self.branch in ("dual", "desc-only")
        task = nx.Tensor(0.0)
        z_orig = z_new = None
        if use_orig:
            z_orig = self.embed_rows(rows, training=training)
            task = task + self._task_loss(z_orig, getattr(self, "head_orig", None), batch)
        if use_desc:
            z_new = self.description_rows(rows)
            task = task + self._task_loss(z_new, getattr(self, "head_desc", None), batch)
        if use_orig and use_desc:
            align = info_nce(
                nx.l2_normalize(z_orig), nx.l2_normalize(z_new), temperature=self.nce_temperature
            )
        else:
            align = nx.Tensor(0.0)
        loss = combined_loss(task, align, self.lam)
        return BatchOutput(
            loss,
            None if z_orig is None else z_orig.data,
            None if z_new is None else z_new.data,
        )

    # inference ------------------------------------------------------------
    def _infer_embed(self, rows) -> np.ndarray:
        with nx.no_grad():
            if self.branch == "desc-only":
                return self.description_rows(rows).data
            return self.embed_rows(rows).data

    def _infer_head(self) -> ScoreHead:
        return self.head_desc if self.branch == "desc-only" else self.head_orig

    def scores(self, batch: Sequence[Instance]) -> np.ndarray:
        rows = [row for inst in batch for row in self.rows(inst)]
        z = self._infer_embed(rows)
        with nx.no_grad():
            return self._infer_head()(nx.Tensor(z)).data

    def predict(self, batch: Sequence[Instance]) -> list[int]:
        s = self.scores(batch)
        if self.kind == "pair":
            return [int(v >= 0.0) for v in s]
        return [int(np.argmax(row)) for row in s.reshape(len(batch), -1)]

    def rank(self, inst: RetrievalInstance) -> list[str]:
        query = self._infer_embed(self.rows(inst)[:1])[0]
        cands = self._infer_embed(self.pool_rows(inst))
        return rank_by_cosine(query, cands, [d.id for d in inst.pool])

    def alignment_rows_distance(self, batch: Sequence[Instance]) -> float:
        rows = [row for inst in batch for row in self.rows(inst)]
        with nx.no_grad():
            z_orig = self.embed_rows(rows).data
        z_new = self.description_rows(rows).data
        return alignment_distance(z_orig, z_new)


def _doc_input(doc: Document) -> JointInput:
    return JointInput(doc.graph, frozenset(doc.linked), doc.text, doc.text)


def qa_forward(inst: QaInstance, model: TaskModel) -> tuple[np.ndarray, int]:
    """Per-choice probabilities and the argmax prediction."""
    scores = model.scores([inst]).reshape(-1)
    with nx.no_grad():
        probs = nx.softmax(nx.Tensor(scores)).data
    return probs, int(np.argmax(scores))


def retrieval_rank(inst: RetrievalInstance, model: TaskModel) -> list[str]:
    return model.rank(inst)
