"""Frozen toy transformer encoder used as the language backbone."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from graphtext import numerics as nx
from graphtext.layers import Linear, Module, seeded_rng
from graphtext.numerics import Parameter, Tensor

BOS, EOS, SEP, UNK = 0, 1, 2, 3
RESERVED_TOKENS = 4
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]")

ROLE_GRAPH, ROLE_BOS, ROLE_TEXT, ROLE_SEP, ROLE_EOS = "graph-token", "bos", "text", "sep", "eos"


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 256
    dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    context_length: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= RESERVED_TOKENS:
            raise ValueError("vocab_size must exceed the reserved token count")
        if self.dim <= 0 or self.dim % self.num_heads:
            raise ValueError("backbone dim must be positive and divisible by num_heads")
        if self.context_length < 3:
            raise ValueError("context_length must be at least 3")


def tokenize(text: str, vocab_size: int = 256, context_length: int = 128) -> list[int]:
    """Lowercased word/punctuation tokens hashed into the non-reserved buckets."""
    buckets = vocab_size - RESERVED_TOKENS
    words = _TOKEN_RE.findall(text.lower())[:context_length]
    return [RESERVED_TOKENS + zlib.crc32(w.encode("utf-8")) % buckets for w in words]


@dataclass
class TokenSequence:
    """Input to the backbone: an optional graph-token vector then token ids.

    ``token_ids`` must start with <s> and end with </s>; the graph token, when
    present, occupies position 0.
    """

    token_ids: tuple[int, ...]
    graph_token: Tensor | None = None

    def __post_init__(self):
        ids = tuple(self.token_ids)
        self.token_ids = ids
        if ids.count(BOS) != 1 or ids.count(EOS) != 1:
            raise nx.ContractError("sequence needs exactly one <s> and one </s>")
        if ids[0] != BOS or ids[-1] != EOS:
            raise nx.ContractError("sequence must be <s> ... </s>")

    @property
    def roles(self) -> list[str]:
        named = {BOS: ROLE_BOS, EOS: ROLE_EOS, SEP: ROLE_SEP}
        roles = [named.get(t, ROLE_TEXT) for t in self.token_ids]
        return ([ROLE_GRAPH] if self.graph_token is not None else []) + roles

    def __len__(self) -> int:
        return len(self.token_ids) + (self.graph_token is not None)

    @property
    def eos_position(self) -> int:
        return len(self) - 1


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


class EncoderBlock(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.dim
        self.heads = cfg.num_heads
        self.ln1_gain, self.ln1_bias = Parameter(np.ones(d)), Parameter(np.zeros(d))
        self.wq, self.wk, self.wv, self.wo = (Linear(d, d, rng) for _ in range(4))
        self.ln2_gain, self.ln2_bias = Parameter(np.ones(d)), Parameter(np.zeros(d))
        self.ff1 = Linear(d, cfg.ffn_dim, rng)
        self.ff2 = Linear(cfg.ffn_dim, d, rng)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape(b, t, self.heads, -1).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, t, d = x.shape
        h = nx.layer_norm(x, self.ln1_gain, self.ln1_bias)
        q = self._split(self.wq(h), b, t)
        k = self._split(self.wk(h), b, t)
        v = self._split(self.wv(h), b, t)
        scores = nx.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = scores + mask
        attended = (nx.softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + self.wo(attended)
        h = nx.layer_norm(x, self.ln2_gain, self.ln2_bias)
        return x + self.ff2(nx.relu(self.ff1(h)))


class Backbone(Module):
    """Bidirectional transformer encoder, seeded at construction and frozen."""

    def __init__(self, config: BackboneConfig | None = None):
        cfg = config or BackboneConfig()
        self.config = cfg
        rng = seeded_rng(cfg.seed, 101)
        self.token_embedding = Parameter(rng.standard_normal((cfg.vocab_size, cfg.dim)))
        self.positional = Parameter(sinusoidal_positions(cfg.context_length, cfg.dim))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.num_layers)]
        self.final_gain = Parameter(np.ones(cfg.dim))
        self.final_bias = Parameter(np.zeros(cfg.dim))
        self.freeze()
        self._sentence_cache: dict[str, np.ndarray] = {}

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.config.vocab_size, self.config.context_length)

    def name_encoding(self, name: str) -> np.ndarray:
        ids = self.tokenize(name) or [UNK]
        return self.token_embedding.data[ids].mean(axis=0)

    def encode_batch(self, sequences: Sequence[TokenSequence]) -> Tensor:
        """Final-layer states, shape (batch, longest, dim); padding is masked out."""
        cfg = self.config
        lengths = [len(s) for s in sequences]
        longest = max(lengths)
        if longest > cfg.context_length:
            raise nx.ContractError(f"sequence length {longest} exceeds context {cfg.context_length}")
        has_graph = [s.graph_token is not None for s in sequences]
        if any(has_graph) and not all(has_graph):
            raise nx.ContractError("cannot mix sequences with and without a graph token")
        b = len(sequences)
        width = longest - has_graph[0]
        ids = np.full((b, width), EOS, dtype=np.int64)
        for i, s in enumerate(sequences):
            ids[i, : len(s.token_ids)] = s.token_ids
        x = self.token_embedding[ids]
        if has_graph[0]:
            prefix = nx.concat([s.graph_token.reshape(1, 1, cfg.dim) for s in sequences], axis=0)
            x = nx.concat([prefix, x], axis=1)
        x = x + self.positional[:longest]
        mask = None
        if min(lengths) != longest:
            pad = np.arange(longest)[None, :] >= np.asarray(lengths)[:, None]
            mask = np.where(pad, -1e9, 0.0).astype(x.data.dtype)[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask)
        return nx.layer_norm(x, self.final_gain, self.final_bias)

    def encode_sequence(self, seq: TokenSequence) -> Tensor:
        return self.encode_batch([seq]).reshape(len(seq), self.config.dim)

    def embed(self, sequences: Sequence[TokenSequence]) -> Tensor:
        """Joint embedding z for each sequence: the final state at </s>."""
        states = self.encode_batch(sequences)
        return extract_joint(states, [s.eos_position for s in sequences])

    def sentence_embedding(self, text: str, use_cache: bool = True) -> np.ndarray:
        if use_cache and text in self._sentence_cache:
            return self._sentence_cache[text]
        ids = self.tokenize(text)[: self.config.context_length - 2]
        with nx.no_grad():
            z = self.embed([TokenSequence((BOS, *ids, EOS))]).data[0].copy()
        if use_cache:
            self._sentence_cache[text] = z
        return z


def extract_joint(states: Tensor, eos_positions: Sequence[int]) -> Tensor:
    if states.ndim == 2:
        states = states.reshape(1, *states.shape)
    if len(eos_positions) != states.shape[0]:
        raise nx.ContractError("one eos position per sequence required")
    if any(p is None or not 0 <= p < states.shape[1] for p in eos_positions):
        raise nx.ContractError("missing </s> position")
    return states[np.arange(states.shape[0]), np.asarray(eos_positions)]
