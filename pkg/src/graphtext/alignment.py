"""Graph descriptions, the description + text branch, and the infoNCE alignment loss."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from graphtext import numerics as nx
from graphtext.backbone import BOS, EOS, SEP, Backbone, TokenSequence
from graphtext.graph import GraphError, TypedGraph
from graphtext.numerics import Tensor

CACHE_FORMAT = "graphtext-description-cache/2"


def serialize_graph(g: TypedGraph, relation_names: Mapping[int, str] | Sequence[str] | None = None) -> str:
    """Render KG triples as "src relation dst; ...; src relation dst."."""
    names = g.relation_names if relation_names is None else relation_names
    parts = []
    for e in g.edges:
        if e.rel == g.query_link:
            continue
        try:
            rel = names[e.rel]
        except (KeyError, IndexError):
            raise GraphError(f"no name for relation {e.rel}") from None
        parts.append(f"{g.nodes[e.src].name} {rel} {g.nodes[e.dst].name}")
    return "; ".join(parts) + "." if parts else ""


def description_sequence(desc_ids: Sequence[int], text_ids: Sequence[int], context_length: int) -> TokenSequence:
    """[<s>, description..., <sep>, text..., </s>]; the description is cut first."""
    budget = context_length - 3
    text = tuple(text_ids[:budget])
    desc = tuple(desc_ids[: budget - len(text)])
    return TokenSequence((BOS, *desc, SEP, *text, EOS))


class DescriptionBranch:
    """z_new encodings through the frozen backbone, memoised by key."""

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._cache)

    def __contains__(self, key: str) -> bool:
        return key in self._cache

    def encode(self, graph: TypedGraph, text: str) -> np.ndarray:
        b = self.backbone
        seq = description_sequence(b.tokenize(serialize_graph(graph)), b.tokenize(text), b.config.context_length)
        with nx.no_grad():
            return b.embed([seq]).data[0].copy()

    def embed(self, key: str, graph: TypedGraph, text: str) -> np.ndarray:
        if key not in self._cache:
            self._cache[key] = self.encode(graph, text)
        return self._cache[key]

    def get(self, key: str) -> np.ndarray:
        return self._cache[key]

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        keys = list(self._cache)
        dim = self.backbone.config.dim
        lines = [
            CACHE_FORMAT,
            f"dim {dim}",
            f"backbone_seed {self.backbone.config.seed}",
            f"backbone {json.dumps(asdict(self.backbone.config), sort_keys=True)}",
            f"dtype {self._dtype()}",
            f"count {len(keys)}",
        ]
        lines += [f"{i}\t{k}" for i, k in enumerate(keys)]
        vectors = np.stack([self._cache[k] for k in keys]) if keys else np.zeros((0, dim))
        vec, manifest = _cache_paths(prefix)
        vec.write_bytes(vectors.astype(self._dtype()).tobytes())
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load(self, prefix: str | Path) -> bool:
        """Merge a saved cache; False (and nothing loaded) if another backbone or precision built it."""
        prefix = Path(prefix)
        vec, manifest = _cache_paths(prefix)
        if not (manifest.exists() and vec.exists()):
            return False
        lines = manifest.read_text(encoding="utf-8").splitlines()
        header = dict(line.split(" ", 1) for line in lines[1:6])
        if lines[0] != CACHE_FORMAT or json.loads(header["backbone"]) != asdict(self.backbone.config):
            return False
        # a cache written at another precision would not reproduce fresh encodings
        if header.get("dtype") != self._dtype():
            return False
        count, dim = int(header["count"]), int(header["dim"])
        vectors = np.frombuffer(vec.read_bytes(), dtype=self._dtype()).reshape(count, dim)
        for line in lines[6 : 6 + count]:
            idx, key = line.split("\t", 1)
            self._cache[key] = vectors[int(idx)].astype(self.backbone.token_embedding.data.dtype)
        return True

    def _dtype(self) -> str:
        return "<f8" if self.backbone.token_embedding.data.dtype == np.float64 else "<f4"


def _cache_paths(prefix: Path) -> tuple[Path, Path]:
    return prefix.with_name(prefix.name + ".vec"), prefix.with_name(prefix.name + ".manifest")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else nx.Tensor(x)


def info_nce(z_orig: Tensor, z_new: Tensor, temperature: float = 1.0, tol: float = 1e-4) -> Tensor:
    """Summed in-batch infoNCE between row-normalised batches; row i of each is a positive pair."""
    z_orig, z_new = _as_tensor(z_orig), _as_tensor(z_new)
    if z_orig.ndim != 2 or z_orig.shape != z_new.shape or z_orig.shape[0] < 1:
        raise nx.ContractError(f"need two equal (n, d) batches, got {z_orig.shape} and {z_new.shape}")
    for name, z in (("z_orig", z_orig), ("z_new", z_new)):
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise nx.ContractError(f"{name} rows are not L2-normalised")
    if temperature <= 0:
        raise nx.ContractError("temperature must be positive")
    logits = z_orig @ z_new.transpose()
    if temperature != 1.0:
        logits = nx.scale(logits, 1.0 / temperature)
    n = z_orig.shape[0]
    return -nx.sum_(nx.log_softmax(logits, axis=-1)[np.arange(n), np.arange(n)])


def alignment_distance(z_orig: np.ndarray, z_new: np.ndarray) -> float:
    """Mean Euclidean distance between the normalised rows of the two batches."""
    zo = z_orig / np.linalg.norm(z_orig, axis=1, keepdims=True)
    zn = z_new / np.linalg.norm(z_new, axis=1, keepdims=True)
    return float(np.mean(np.linalg.norm(zo - zn, axis=1)))
