"""RAdam, global-norm clipping, the epoch loop, checkpoints and metric logs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from graphtext import __version__
from graphtext import numerics as nx
from graphtext.backbone import Backbone
from graphtext.config import RunConfig, TrainConfig, from_dict
from graphtext.fusion import GraphTextModel
from graphtext.numerics import Parameter
from graphtext.tasks import Instance, TaskModel, metric_accuracy, ndcg_at_k

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "graphtext-checkpoint/1"


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    """Checkpoint files are unreadable or do not fit the model/config."""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint, records: list[EpochRecord]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.records = records


# optimiser ----------------------------------------------------------------------

def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm:
        return [g for g in grads], norm
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads], norm


@dataclass
class RAdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def radam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: RAdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    rectify: bool = True,
) -> np.ndarray:
    """One rectified-Adam update of ``param`` in place (weight decay decoupled)."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    state.m[...] = b1 * state.m + (1.0 - b1) * grad
    state.v[...] = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**t)
    if not rectify:
        param -= lr * m_hat / (np.sqrt(state.v / (1.0 - b2**t)) + eps)
        return param
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
    if rho_t > 4.0:
        v_hat = np.sqrt(state.v / (1.0 - b2**t))
        r_t = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        param -= lr * r_t * m_hat / (v_hat + eps)
    else:
        param -= lr * m_hat
    return param


class RAdam:
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        rectify: bool = True,
    ):
        self.params = [p for p in params if p.trainable]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.rectify = weight_decay, rectify
        self.state = [RAdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {p.name or 'parameter'}; step skipped")
        for p, g, s in zip(self.params, grads, self.state):
            radam_step(p.data, g, s, self.lr, self.betas, self.eps, self.weight_decay, self.rectify)


# model construction -----------------------------------------------------------

def build_model(cfg: RunConfig) -> TaskModel:
    """Fresh model for a run; call under the run's precision."""
    m, t = cfg.model, cfg.train
    joint = GraphTextModel(Backbone(m.backbone), m.encoder, m.adapter_hidden, m.init_mode, m.init_seed)
    return TaskModel(
        m.task, joint, branch=t.branch, use_graph=m.use_graph, lam=t.lam, tau=t.tau,
        nce_temperature=t.nce_temperature, seed=m.encoder.seed,
    )


def frozen_hash(model: TaskModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.trainable:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# checkpoints --------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    epoch: int = 0
    dev_metric: float = float("nan")

    @classmethod
    def capture(cls, model: TaskModel, config: RunConfig, epoch: int, dev_metric: float) -> Checkpoint:
        named = list(model.named_parameters())
        return cls(
            config.to_dict(),
            {n: p.data.copy() for n, p in named},
            {n: p.trainable for n, p in named},
            epoch,
            dev_metric,
        )

    @property
    def run_config(self) -> RunConfig:
        return from_dict(self.config)

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        dtype = "<f8" if self.config["train"]["precision"] == "float64" else "<f4"
        lines = [
            CHECKPOINT_FORMAT,
            f"graphtext {__version__}",
            f"numpy {np.__version__}",
            f"dtype {dtype}",
            f"epoch {self.epoch}",
            f"dev_metric {self.dev_metric!r}",
            f"config {json.dumps(self.config, sort_keys=True)}",
            f"params {len(self.params)}",
        ]
        chunks, offset = [], 0
        for name, arr in self.params.items():
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"{name}\t{shape}\t{offset}\t{arr.size}\t{int(self.trainable[name])}")
            chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
            offset += arr.size
        manifest, params = _paths(prefix)
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        params.write_bytes(b"".join(chunks))
        return manifest, params

    @classmethod
    def load(cls, prefix: str | Path) -> Checkpoint:
        manifest, params = _paths(Path(prefix))
        if not manifest.exists() or not params.exists():
            raise CheckpointError(f"checkpoint not found: {manifest} / {params}")
        lines = manifest.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{manifest}: not a checkpoint manifest")
        try:
            header = dict(line.split(" ", 1) for line in lines[1:8])
            dtype = header["dtype"]
            flat = np.frombuffer(params.read_bytes(), dtype=dtype)
            config = json.loads(header["config"])
            out, trainable = {}, {}
            for line in lines[8 : 8 + int(header["params"])]:
                name, shape, offset, size, train_flag = line.split("\t")
                dims = tuple(int(s) for s in shape.split(",")) if shape else ()
                start, size = int(offset), int(size)
                if start + size > flat.size:
                    raise CheckpointError(f"{params}: truncated at parameter {name}")
                out[name] = flat[start : start + size].reshape(dims).copy()
                trainable[name] = train_flag == "1"
        except (KeyError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{manifest}: malformed manifest ({exc})") from exc
        return cls(config, out, trainable, int(header["epoch"]), float(header["dev_metric"]))

    def apply(self, model: TaskModel) -> None:
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))[:5]
            raise CheckpointError(f"checkpoint parameters do not match the model: {missing}")
        for name, p in named.items():
            arr = self.params[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr

    def restore(self) -> TaskModel:
        """Rebuild the model described by the manifest and load its weights."""
        cfg = self.run_config
        with nx.precision(cfg.train.precision):
            model = build_model(cfg)
            self.apply(model)
        return model


def _paths(prefix: Path) -> tuple[Path, Path]:
    return prefix.with_name(prefix.name + ".manifest"), prefix.with_name(prefix.name + ".params")


# metric log -------------------------------------------------------------------

def run_id(cfg: RunConfig) -> str:
    if cfg.run_name:
        return cfg.run_name
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:12]


class MetricsLog:
    """Append-only TSV of (run-id, epoch, split, metric, value)."""

    def __init__(self, path: str | Path | None, run: str):
        self.path = None if path is None else Path(path)
        self.run = run
        self.rows: list[tuple[str, int, str, str, float]] = []

    def write(self, epoch: int, split: str, metric: str, value: float) -> None:
        row = (self.run, epoch, split, metric, float(value))
        self.rows.append(row)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(f"{row[0]}\t{epoch}\t{split}\t{metric}\t{row[4]!r}\n")


# evaluation --------------------------------------------------------------------

def metric_name(kind: str) -> str:
    return "ndcg@10" if kind == "retrieval" else "accuracy"


def evaluate_model(model: TaskModel, dataset: Sequence[Instance], batch_size: int = 64) -> dict[str, float]:
    """Task metric from the original branch (dropout off) plus graph-text distance."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    if model.kind == "retrieval":
        value = float(np.mean([ndcg_at_k(model.rank(inst), inst.gains, 10) for inst in dataset]))
    else:
        preds, golds = [], []
        for start in range(0, len(dataset), batch_size):
            batch = dataset[start : start + batch_size]
            preds += model.predict(batch)
            golds += [inst.label if model.kind == "pair" else inst.gold for inst in batch]
        value = metric_accuracy(preds, golds)
    return {metric_name(model.kind): value, "distance": dev_distance(model, dataset, batch_size)}


def dev_distance(model: TaskModel, dataset: Sequence[Instance], batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        rows = sum(len(model.rows(inst)) for inst in batch)
        total += model.alignment_rows_distance(batch) * rows
        count += rows
    return total / count


def evaluate(dataset: Sequence[Instance], checkpoint: Checkpoint | str | Path) -> dict[str, float]:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    cfg = checkpoint.run_config
    model = checkpoint.restore()
    kinds = {type(inst).__name__ for inst in dataset}
    expected = {"pair": "PairInstance", "qa": "QaInstance", "retrieval": "RetrievalInstance"}[cfg.model.task]
    if kinds - {expected}:
        raise CheckpointError(f"checkpoint is for task {cfg.model.task!r}, dataset holds {sorted(kinds)}")
    with nx.precision(cfg.train.precision):
        return evaluate_model(model, dataset)


# training loop ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    info_nce: float
    combined: float
    dev_metric: float
    dev_distance: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[EpochRecord] = field(default_factory=list)
    model: TaskModel | None = None

    @property
    def best(self) -> EpochRecord:
        return self.records[self.checkpoint.epoch]


def train(
    train_set: Sequence[Instance],
    dev_set: Sequence[Instance],
    model: TaskModel,
    config: RunConfig,
    metrics: MetricsLog | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Epoch 0 is the untrained model; the best dev epoch is kept and restored into ``model``."""
    tc: TrainConfig = config.train
    if not train_set or not dev_set:
        raise ValueError("train and dev splits must be non-empty")
    if get_precision_mismatch(model, tc.precision):
        raise nx.ContractError(f"model was not built in {tc.precision}")
    metrics = metrics or MetricsLog(None, run_id(config))
    key = metric_name(model.kind)
    rng = np.random.default_rng([tc.seed, 606])
    opt = RAdam(
        model.trainable_parameters(), tc.lr, weight_decay=tc.weight_decay, rectify=tc.optimizer == "radam"
    )

    def record(epoch: int, task: float, nce: float, comb: float) -> EpochRecord:
        dev = evaluate_model(model, dev_set)
        rec = EpochRecord(epoch, task, nce, comb, dev[key], dev["distance"])
        for name, value in (("loss", comb), ("task_loss", task), ("info_nce", nce)):
            if not math.isnan(value):
                metrics.write(epoch, "train", name, value)
        metrics.write(epoch, "dev", key, rec.dev_metric)
        metrics.write(epoch, "dev", "distance", rec.dev_distance)
        log.info("epoch %d dev %s %.4f distance %.4f loss %.4f", epoch, key, rec.dev_metric, rec.dev_distance, comb)
        return rec

    records = [record(0, math.nan, math.nan, math.nan)]
    best = Checkpoint.capture(model, config, 0, records[0].dev_metric)
    steps = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        for start in range(0, len(order), tc.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            batch = [train_set[i] for i in order[start : start + tc.batch_size]]
            model.zero_grad()
            out = model.forward_batch(batch, training=True)
            if not math.isfinite(out.loss.combined):
                _abort(model, best, records, f"non-finite loss at epoch {epoch}")
            out.loss.total.backward()
            params = opt.params
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            grads, _ = clip_global_norm(grads, tc.max_grad_norm)
            try:
                opt.step(grads)
            except NonFiniteError as exc:
                _abort(model, best, records, str(exc))
            sums += (out.loss.task, out.loss.info_nce, out.loss.combined)
            steps += 1
        n = len(order)
        records.append(record(epoch, *(sums / n)))
        if records[-1].dev_metric > best.dev_metric:
            best = Checkpoint.capture(model, config, epoch, records[-1].dev_metric)
        if max_steps is not None and steps >= max_steps:
            break
    best.apply(model)
    return TrainResult(best, records, model)


def get_precision_mismatch(model: TaskModel, precision: str) -> bool:
    want = np.float64 if precision == "float64" else np.float32
    return any(p.data.dtype != want for p in model.parameters())


def _abort(model: TaskModel, best: Checkpoint, records: list[EpochRecord], why: str):
    best.apply(model)
    raise TrainingAborted(f"{why}; restored epoch {best.epoch}", best, records)
