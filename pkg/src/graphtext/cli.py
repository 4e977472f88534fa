"""Command-line entry point: gen, train, eval, embed, gradcheck."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from graphtext import config as config_mod
from graphtext import data
from graphtext import numerics as nx
from graphtext.config import ConfigError, RunConfig
from graphtext.diagnostics import MicroConfig, micro_gradcheck
from graphtext.tasks import PairInstance, QaInstance, TaskModel
from graphtext.training import (
    Checkpoint,
    CheckpointError,
    MetricsLog,
    TrainingAborted,
    build_model,
    evaluate,
    evaluate_model,
    metric_name,
    run_id,
    train,
)

log = logging.getLogger("graphtext")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _echo(title: str, payload: dict) -> None:
    print(f"# {title}: {json.dumps(payload, sort_keys=True)}", flush=True)


# gen ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        spec = data.GeneratorSpec.from_toml(args.spec)
    except data.DatasetError as exc:
        raise UsageError(str(exc)) from exc
    _echo("generator", {"spec": str(args.spec), "out": str(args.out), **_spec_dict(spec)})
    for path in data.write_splits(spec, args.out).values():
        print(f"wrote {path}")
    return EXIT_OK


def _spec_dict(spec: data.GeneratorSpec) -> dict:
    d = {k: v for k, v in vars(spec).items() if k not in ("entities", "relations")}
    d["entities"] = len(spec.entities)
    d["relations"] = list(spec.relations)
    return d


# train --------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = config_mod.parse_value(value.strip())
    if args.no_graph:
        overrides["model.use_graph"] = False
    if args.no_align:
        overrides["train.lam"] = 0.0
    if args.branch:
        overrides["train.branch"] = args.branch
    if args.gnn_layers is not None:
        overrides["model.encoder.num_layers"] = args.gnn_layers
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.precision:
        overrides["train.precision"] = args.precision
    _normalise_sections(overrides)
    return config_mod.load_config(args.config, overrides)


def _normalise_sections(overrides: dict) -> None:
    # backbone/encoder keys may be given at top level or under [model]
    for key in list(overrides):
        for section in ("backbone", "encoder"):
            if key.startswith(section + "."):
                overrides["model." + key] = overrides.pop(key)


def _split_path(cfg: RunConfig, split: str, base: Path) -> Path | None:
    value = cfg.data.get(split)
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def _with_data_shape(cfg: RunConfig, records) -> RunConfig:
    rel, types = data.dataset_shape(records)
    return config_mod.with_changes(
        cfg,
        **{
            "model.encoder.relation_count": rel,
            "model.encoder.node_type_count": types,
            "model.encoder.seed": cfg.train.seed,
        },
    )


def _cache_prefix(dataset: Path) -> Path:
    digest = hashlib.sha256(dataset.read_bytes()).hexdigest()[:12]
    return dataset.with_name(f"{dataset.stem}.desc-{digest}")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    base = Path(args.config).resolve().parent
    train_path, dev_path = _split_path(cfg, "train", base), _split_path(cfg, "dev", base)
    if train_path is None or dev_path is None:
        raise UsageError("config needs [data] train and dev paths")
    train_set, dev_set = data.load(train_path), data.load(dev_path)
    test_path = _split_path(cfg, "test", base)
    test_set = data.load(test_path) if test_path else []
    cfg = _with_data_shape(cfg, train_set + dev_set + test_set)
    _echo("config", cfg.to_dict())
    out = Path(args.out or cfg.output)
    if not out.is_absolute() and args.out is None:
        out = base / out
    rid = run_id(cfg)
    metrics = MetricsLog(out / "metrics.tsv", rid)
    with nx.precision(cfg.train.precision):
        model = build_model(cfg)
        caches = [(p, _cache_prefix(p)) for p in (train_path, dev_path)]
        for _, prefix in caches:
            model.descriptions.load(prefix)
        try:
            result = train(train_set, dev_set, model, cfg, metrics)
        except TrainingAborted as exc:
            exc.checkpoint.save(out / "best")
            print(f"error: training aborted: {exc} (last good checkpoint saved)", file=sys.stderr)
            return EXIT_RUNTIME
        result.checkpoint.save(out / "best")
        for _, prefix in caches:
            model.descriptions.save(prefix)
        best = result.checkpoint.epoch
        print(f"best epoch {best}: dev {metric_name(model.kind)} {result.checkpoint.dev_metric:.4f}")
        if test_set:
            scores = evaluate_model(model, test_set)
            for name, value in scores.items():
                metrics.write(best, "test", name, value)
                print(f"test {name} {value:.4f}")
    print(f"checkpoint {out / 'best'}.manifest; metrics {metrics.path}")
    return EXIT_OK


# eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _echo("config", ckpt.config)
    records = data.load(args.dataset)
    scores = evaluate(records, ckpt)
    metrics = MetricsLog(args.out, run_id(ckpt.run_config))
    for name, value in scores.items():
        metrics.write(ckpt.epoch, Path(args.dataset).stem, name, value)
        print(f"{metrics.run}\t{ckpt.epoch}\t{Path(args.dataset).stem}\t{name}\t{value!r}")
    return EXIT_OK


# embed --------------------------------------------------------------------------

def record_input(rec) -> tuple[object, tuple[int, ...], str]:
    """(graph, linked ids, text) that represents a record in the exported embedding."""
    if isinstance(rec, PairInstance):
        return rec.graph, rec.linked, rec.text
    if isinstance(rec, QaInstance):
        return rec.graph, rec.linked, rec.question
    return rec.query.graph, rec.query.linked, rec.query.text


def embed_records(model: TaskModel, records) -> np.ndarray:
    dim = model.joint.backbone.config.dim
    rows = []
    for rec in records:
        graph, linked, text = record_input(rec)
        ctx = model.joint.query_context(text, linked)
        rows.append(model.joint.joint_embed(graph, ctx, text, use_graph=model.use_graph).z)
    return np.stack(rows).astype("<f4") if rows else np.zeros((0, dim), dtype="<f4")


def cmd_embed(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _echo("config", ckpt.config)
    records = data.load(args.dataset)
    model = ckpt.restore()
    if not records:
        warnings.warn(f"{args.dataset}: empty dataset, writing an empty vector file")
    with nx.precision(ckpt.run_config.train.precision):
        vectors = embed_records(model, records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_name(out.name + ".vec").write_bytes(vectors.tobytes())
    lines = ["graphtext-vectors/1", f"dim {vectors.shape[1]}", f"count {len(records)}"]
    lines += [rec.id for rec in records]
    out.with_name(out.name + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} vectors to {out}.vec")
    return EXIT_OK


def read_vectors(prefix: str | Path) -> tuple[list[str], np.ndarray]:
    prefix = Path(prefix)
    lines = prefix.with_name(prefix.name + ".manifest").read_text(encoding="utf-8").splitlines()
    dim, count = int(lines[1].split()[1]), int(lines[2].split()[1])
    flat = np.frombuffer(prefix.with_name(prefix.name + ".vec").read_bytes(), dtype="<f4")
    return lines[3 : 3 + count], flat.reshape(count, dim)


# gradcheck -------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = MicroConfig(seed=args.seed or 0)
    _echo("gradcheck", {**vars(cfg), "tol": args.tol, "inject_fault": args.inject_fault})
    report = micro_gradcheck(cfg, tol=args.tol, fault="matmul" if args.inject_fault else None)
    print(report)
    if not report.passed:
        print(f"FAILED blocks: {', '.join(report.failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print("gradient check passed")
    return EXIT_OK


# entry --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphtext", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write train/dev/test JSONL files from a generator spec")
    p.add_argument("spec")
    p.add_argument("out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a TOML run config")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    p.add_argument("--no-graph", action="store_true", help="drop the graph token (text-only ablation)")
    p.add_argument("--no-align", action="store_true", help="lambda = 0")
    p.add_argument("--branch", choices=("dual", "orig-only", "desc-only"))
    p.add_argument("--gnn-layers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--out", help="output directory (default: config 'output')")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint", help="checkpoint prefix (without .manifest)")
    p.add_argument("dataset")
    p.add_argument("--out", help="append metric rows to this TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export one joint embedding per record")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("out", help="output prefix; writes <out>.vec and <out>.manifest")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="corrupt matmul backward (must fail)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DatasetError, CheckpointError, nx.ContractError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
