"""Command-line entry point: ``cqvpr <command> [options]``.

Every command accepts ``--config FILE`` (a flat JSON object). Values from the
file override built-in defaults and explicit flags override the file. Unknown
keys are rejected. The fully resolved configuration is logged and written as
``config.json`` next to the command's outputs.

Failures exit nonzero with a single ``error: <kind>: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import EvalConfig, generate_synthetic_dataset, load_image, load_manifest, recall_at_n, write_metrics_csv
from .formats import export_heatmaps, load_global_store, load_local_grid, save_global_store
from .gradsuite import run_suite
from .losses import LossConfig
from .model import CQVPRModel, clone_model, preset
from .pipeline import describe_dataset, write_stores
from .retrieval import build_index, rerank, search_batch, write_ranked_csv
from .train import (
    ABLATIONS,
    TRAIN_RECIPES,
    ablation_report,
    load_checkpoint,
    save_checkpoint,
    train,
    train_ablations,
    write_ablation_csv,
)

log = logging.getLogger("cqvpr")

# key -> (type, default). ``None`` defaults mean "derived elsewhere".
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    # shared
    "seed": (int, 0),
    "workers": (int, 1),
    "out": (str, None),
    "manifest": (str, None),
    # model
    "preset": (str, "desk"),
    "checkpoint": (str, None),
    "num_queries": (int, None),
    "query_dim": (int, None),
    "context_mode": (str, None),
    "norm_mode": (str, None),
    # synthetic data
    "places": (int, 50),
    "views": (int, 8),
    "image_size": (int, 56),
    "spacing": (float, 150.0),
    # extraction / retrieval / evaluation
    "local": (bool, True),
    "database": (str, None),
    "local_dir": (str, None),
    "index": (str, None),
    "queries": (str, None),
    "k": (int, 100),
    "rerank": (bool, False),
    "min_sim": (float, None),
    "ranked": (str, None),
    "threshold": (float, 25.0),
    "recall_ns": (str, "1,5,10,20"),
    # training
    "val_manifest": (str, None),
    "lr": (float, None),
    "epochs": (int, None),
    "patience": (int, None),
    "batch_size": (int, None),
    "hard_negatives": (bool, None),
    "margin": (float, 0.1),
    "alpha": (float, 1.0),
    "beta": (float, 1.0),
    "num_negatives": (int, 5),
    # gradcheck
    "seeds": (int, 20),
    "tolerance": (float, 1e-4),
    # heatmaps / ablation
    "image": (str, None),
    "test_manifest": (str, None),
    "report_only": (bool, False),
}


class CLIError(Exception):
    """Raised for invalid invocations that argparse cannot catch."""


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add(parser: argparse.ArgumentParser, *keys: str, **help_text: str) -> None:
    for key in keys:
        kind = KEYS[key][0]
        helptext = help_text.get(key)
        if kind is bool:
            parser.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, default=None, help=helptext)
        else:
            parser.add_argument(_flag(key), dest=key, type=kind, default=None, help=helptext)


def resolve_config(args: argparse.Namespace, keys: list[str]) -> dict[str, Any]:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = {k: KEYS[k][1] for k in keys}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(loaded, dict):
            raise CLIError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(KEYS))
        if unknown:
            raise CLIError(f"{args.config}: unknown config key(s): {', '.join(unknown)}")
        for key, value in loaded.items():
            if key in cfg:
                cfg[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [_flag(k) for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CLIError(f"missing required option(s): {', '.join(missing)}")


def _write_config(out_dir: Path, command: str, cfg: dict[str, Any]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _model_from(cfg: dict[str, Any]) -> CQVPRModel:
    if cfg.get("checkpoint"):
        model, _ = load_checkpoint(cfg["checkpoint"])
        return model
    overrides = {k: cfg[k] for k in ("num_queries", "query_dim", "context_mode", "norm_mode") if cfg.get(k) is not None}
    return CQVPRModel(preset(cfg["preset"], seed=cfg["seed"], **overrides))


def _recall_ns(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise CLIError(f"recall_ns must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    _require(cfg, "out")
    ds = generate_synthetic_dataset(
        cfg["out"], cfg["seed"], cfg["places"], cfg["views"], cfg["image_size"], cfg["spacing"]
    )
    _write_config(Path(cfg["out"]), "synth", cfg)
    print(f"wrote {len(ds.records)} images ({len(ds.queries)} queries) to {cfg['out']}")


def cmd_extract(cfg):
    _require(cfg, "manifest", "out")
    dataset = load_manifest(cfg["manifest"])
    model = clone_model(_model_from(cfg), np.float32)
    desc = describe_dataset(model, dataset, local=cfg["local"], workers=cfg["workers"])
    paths = write_stores(cfg["out"], dataset, desc)
    _write_config(Path(cfg["out"]), "extract", cfg)
    print(f"wrote {paths['database']} and {paths['queries']} ({len(desc.locals)} local grids)")


def cmd_index(cfg):
    _require(cfg, "database", "out")
    index = build_index(cfg["database"], cfg["local_dir"])
    missing = [i for i, p in index.local_paths.items() if not p.exists()]
    if missing:
        raise CLIError(f"no local descriptors for {len(missing)} image(s), first {missing[0]!r}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_global_store(out / "index.cqvd", index.ids, index.matrix)
    meta = {"count": index.count, "dim": index.dim, "local_dir": cfg["local_dir"]}
    (out / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_config(out, "index", cfg)
    print(f"indexed {index.count} descriptors of dim {index.dim}")


def cmd_retrieve(cfg):
    _require(cfg, "index", "queries", "out")
    index_dir = Path(cfg["index"])
    meta = json.loads((index_dir / "index.json").read_text(encoding="utf-8"))
    local_dir = cfg["local_dir"] or meta.get("local_dir")
    index = build_index(index_dir / "index.cqvd", local_dir)
    query_ids, query_globals = load_global_store(cfg["queries"])
    ranked = search_batch(index, query_globals, cfg["k"])
    rows = list(zip(query_ids, ranked))
    if cfg["rerank"]:
        if local_dir is None:
            raise CLIError("--rerank needs --local-dir (or an index built with one)")
        for qid, glob in zip(query_ids, ranked):
            query_local = load_local_grid(Path(local_dir) / f"{qid}.cqvl")
            rows.append((qid, rerank(query_local, glob, index.local_paths, cfg["workers"], cfg["min_sim"])))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_ranked_csv(out / "ranked.csv", rows)
    _write_config(out, "retrieve", cfg)
    print(f"ranked {len(query_ids)} queries -> {out / 'ranked.csv'}")


def cmd_eval(cfg):
    from .retrieval import read_ranked_csv

    _require(cfg, "manifest", "ranked", "out")
    dataset = load_manifest(cfg["manifest"])
    config = EvalConfig(distance_threshold_m=cfg["threshold"], recall_ns=_recall_ns(cfg["recall_ns"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for stage in ("global", "reranked"):
        ranked = read_ranked_csv(cfg["ranked"], stage)
        if not ranked:
            continue
        recalls = recall_at_n(ranked, dataset, config)
        write_metrics_csv(out / f"metrics_{stage}.csv", recalls, metric=f"recall_{stage}")
        lines.append(f"{stage:9s} " + "  ".join(f"R@{n}={v:.4f}" for n, v in recalls.items()))
    if not lines:
        raise CLIError(f"{cfg['ranked']}: no ranked rows")
    _write_config(out, "eval", cfg)
    print("\n".join(lines))


def _train_config(cfg):
    recipe = TRAIN_RECIPES.get(cfg["preset"], TRAIN_RECIPES["desk"])
    fields = {"lr": "lr", "epochs": "max_epochs", "patience": "patience", "batch_size": "batch_size"}
    fields["hard_negatives"] = "hard_negatives"
    overrides = {dst: cfg[src] for src, dst in fields.items() if cfg.get(src) is not None}
    return replace(recipe, seed=cfg["seed"], workers=cfg["workers"], **overrides)


def _loss_config(cfg):
    return LossConfig(cfg["margin"], cfg["alpha"], cfg["beta"], cfg["num_negatives"])


def cmd_train(cfg):
    _require(cfg, "manifest", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_manifest(cfg["manifest"])
    val = load_manifest(cfg["val_manifest"]) if cfg["val_manifest"] else None
    model = _model_from(cfg)
    tcfg = _train_config(cfg)
    resolved = {**cfg, "resolved_train": {k: getattr(tcfg, k) for k in tcfg.__dataclass_fields__}}
    _write_config(out, "train", resolved)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    result = train(model, dataset, _loss_config(cfg), tcfg, val, out / "train_log.csv")
    save_checkpoint(out / "checkpoint.npz", model, result.optimizer)
    last = result.log[-1]
    print(
        f"trained {len(result.log)} epochs (best {result.best_epoch}, early stop {result.stopped_early}, "
        f"diverged {result.diverged}); last L={last.L:.4f} val R@5={last.val_r5:.4f}"
    )
    if result.diverged:
        raise RuntimeError("training diverged; last finite parameters were saved")


def cmd_gradcheck(cfg):
    result = run_suite(cfg["preset"], seeds=cfg["seeds"], threshold=cfg["tolerance"])
    print(result.report())
    if not result.passed:
        failed = [k for k, v in result.errors.items() if v > result.threshold]
        raise RuntimeError(f"gradient check failed for: {', '.join(failed)}")


def cmd_heatmaps(cfg):
    _require(cfg, "image", "out")
    model = _model_from(cfg)
    size = model.config.backbone.image_size
    image = load_image(cfg["image"])
    if image.shape[:2] != (size, size):
        raise CLIError(f"{cfg['image']}: image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    from . import autograd as ag

    with ag.no_grad():
        heat = model.forward(image, local=False).heatmap.data
    paths = export_heatmaps(heat, cfg["out"])
    _write_config(Path(cfg["out"]), "heatmaps", cfg)
    print(f"wrote {len(paths)} heatmaps to {cfg['out']}")


def cmd_ablate(cfg):
    _require(cfg, "manifest", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_manifest(cfg["manifest"])
    test = load_manifest(cfg["test_manifest"]) if cfg["test_manifest"] else dataset
    if cfg["report_only"]:
        checkpoints = {v.name: out / f"{v.name}.npz" for v in ABLATIONS}
    else:
        val = load_manifest(cfg["val_manifest"]) if cfg["val_manifest"] else dataset
        base = _model_from({**cfg, "checkpoint": None}).config
        checkpoints = train_ablations(out, base, dataset, val, _loss_config(cfg), _train_config(cfg))
    config = EvalConfig(distance_threshold_m=cfg["threshold"], recall_ns=(1, 5, 10, 20))
    rows = ablation_report(test, checkpoints, config, workers=cfg["workers"])
    write_ablation_csv(out / "ablation.csv", rows)
    _write_config(out, "ablate", cfg)
    for row in rows:
        print(",".join(row[c] for c in ("variant", "group", "status", "R@1", "R@5", "R@10", "R@20")))


MODEL_KEYS = ("preset", "checkpoint", "seed", "num_queries", "query_dim", "context_mode", "norm_mode")
TRAIN_KEYS = ("lr", "epochs", "patience", "batch_size", "hard_negatives", "margin", "alpha", "beta", "num_negatives")

COMMANDS: dict[str, tuple[Callable[[dict], None], tuple[str, ...], str]] = {
    "synth": (cmd_synth, ("out", "seed", "places", "views", "image_size", "spacing"), "build the synthetic dataset"),
    "extract": (
        cmd_extract,
        ("manifest", "out", "workers", "local", *MODEL_KEYS),
        "write global (CQVD) and local (CQVL) descriptor stores",
    ),
    "index": (cmd_index, ("database", "local_dir", "out"), "validate a database store and build the search index"),
    "retrieve": (
        cmd_retrieve,
        ("index", "queries", "local_dir", "out", "k", "rerank", "min_sim", "workers"),
        "rank references for every query (global, then re-ranked)",
    ),
    "eval": (cmd_eval, ("manifest", "ranked", "out", "threshold", "recall_ns"), "Recall@N of ranked results"),
    "train": (
        cmd_train,
        ("manifest", "val_manifest", "out", "workers", *MODEL_KEYS, *TRAIN_KEYS),
        "train adapters, context module and heads",
    ),
    "gradcheck": (cmd_gradcheck, ("preset", "seeds", "tolerance"), "finite-difference gradient suite"),
    "heatmaps": (cmd_heatmaps, ("image", "out", *MODEL_KEYS), "write one PGM heatmap per query"),
    "ablate": (
        cmd_ablate,
        (
            "manifest",
            "val_manifest",
            "test_manifest",
            "out",
            "workers",
            "threshold",
            "report_only",
            *MODEL_KEYS,
            *TRAIN_KEYS,
        ),
        "train and report the ablation variants",
    ),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors become a single ``error: UsageError: ...`` line."""

    def error(self, message: str):
        self.exit(2, f"error: UsageError: {self.prog}: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cqvpr", description="Contextual-query visual place recognition.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of option values; flags take precedence")
        _add(p, *keys)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler, keys, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(args, list(keys))
        log.info("resolved config for %s: %s", args.command, json.dumps(cfg, sort_keys=True))
        handler(cfg)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # single machine-parsable line, no traceback
        message = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {exc.__class__.__name__}: {message}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
