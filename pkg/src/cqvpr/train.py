"""Training loop, checkpoints and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .data import Dataset, EvalConfig, TrainingTuple, mine_tuples
from .losses import LossConfig, local_mutual_matching_loss, query_matching_loss, total_loss, triplet_global_loss
from .model import CQVPRModel, ModelConfig, clone_model
from .optim import AdamState, adam_step
from .pipeline import describe_dataset, evaluate_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 4
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    hard_negatives: bool = False
    workers: int = 1


# The full-scale recipe (lr 1e-5, uniform negatives) assumes a pretrained backbone and
# large data; the desk/tiny presets start from random frozen weights on a
# 50-place synthetic set and need a larger step and hard negatives to move.
TRAIN_RECIPES: dict[str, TrainConfig] = {
    "full": TrainConfig(),
    "desk": TrainConfig(lr=3e-3, patience=5, hard_negatives=True),
    "tiny": TrainConfig(lr=3e-3, patience=5, hard_negatives=True),
}


@dataclass
class EpochLog:
    epoch: int
    L_g: float
    L_l: float
    L_c: float
    L: float
    val_r5: float


@dataclass
class TrainResult:
    log: list[EpochLog]
    best_epoch: int
    stopped_early: bool
    diverged: bool
    optimizer: AdamState
    seconds: float = 0.0


class TrainingDivergedError(RuntimeError):
    pass


def tuple_losses(model: CQVPRModel, dataset: Dataset, tup: TrainingTuple, config: LossConfig):
    """Forward one training tuple and return ``(L_g, L_l, L_c, L)`` tensors."""
    need_local = config.alpha > 0
    outs = [model.forward(dataset.image(i), local=need_local) for i in (tup.query, tup.positive, *tup.negatives)]
    q, p, negs = outs[0], outs[1], outs[2:]
    l_g = triplet_global_loss(q.global_desc, p.global_desc, [n.global_desc for n in negs], config.margin)
    zero = ag.Tensor(np.asarray(0.0))
    l_l = local_mutual_matching_loss(q.local, p.local, [n.local for n in negs]) if need_local else zero
    l_c = query_matching_loss(q.queries, p.queries, [n.queries for n in negs]) if config.beta > 0 else zero
    return l_g, l_l, l_c, total_loss(l_g, l_l, l_c, config)


def validation_recall(model: CQVPRModel, dataset: Dataset, workers: int = 1) -> tuple[float, float]:
    """Global-only (R@5, R@1) on ``dataset``, used for early stopping."""
    cfg = EvalConfig(recall_ns=(1, 5), top_k_retrieve=5, rerank_enabled=False)
    recalls = evaluate_model(clone_model(model, np.float32), dataset, cfg, workers)["global"]
    return recalls[5], recalls[1]


def train(
    model: CQVPRModel,
    dataset: Dataset,
    loss_config: LossConfig = LossConfig(),
    config: TrainConfig = TrainConfig(),
    val_dataset: Dataset | None = None,
    log_path=None,
) -> TrainResult:
    """Epoch loop with per-epoch re-mining, Adam on trainable parameters and
    early stopping on validation R@5 (R@1 breaks ties, since R@5 saturates
    quickly on small sets). The best validation state is restored into
    ``model`` before returning."""
    start = time.perf_counter()
    val_dataset = val_dataset or dataset
    params = model.parameters(trainable_only=True)
    state = AdamState(lr=config.lr)
    history: list[EpochLog] = []
    best_score, best_epoch, best_state = (-1.0, -1.0), 0, model.trainable_state()
    stale = 0
    diverged = stopped_early = False
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        desc = describe_dataset(clone_model(model, np.float32), dataset, local=False, workers=config.workers)
        mined = mine_tuples(
            dataset, desc.global_map(), loss_config.num_negatives, rng, hard_negatives=config.hard_negatives
        )
        tuples = [mined.tuples[i] for i in rng.permutation(len(mined.tuples))]
        if not tuples:
            raise ValueError("no training tuples could be mined")
        sums = np.zeros(4)
        good_state = model.trainable_state()
        for b in range(0, len(tuples), config.batch_size):
            batch = tuples[b : b + config.batch_size]
            model.zero_grad()
            for tup in batch:
                parts = tuple_losses(model, dataset, tup, loss_config)
                values = np.array([float(t.data) for t in parts])
                if not np.all(np.isfinite(values)):
                    diverged = True
                    break
                sums += values
                if parts[3].requires_grad:
                    ag.scale(parts[3], 1.0 / len(batch)).backward()
            grads = [p.grad for p in params]
            if diverged or not all(np.all(np.isfinite(g)) for g in grads):
                diverged = True
                break
            adam_step([p.data for p in params], grads, state)
        if diverged:
            log.error("loss became non-finite in epoch %d; restoring last good parameters", epoch)
            model.load_state(good_state)
            break
        means = sums / len(tuples)
        r5, r1 = validation_recall(model, val_dataset, config.workers)
        history.append(EpochLog(epoch, *means.tolist(), r5))
        log.info("epoch %d  L_g=%.4f L_l=%.4f L_c=%.4f L=%.4f val_R@5=%.4f", epoch, *means, r5)
        if log_path is not None:
            write_training_log(log_path, history)
        if (r5, r1) > best_score:
            best_score, best_epoch, best_state, stale = (r5, r1), epoch, model.trainable_state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break
    model.load_state(best_state)
    return TrainResult(history, best_epoch, stopped_early, diverged, state, time.perf_counter() - start)


LOG_COLUMNS = ["epoch", "L_g", "L_l", "L_c", "L", "val_R@5"]


def write_training_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for e in history:
            writer.writerow([e.epoch, *(f"{v:.6f}" for v in (e.L_g, e.L_l, e.L_c, e.L, e.val_r5))])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: CQVPRModel, optimizer: AdamState | None = None) -> None:
    """Trainable parameters (adapters, context module, heads, GeM p, queries) and
    Adam moments. Frozen weights are regenerated from the config seed."""
    arrays = {f"param/{k}": v for k, v in model.trainable_state().items()}
    meta = {"config": model.config.to_dict(), "optimizer": None}
    if optimizer is not None:
        names = list(model.trainable_state())
        meta["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
            "names": names if optimizer.first_moment else [],
        }
        for name, m, v in zip(names, optimizer.first_moment, optimizer.second_moment):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[CQVPRModel, AdamState | None]:
    with np.load(path) as npz:
        meta = json.loads(npz["meta"].tobytes().decode("utf-8"))
        model = CQVPRModel(ModelConfig.from_dict(meta["config"]))
        model.load_state({k[len("param/") :]: npz[k] for k in npz.files if k.startswith("param/")})
        opt = meta.get("optimizer")
        state = None
        if opt is not None:
            state = AdamState(opt["lr"], opt["beta1"], opt["beta2"], opt["eps"], opt["step_count"])
            state.first_moment = [npz[f"adam_m/{n}"].copy() for n in opt["names"]]
            state.second_moment = [npz[f"adam_v/{n}"].copy() for n in opt["names"]]
    return model, state


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationVariant:
    name: str
    group: str
    model_overrides: dict = field(default_factory=dict)
    loss_overrides: dict = field(default_factory=dict)


ABLATIONS: tuple[AblationVariant, ...] = (
    AblationVariant("pixel_only", "contribution", {"use_context": False}, {"beta": 0.0}),
    AblationVariant("context_only", "contribution", {"use_pixel": False}),
    AblationVariant("pixel_context_no_Lc", "contribution", loss_overrides={"beta": 0.0}),
    AblationVariant("full", "contribution"),
    AblationVariant("F_T", "context_feature"),
    AblationVariant("F_T_star", "context_feature", {"context_mode": "weighted"}),
    AblationVariant("K5", "num_queries", {"num_queries": 5}),
    AblationVariant("K10", "num_queries", {"num_queries": 10}),
    AblationVariant("K20", "num_queries", {"num_queries": 20}),
)

ABLATION_COLUMNS = ["variant", "group", "status", "R@1", "R@5", "R@10", "R@20"]


def train_ablations(
    out_dir,
    base_config: ModelConfig,
    train_set: Dataset,
    val_set: Dataset,
    loss_config: LossConfig = LossConfig(),
    train_config: TrainConfig = TrainConfig(),
    variants: Sequence[AblationVariant] = ABLATIONS,
) -> dict[str, Path]:
    """Train one checkpoint per variant; identical variants are trained once."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    done: dict[str, Path] = {}
    paths: dict[str, Path] = {}
    for v in variants:
        mcfg = replace(base_config, **v.model_overrides)
        lcfg = replace(loss_config, **v.loss_overrides)
        key = json.dumps([mcfg.to_dict(), asdict(lcfg)], sort_keys=True)
        if key not in done:
            model = CQVPRModel(mcfg)
            result = train(model, train_set, lcfg, train_config, val_set, out_dir / f"{v.name}_log.csv")
            path = out_dir / f"{v.name}.npz"
            save_checkpoint(path, model, result.optimizer)
            done[key] = path
        paths[v.name] = done[key]
    return paths


def ablation_report(
    test_set: Dataset,
    checkpoints: dict[str, Path | None],
    eval_config: EvalConfig = EvalConfig(),
    variants: Sequence[AblationVariant] = ABLATIONS,
    workers: int = 1,
) -> list[dict[str, str]]:
    """One row per variant with R@1/5/10/20 of the final (re-ranked if enabled) stage."""
    rows = []
    cache: dict[Path, dict[int, float]] = {}
    stage = "reranked" if eval_config.rerank_enabled else "global"
    for v in variants:
        path = checkpoints.get(v.name)
        row = {"variant": v.name, "group": v.group}
        if path is None or not Path(path).exists():
            row.update({"status": "absent", **{f"R@{n}": "" for n in (1, 5, 10, 20)}})
        else:
            path = Path(path)
            if path not in cache:
                model, _ = load_checkpoint(path)
                cache[path] = evaluate_model(clone_model(model, np.float32), test_set, eval_config, workers)[stage]
            recalls = cache[path]
            row["status"] = "ok"
            for n in (1, 5, 10, 20):
                row[f"R@{n}"] = f"{recalls[n]:.4f}" if n in recalls else ""
        rows.append(row)
    return rows


def write_ablation_csv(path, rows: Sequence[dict[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
