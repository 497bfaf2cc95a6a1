"""Experiment orchestration: training loop, evaluation, baselines and exports."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .autodiff import ParamSet, load_params, save_params
from .backbone import GraphBatch, embed, init_backbone_params
from .config import ExperimentConfig, parse_config
from .controller import RunningNormalizer, StepController, init_controller_params
from .errors import ConfigError, NumericError, ShapeError
from .graphs import Dataset, SplitSpec, carve_validation, load_tu_dataset, sample_episode, split_by_class
from .meta import EpisodeTensors, meta_update, test_episode
from .synthetic import make_family_dataset

log = logging.getLogger(__name__)

RUN_SCHEMA = "# asmaml-runrecord v1"
RESULTS_SCHEMA = "# asmaml-results v1"
EMBED_SCHEMA = "# asmaml-embeddings v1"

RUN_COLUMNS = [
    "episode", "steps", "support_loss_first", "support_loss_last", "ani_first", "ani_last",
    "query_loss", "query_acc", "p_final", "q_total",
]
RESULT_COLUMNS = ["method", "dataset", "split", "way", "shot", "query", "tasks", "mean", "std", "ci95", "seed"]


class TrainingAborted(NumericError):
    def __init__(self, episode: int, checkpoint: Path, cause: Exception):
        super().__init__(f"numeric failure at episode {episode}: {cause}; last good checkpoint {checkpoint}")
        self.episode = episode
        self.checkpoint = checkpoint


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.name == "synthetic":
        dataset = make_family_dataset(d.synthetic_per_family, d.synthetic_seed, d.synthetic_noise)
    else:
        dataset = load_tu_dataset(cfg.data_root() / d.name, d.name)
    if d.split_file:
        spec = SplitSpec.parse(Path(d.split_file).read_text())
    elif d.train_classes or d.val_classes or d.test_classes:
        spec = SplitSpec(frozenset(d.train_classes), frozenset(d.val_classes), frozenset(d.test_classes))
    elif d.split_counts:
        if len(d.split_counts) != 3:
            raise ConfigError("data.split_counts needs three numbers (train val test)")
        spec = SplitSpec.random(dataset.classes, tuple(d.split_counts), d.split_seed)
    else:
        raise ConfigError("no class split configured: set data.*_classes, data.split_file or data.split_counts")
    train, val, test = split_by_class(dataset, spec)
    if not val.graphs and d.val_fraction > 0:
        train, val = carve_validation(train, d.val_fraction, np.random.default_rng(d.split_seed))
    return Splits(train, val, test)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    theta: ParamSet
    controller: StepController | None
    steps: int
    episode: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Path, state: TrainState, cfg: ExperimentConfig, in_dim: int) -> Path:
    params = dict(state.theta)
    meta = {"steps": state.steps, "episode": state.episode, "in_dim": in_dim, "config": cfg.dumps()}
    if state.controller is not None:
        params.update(state.controller.params)
        meta["normalizer"] = state.controller.normalizer.state()
    return save_params(path, params, meta)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None) -> tuple[TrainState, ExperimentConfig]:
    """Load a checkpoint; with ``cfg`` the parameter shapes are checked against it."""
    params, meta = load_params(path)
    saved_cfg = parse_config(meta.get("config", ""))
    cfg = cfg or saved_cfg
    theta = {k: v for k, v in params.items() if not k.startswith("ctrl.")}
    ctrl_params = {k: v for k, v in params.items() if k.startswith("ctrl.")}
    expected = init_backbone_params(int(meta["in_dim"]), cfg.task.way, cfg.backbone, 0)
    for name, ref in expected.items():
        if name not in theta:
            raise ShapeError(f"checkpoint lacks parameter {name} (expected shape {tuple(ref.shape)})")
        if theta[name].shape != ref.shape:
            raise ShapeError(
                f"parameter {name} has shape {tuple(theta[name].shape)}, config expects {tuple(ref.shape)}"
            )
    controller = None
    if ctrl_params:
        controller = StepController(
            ctrl_params, cfg.bounds, cfg.reward,
            RunningNormalizer.from_state(meta["normalizer"]), int(meta["steps"]),
        )
    return TrainState(theta, controller, int(meta["steps"]), int(meta.get("episode", 0)), meta), cfg


# ---------------------------------------------------------------------------
# records


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class CsvLog:
    def __init__(self, path: Path, schema: str, columns: list[str], append: bool = False):
        self.path = path
        exists = append and path.exists() and path.stat().st_size > 0
        self.fh = open(path, "a" if append else "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if not exists:
            self.fh.write(schema + "\n")
            self.writer.writerow(columns)
        self.columns = columns

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row[c]) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    std: float
    ci95: float
    accuracies: list[float]

    @classmethod
    def from_accuracies(cls, accs: list[float]) -> EvalResult:
        a = np.asarray(accs, dtype=np.float64)
        std = float(a.std(ddof=1)) if a.size > 1 else 0.0
        return cls(float(a.mean()), std, 1.96 * std / math.sqrt(a.size), [float(x) for x in a])


def sample_tasks(dataset: Dataset, cfg: ExperimentConfig, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    t = cfg.task
    return [sample_episode(dataset, t.way, t.shot, t.query, rng) for _ in range(count)]


def evaluate_params(theta: ParamSet, steps: int, tasks: list, cfg: ExperimentConfig) -> EvalResult:
    accs = []
    for ep in tasks:
        accs.append(test_episode(theta, ep, steps, cfg.backbone, cfg.meta))
    return EvalResult.from_accuracies(accs)


def evaluate(checkpoint: str | Path, cfg: ExperimentConfig, split: str = "test",
             splits: Splits | None = None, tasks: int | None = None, seed: int | None = None) -> EvalResult:
    """Mean / std / 95% interval of query accuracy over freshly sampled episodes."""
    state, cfg = load_checkpoint(checkpoint, cfg)
    splits = splits or load_splits(cfg)
    data = getattr(splits, split)
    episodes = sample_tasks(data, cfg, tasks or cfg.eval.tasks, cfg.eval.seed if seed is None else seed)
    return evaluate_params(state.theta, state.steps, episodes, cfg)


def write_result(path: str | Path, method: str, cfg: ExperimentConfig, split: str, res: EvalResult,
                 seed: int) -> None:
    with CsvLog(Path(path), RESULTS_SCHEMA, RESULT_COLUMNS, append=True) as out:
        out.write({
            "method": method, "dataset": cfg.data.name, "split": split, "way": cfg.task.way,
            "shot": cfg.task.shot, "query": cfg.task.query, "tasks": len(res.accuracies),
            "mean": res.mean, "std": res.std, "ci95": res.ci95, "seed": seed,
        })


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    final_checkpoint: Path
    best_val: float
    episodes_run: int
    state: TrainState


def _mean_trace(traces, attr):
    return np.mean([getattr(t, attr) for t in traces], axis=0).tolist()


def train(cfg: ExperimentConfig, out_dir: str | Path, splits: Splits | None = None) -> TrainResult:
    """Meta-train the backbone with the adaptive step controller.

    Writes ``metrics.csv`` (one row per episode), ``validation.csv``,
    ``timing.csv``, ``best.ckpt`` and ``final.ckpt`` into ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    splits = splits or load_splits(cfg)
    t = cfg.task
    seed = cfg.train.seed
    torch.manual_seed(seed)
    in_dim = splits.train.feature_dim
    theta = init_backbone_params(in_dim, t.way, cfg.backbone, seed)
    controller = None
    if cfg.controller.enabled:
        controller = StepController(init_controller_params(cfg.controller.hidden, seed + 1, initial_steps=cfg.bounds.initial),
                                    cfg.bounds, cfg.reward)
    state = TrainState(theta, controller, controller.steps if controller else cfg.controller.fixed_steps)

    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    save_checkpoint(best_path, state, cfg, in_dim)
    val_tasks = []
    if cfg.train.val_interval > 0 and splits.val.graphs and cfg.train.episodes > 0:
        val_tasks = [EpisodeTensors.from_episode(e)
                     for e in sample_tasks(splits.val, cfg, cfg.train.val_tasks, seed + 7919)]
    rng = np.random.default_rng(seed)
    best_val, stale = -math.inf, 0
    episode = 0
    with CsvLog(out / "metrics.csv", RUN_SCHEMA, RUN_COLUMNS) as metrics, \
            CsvLog(out / "validation.csv", "# asmaml-validation v1", ["episode", "val_acc", "val_std"]) as vlog, \
            CsvLog(out / "timing.csv", "# asmaml-timing v1", ["episode", "wall_time"]) as tlog:
        for episode in range(1, cfg.train.episodes + 1):
            start = time.perf_counter()
            steps = state.steps
            batch = [sample_episode(splits.train, t.way, t.shot, t.query, rng) for _ in range(cfg.meta.meta_batch)]
            try:
                theta, traces = meta_update(state.theta, batch, steps, cfg.backbone, cfg.meta)
                losses = _mean_trace(traces, "step_losses")
                anis = _mean_trace(traces, "step_anis")
                accs = _mean_trace(traces, "step_query_accuracies")
                p_final, q_total = float("nan"), float("nan")
                if controller is not None:
                    cs = controller.observe(losses, anis, accs)
                    p_final, q_total = cs.p_final, float(cs.returns[0])
                    state.steps = cs.next_steps
            except NumericError as exc:
                last_good = out / "last_good.ckpt"
                save_checkpoint(last_good, state, cfg, in_dim)
                raise TrainingAborted(episode, last_good, exc) from exc
            state.theta = theta
            state.episode = episode
            metrics.write({
                "episode": episode, "steps": steps,
                "support_loss_first": losses[0], "support_loss_last": losses[-1],
                "ani_first": anis[0], "ani_last": anis[-1],
                "query_loss": float(np.mean([tr.query_loss for tr in traces])),
                "query_acc": accs[-1], "p_final": p_final, "q_total": q_total,
            })
            tlog.write({"episode": episode, "wall_time": time.perf_counter() - start})
            if val_tasks and episode % cfg.train.val_interval == 0:
                res = evaluate_params(state.theta, state.steps, val_tasks, cfg)
                vlog.write({"episode": episode, "val_acc": res.mean, "val_std": res.std})
                if res.mean > best_val:
                    best_val, stale = res.mean, 0
                    save_checkpoint(best_path, state, cfg, in_dim)
                else:
                    stale += 1
                    if stale >= cfg.train.patience:
                        log.info("early stop at episode %d", episode)
                        break
    if not val_tasks and cfg.train.episodes > 0:
        save_checkpoint(best_path, state, cfg, in_dim)
    save_checkpoint(final_path, state, cfg, in_dim)
    return TrainResult(out, best_path, final_path, best_val, state.episode, state)


# ---------------------------------------------------------------------------
# baselines and exports


def run_baseline(method: str, cfg: ExperimentConfig, splits: Splits | None = None,
                 tasks: int | None = None, seed: int | None = None) -> EvalResult:
    """Evaluate a comparison method on test episodes; kernels need no training."""
    splits = splits or load_splits(cfg)
    seed = cfg.eval.seed if seed is None else seed
    episodes = sample_tasks(splits.test, cfg, tasks or cfg.eval.tasks, seed)
    b = cfg.baseline
    if method in ("wl", "sp", "graphlet"):
        kw = {"wl": {"iterations": b.wl_iterations}, "sp": {"max_length": b.sp_max_length},
              "graphlet": {"sample_count": b.graphlet_samples}}[method]
        rng = np.random.default_rng(seed)
        accs = [baselines.kernel_episode_accuracy(method, ep, rng=rng, **kw) for ep in episodes]
        return EvalResult.from_accuracies(accs)
    if method in ("finetune", "proto"):
        params = pretrain_for_baseline(cfg, splits)
        if method == "finetune":
            lr = b.pretrain_lr or cfg.meta.outer_lr
            accs = [baselines.finetune_accuracy(params, ep, cfg.backbone, b.finetune_steps, lr, seed + i)
                    for i, ep in enumerate(episodes)]
        else:
            accs = [baselines.proto_accuracy(params, ep, cfg.backbone) for ep in episodes]
        return EvalResult.from_accuracies(accs)
    raise ConfigError(f"unknown baseline {method!r}; choose wl, sp, graphlet, finetune or proto")


def pretrain_for_baseline(cfg: ExperimentConfig, splits: Splits) -> ParamSet:
    b, t = cfg.baseline, cfg.task
    return baselines.pretrain_backbone(
        splits.train, cfg.backbone,
        steps=b.pretrain_steps or cfg.train.episodes,
        lr=b.pretrain_lr or cfg.meta.outer_lr,
        batch_size=b.pretrain_batch or t.way * (t.shot + t.query),
        seed=cfg.train.seed,
        weight_decay=cfg.meta.weight_decay,
    )


def export_embeddings(checkpoint: str | Path, cfg: ExperimentConfig | None, dataset: Dataset,
                      sample_count: int, path: str | Path, seed: int = 0) -> Path:
    """Write ``graph_id, class, z0..z{2d-1}`` rows for a seeded sample of graphs."""
    state, cfg = load_checkpoint(checkpoint, cfg)
    if sample_count > len(dataset):
        raise ConfigError(f"sample_count {sample_count} exceeds dataset size {len(dataset)}")
    picks = sorted(np.random.default_rng(seed).choice(len(dataset), size=sample_count, replace=False).tolist())
    graphs = [dataset.graphs[i] for i in picks]
    dim = cfg.backbone.embed_dim
    path = Path(path)
    with CsvLog(path, EMBED_SCHEMA, ["graph_id", "class"] + [f"z{i}" for i in range(dim)]) as out:
        for start in range(0, len(graphs), 64):
            chunk = graphs[start:start + 64]
            with torch.no_grad():
                z, _ = embed(GraphBatch.from_graphs(chunk), state.theta, cfg.backbone)
            for g, row in zip(chunk, z.tolist()):
                rec = {"graph_id": g.graph_id, "class": g.class_id}
                rec.update({f"z{i}": v for i, v in enumerate(row)})
                out.write(rec)
    return path
