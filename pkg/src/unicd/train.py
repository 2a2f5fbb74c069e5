"""Two-stage training loop, evaluation and checkpoint plumbing.

Stage 1 optimizes everything except the frequency prompt generators, which
are left out of the optimizer and frozen.  Stage 2 starts from a stage-1
checkpoint, freezes backbone and decoder, and trains the prompt generators
and prediction head at a low learning rate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import losses
from .config import ConfigError, ModelConfig, TaskKind
from .data import SyntheticSample, augment, collate, damage_targets
from .decoder import HeadOutputs
from .metrics import (ConfusionMatrix, MetricReport, bda_metrics, binary_metrics, report_from, scd_metrics)
from .model import ChangeModel
from .optim import AdamW, steplr
from .tensor import no_grad

# full-scale settings reported for the original GPU runs; kept encodable, not used by default
FULL_SCALE = {
    "bcd": dict(batch_size=22, crop=256, max_iters=320_000, lr=1e-4, weight_decay=5e-4),
    "bda": dict(batch_size=16, crop=256, max_iters=400_000, lr=1e-4, weight_decay=5e-4),
    "scd": dict(batch_size=16, crop=256, max_iters=400_000, lr=1e-4, weight_decay=5e-4),
}

STAGE_PARTS = {1: ("backbone", "decoder", "head"), 2: ("fcpg", "head")}


class UsageError(ValueError):
    """Invalid combination of training inputs (e.g. stage 2 without a stage-1 checkpoint)."""


@dataclass
class TrainConfig:
    task: str = "bcd"
    batch_size: int = 4
    crop: int = 32
    num_samples: int = 16
    max_iters: int = 2000
    lr: float = 1e-3
    weight_decay: float = 5e-4
    stage: int = 1
    stage2_lr: float = 1e-5
    stage_split: float = 0.8
    seed: int = 0
    data_seed: int = 0
    steplr_period: int | None = None
    steplr_gamma: float = 0.5
    rotate: bool = True
    flip: bool = True
    grad_clip: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        try:
            TaskKind(self.task)
        except ValueError:
            raise ConfigError(f"unknown task {self.task!r}") from None
        if self.lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ConfigError("batch_size must be >= 1 and max_iters >= 0")
        if not 0 < self.stage_split <= 1:
            raise ConfigError("stage_split must be in (0, 1]")
        if self.crop % 32:
            raise ConfigError(f"crop must be a multiple of 32, got {self.crop}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def full_scale(cls, task: str, **overrides) -> "TrainConfig":
        return cls(task=task, **{**FULL_SCALE[task], **overrides})

    @property
    def stage_lr(self) -> float:
        return self.lr if self.stage == 1 else self.stage2_lr

    @property
    def stage_iters(self) -> int:
        first = int(round(self.max_iters * self.stage_split))
        return first if self.stage == 1 else self.max_iters - first

    @property
    def period(self) -> int:
        return self.steplr_period or max(self.stage_iters // 3, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    steps: int
    trace: list[str]
    reports: list[losses.LossReport] = field(default_factory=list, repr=False)
    stopped_early: bool = False

    @property
    def totals(self) -> list[float]:
        return [float(r.total.data) for r in self.reports]

    def trace_text(self) -> str:
        return "\n".join(self.trace) + "\n"


def trainable_names(model: ChangeModel, stage: int) -> list[str]:
    parts = STAGE_PARTS[stage]
    return [n for n, _ in model.named_parameters() if model.part_of(n) in parts]


def set_stage(model: ChangeModel, stage: int) -> list[str]:
    """Mark only the parameters trained in ``stage`` as requiring gradients."""
    names = set(trainable_names(model, stage))
    for n, p in model.named_parameters():
        p.requires_grad = n in names
    return sorted(names)


def class_weights(task: str, samples, model_cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Inverse-frequency class weights over the whole training set."""
    kind = TaskKind(task)
    if kind is TaskKind.BCD:
        return {}
    if kind is TaskKind.SCD:
        return {
            "cd": losses.class_balanced_weights([s.labels["change"] for s in samples], 2),
            "sem": losses.class_balanced_weights([s.labels[k] for s in samples for k in ("t1", "t2")],
                                                 model_cfg.num_classes + 1),
        }
    return {
        "loc": losses.class_balanced_weights([s.labels["loc"] for s in samples], 2),
        "dmg": losses.class_balanced_weights([damage_targets(s.labels["loc"], s.labels["dmg"]) for s in samples],
                                             model_cfg.damage_levels + 1),
    }


def task_loss(task: str, out: HeadOutputs, labels: dict, weights: dict) -> losses.LossReport:
    kind = TaskKind(task)
    if kind is TaskKind.BCD:
        return losses.bcd_loss(out, labels["change"])
    if kind is TaskKind.SCD:
        return losses.scd_loss(out, labels["change"], labels["t1"], labels["t2"], weights.get("cd"), weights.get("sem"))
    return losses.bda_loss(out, labels["loc"], damage_targets(labels["loc"], labels["dmg"]),
                           weights.get("loc"), weights.get("dmg"))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``: walks a fresh seeded permutation each epoch."""
    if n == 0:
        raise ConfigError("training set is empty")
    start = step * batch_size
    idx = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n)
        idx.append(np.random.default_rng([seed, epoch]).permutation(n)[offset])
    return np.array(idx)


def _sample_seed(seed: int, step: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, step, j]).generate_state(1)[0])


def make_batch(samples, cfg: TrainConfig, step: int, dtype):
    chosen = [samples[i] for i in batch_indices(len(samples), cfg.batch_size, cfg.seed, step)]
    if cfg.rotate or cfg.flip:
        chosen = [augment(s, _sample_seed(cfg.seed, step, j), cfg.rotate, cfg.flip) for j, s in enumerate(chosen)]
    return collate(chosen, dtype)


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


Callback = Callable[[int, losses.LossReport, ChangeModel], bool]


def train(model: ChangeModel, samples: list[SyntheticSample], cfg: TrainConfig,
          init: ckpt.Checkpoint | None = None, callback: Callback | None = None,
          trace_every: int = 1) -> tuple[TrainResult, ckpt.Checkpoint]:
    """Run one training stage and return the loss trace plus the final checkpoint.

    ``callback(step, report, model)`` runs after every optimizer step and may
    return True to stop early.
    """
    if model.cfg.task != cfg.task:
        raise UsageError(f"model task {model.cfg.task} differs from train task {cfg.task}")
    if not samples:
        raise ConfigError("training set is empty")
    if cfg.stage == 2:
        if init is None:
            raise UsageError("stage 2 needs a stage-1 checkpoint")
        if init.stage != 1:
            raise UsageError(f"stage 2 must start from a stage-1 checkpoint, got stage {init.stage}")
    if init is not None:
        load_state(model, init)
    dtype = np.dtype(cfg.dtype)
    names = set_stage(model, cfg.stage)
    named = dict(model.named_parameters())
    opt = AdamW([(n, named[n]) for n in names], cfg.stage_lr, cfg.weight_decay)
    weights = class_weights(cfg.task, samples, model.cfg)
    header = losses.trace_header(cfg.task)
    result = TrainResult(0, [header])
    model.train()
    for step in range(cfg.stage_iters):
        batch = make_batch(samples, cfg, step, dtype)
        model.set_step(step)
        opt.zero_grad()
        out = model(batch.pre, batch.post)
        report = task_loss(cfg.task, out, batch.labels, weights)
        report.total.backward()
        if cfg.grad_clip:
            _clip(opt.params.values(), cfg.grad_clip)
        opt.step(steplr(cfg.stage_lr, step, cfg.period, cfg.steplr_gamma))
        report.total = report.total.detach()
        result.reports.append(report)
        if step % trace_every == 0:
            result.trace.append(losses.trace_line(step, report))
        result.steps = step + 1
        if callback is not None and callback(step, report, model):
            result.stopped_early = True
            break
    model.eval()
    return result, make_checkpoint(model, cfg, opt)


def make_checkpoint(model: ChangeModel, cfg: TrainConfig | None = None, opt: AdamW | None = None) -> ckpt.Checkpoint:
    moments = {}
    step = 0
    if opt is not None:
        step = opt.state.step
        for name in sorted(opt.state.m):
            moments[f"m/{name}"] = opt.state.m[name]
            moments[f"v/{name}"] = opt.state.v[name]
    config = {"model": model.cfg.to_dict()}
    if cfg is not None:
        config["train"] = cfg.to_dict()
    return ckpt.Checkpoint(
        model.cfg.task,
        cfg.stage if cfg is not None else 1,
        {n: p.data for n, p in model.named_parameters()},
        {n: b for n, b in model.named_buffers()},
        step,
        moments,
        config,
    )


def load_state(model: ChangeModel, ck: ckpt.Checkpoint) -> None:
    """Copy parameters and buffers from ``ck`` into ``model`` (shapes must match)."""
    if ck.task != model.cfg.task:
        raise UsageError(f"checkpoint task {ck.task} differs from model task {model.cfg.task}")
    named = dict(model.named_parameters())
    missing = set(named) ^ set(ck.params)
    if missing:
        raise UsageError(f"checkpoint and model parameters differ: {sorted(missing)[:5]}")
    for n, p in named.items():
        if p.shape != ck.params[n].shape:
            raise UsageError(f"shape mismatch for {n}: {p.shape} vs {ck.params[n].shape}")
        p.data = ck.params[n].astype(p.dtype)
    for n, b in model.named_buffers():
        if n in ck.buffers:
            b[...] = ck.buffers[n]


def model_from_checkpoint(ck: ckpt.Checkpoint, dtype=np.float32) -> ChangeModel:
    if not ck.config or "model" not in ck.config:
        raise UsageError("checkpoint has no run-config snapshot")
    model = ChangeModel(ModelConfig.from_dict(ck.config["model"]), dtype=dtype)
    load_state(model, ck)
    return model.eval()


def predict(task: str, out: HeadOutputs) -> dict[str, np.ndarray]:
    """Hard label maps from head outputs."""
    kind = TaskKind(task)
    if kind is TaskKind.BDA:
        return {"loc": out.loc.data.argmax(1), "dmg": out.dmg.data[:, 1:].argmax(1) + 1}
    change = out.change.data.argmax(1)
    if kind is TaskKind.BCD:
        return {"change": change}
    return {
        "change": change,
        "t1": np.where(change == 1, out.sem_t1.data[:, 1:].argmax(1) + 1, 0),
        "t2": np.where(change == 1, out.sem_t2.data[:, 1:].argmax(1) + 1, 0),
    }


def evaluate(model: ChangeModel, samples, batch_size: int = 8, dataset: str = "synthetic") -> MetricReport:
    """Metric report of ``model`` (in eval mode) over ``samples``."""
    if not samples:
        raise ConfigError("evaluation set is empty")
    task = model.cfg.task
    kind = TaskKind(task)
    was_training = model.training
    model.eval()
    k = model.cfg.num_classes + 1
    cm = ConfusionMatrix(2 if kind is TaskKind.BCD else k)
    loc_ref, loc_pred, dmg_ref, dmg_pred = [], [], [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size], model.dtype)
            pred = predict(task, model(batch.pre, batch.post))
            if kind is TaskKind.BCD:
                cm.update(batch.labels["change"], pred["change"])
            elif kind is TaskKind.SCD:
                cm.update(batch.labels["t1"], pred["t1"])
                cm.update(batch.labels["t2"], pred["t2"])
            else:
                loc_ref.append(batch.labels["loc"])
                loc_pred.append(pred["loc"])
                dmg_ref.append(batch.labels["dmg"])
                dmg_pred.append(pred["dmg"])
    model.train(was_training)
    if kind is TaskKind.BCD:
        m = binary_metrics(cm)
    elif kind is TaskKind.SCD:
        m = scd_metrics(cm)
    else:
        m = bda_metrics(np.concatenate(loc_ref), np.concatenate(loc_pred), np.concatenate(dmg_ref),
                        np.concatenate(dmg_pred), model.cfg.damage_levels)
    return report_from(dataset, task, m)
