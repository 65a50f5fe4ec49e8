"""Adam with global-norm gradient clipping, and the training loops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import DuVlgModel
from .objectives import (CorruptionConfig, LossBreakdown, TaskKind,
                         build_task_batch, sample_task_restricted, task_terms, total_loss)

T2I_FINETUNE_LR = 1e-4
CAPTION_FINETUNE_LR = 3e-5


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contains NaN or infinity."""


@dataclass
class OptimState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    step_count: int = 0
    m: dict = field(default_factory=dict)  # param name -> first moment
    v: dict = field(default_factory=dict)  # param name -> second moment


def adam_step(model: DuVlgModel, state: OptimState) -> float:
    """Clip the global gradient norm, then apply a bias-corrected Adam update.

    Returns the pre-clip global norm.  Parameters whose grad is unset are
    treated as zero-gradient.
    """
    grads = {}
    sq_sum = 0.0
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in {name!r} at step {state.step_count}")
        grads[name] = g
        sq_sum += float((g * g).sum())
    norm = float(np.sqrt(sq_sum))

    scale = 1.0
    if state.clip_norm > 0 and norm > state.clip_norm:
        scale = state.clip_norm / norm

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in model.named_parameters():
        g = grads[name] * scale
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return norm


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    alpha: float = 0.05
    beta: float = 1.0
    p_dae: float = 0.6
    use_image_loss: bool = True
    use_text_loss: bool = True
    use_commitment: bool = True
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)


@dataclass
class StepRecord:
    step: int
    task: TaskKind
    breakdown: LossBreakdown
    grad_norm: float


def format_log_line(rec: StepRecord) -> str:
    b = rec.breakdown
    vals = (b.l_total, b.l_text, b.l_image, b.l_com, rec.grad_norm)
    return "\t".join([str(rec.step), rec.task.value] + [f"{v:.17g}" for v in vals])


LOG_HEADER = "step\ttask\tl_total\tl_text\tl_image\tl_com\tgrad_norm"


def make_optimizer(settings: TrainSettings, lr: float | None = None) -> OptimState:
    return OptimState(lr=settings.lr if lr is None else lr, beta1=settings.beta1,
                      beta2=settings.beta2, eps=settings.adam_eps,
                      clip_norm=settings.clip_norm)


def _train_step(model, optim, batch, settings: TrainSettings, alpha: float) -> tuple[LossBreakdown, float]:
    terms = task_terms(batch, model, use_commitment=settings.use_commitment)
    loss, breakdown = total_loss(terms, alpha=alpha, beta=settings.beta)
    model.zero_grad()
    ad.backward(loss)
    grad_norm = adam_step(model, optim)
    return breakdown, grad_norm


def pretrain(dataset, model: DuVlgModel, steps: int, settings: TrainSettings,
             rng: np.random.Generator, optim: OptimState | None = None,
             log_fn=None, start_step: int = 0) -> list[StepRecord]:
    """Mixed-task pre-training: sample a task, corrupt a batch, descend.

    Fully deterministic given (dataset, model, rng state, optimizer state).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if optim is None:
        optim = make_optimizer(settings)
    records = []
    with ad.no_cyclic_gc():
        for i in range(steps):
            kind = sample_task_restricted(rng, settings.p_dae,
                                          allow_image=settings.use_image_loss,
                                          allow_text=settings.use_text_loss)
            idx = rng.integers(0, len(dataset), size=settings.batch_size)
            batch = build_task_batch([dataset[int(j)] for j in idx], kind, rng,
                                     model, settings.corruption)
            breakdown, grad_norm = _train_step(model, optim, batch, settings, settings.alpha)
            rec = StepRecord(step=start_step + i, task=kind, breakdown=breakdown,
                             grad_norm=grad_norm)
            records.append(rec)
            if log_fn is not None:
                log_fn(format_log_line(rec))
    return records


def finetune(dataset, model: DuVlgModel, task: TaskKind, epochs: int,
             settings: TrainSettings, rng: np.random.Generator,
             lr: float | None = None, optim: OptimState | None = None,
             log_fn=None) -> list[StepRecord]:
    """Single-task training; MT_T2I keeps beta * commitment, captioning never
    touches image-target losses.  Default lrs follow the task."""
    if task not in (TaskKind.MT_CAPTION, TaskKind.MT_T2I):
        raise ValueError(f"finetune supports modality translation tasks, not {task}")
    if not dataset:
        raise ValueError("empty dataset")
    if lr is None:
        lr = T2I_FINETUNE_LR if task is TaskKind.MT_T2I else CAPTION_FINETUNE_LR
    if optim is None:
        optim = make_optimizer(settings, lr=lr)
    records = []
    step = 0
    with ad.no_cyclic_gc():
        for _ in range(epochs):
            order = rng.permutation(len(dataset))
            for lo in range(0, len(dataset), settings.batch_size):
                chunk = [dataset[int(j)] for j in order[lo:lo + settings.batch_size]]
                batch = build_task_batch(chunk, task, rng, model, settings.corruption)
                # single-task objective: no cross-modality mixing weight
                breakdown, grad_norm = _train_step(model, optim, batch, settings, alpha=1.0)
                rec = StepRecord(step=step, task=task, breakdown=breakdown, grad_norm=grad_norm)
                records.append(rec)
                if log_fn is not None:
                    log_fn(format_log_line(rec))
                step += 1
    return records


def evaluate_task_nll(dataset, model: DuVlgModel, kind: TaskKind,
                      settings: TrainSettings, seed: int = 0,
                      batch_size: int = 16) -> float:
    """Deterministic held-out NLL for one task (fixed corruption seed)."""
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    with ad.no_cyclic_gc():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset[lo:lo + batch_size]
            batch = build_task_batch(chunk, kind, rng, model, settings.corruption)
            loss = task_terms(batch, model, use_commitment=False)
            (term,) = loss.values()
            weight = sum(len(t) - 1 for t in batch.targets)
            total += term.item() * weight
            n += weight
    return total / n


def evaluate_image_nll(dataset, model, settings, seed: int = 0) -> float:
    return evaluate_task_nll(dataset, model, TaskKind.MT_T2I, settings, seed)


def evaluate_caption_nll(dataset, model, settings, seed: int = 0) -> float:
    return evaluate_task_nll(dataset, model, TaskKind.MT_CAPTION, settings, seed)
