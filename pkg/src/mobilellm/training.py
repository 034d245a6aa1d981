"""Pretraining loop: AdamW, warmup + cosine decay, global-norm clipping, optional distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import sample_batch
from .numerics import DiffTensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.95
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainPlan:
    total_steps: int
    peak_lr: float = 2e-3
    weight_decay: float = 0.1
    warmup_steps: int | None = None  # None -> 2% of total_steps
    batch_size: int = 8
    seq_len: int = 64
    grad_clip: float = 1.0
    kd_teacher: str | None = None
    kd_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.02 * self.total_steps))
        problems = []
        if self.total_steps < 0:
            problems.append("total_steps must be >= 0")
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            problems.append("warmup_steps must be in [0, total_steps)")
        if self.peak_lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0 or self.kd_weight < 0:
            problems.append("rates must be non-negative and grad_clip positive")
        if self.batch_size < 1 or self.seq_len < 2:
            problems.append("batch_size must be >= 1 and seq_len >= 2")
        if problems:
            raise ValueError("invalid train plan: " + "; ".join(problems))


def lr_at(plan: TrainPlan, step: int) -> float:
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    if step < plan.warmup_steps:
        return plan.peak_lr * step / plan.warmup_steps
    span = plan.total_steps - plan.warmup_steps
    progress = (step - plan.warmup_steps) / span if span else 1.0
    return plan.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_update(params: list[DiffTensor], state: AdamState, lr: float, weight_decay: float) -> None:
    """Decoupled weight decay Adam step. Only matrices are decayed."""
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        if p.ndim >= 2 and weight_decay:
            p.data *= p.dtype.type(1.0 - lr * weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)).astype(p.dtype)


def clip_grad_norm(params: list[DiffTensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = nx.global_norm(grads)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


def kd_loss(teacher_logits, student_logits: DiffTensor) -> DiffTensor:
    """Cross-entropy of student log-probabilities under teacher probabilities.

    Averaged over every position; the teacher is a constant.
    """
    t = teacher_logits.data if isinstance(teacher_logits, DiffTensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise nx.ShapeError(f"teacher logits {t.shape} vs student logits {student_logits.shape}")
    v = t.shape[-1]
    n = t.size // v
    z = t.reshape(n, v).astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    p_teacher = DiffTensor((z / z.sum(axis=1, keepdims=True)), dtype=student_logits.dtype)
    log_ps = nx.log_softmax(nx.reshape(student_logits, (n, v)), axis=-1)
    return nx.scale(nx.sum_all(log_ps * p_teacher), -1.0 / n)


def objective(model, batch: np.ndarray, teacher=None, kd_weight: float = 1.0) -> DiffTensor:
    """Next-token cross-entropy, plus ``kd_weight`` times the distillation term."""
    batch = np.asarray(batch)
    inputs, targets = batch[:, :-1], batch[:, 1:]
    logits = model.forward(inputs)
    b, t, v = logits.shape
    loss = nx.cross_entropy(nx.reshape(logits, (b * t, v)), targets.reshape(-1))
    if teacher is not None:
        teacher_logits = teacher.forward(inputs).data
        loss = loss + nx.scale(kd_loss(teacher_logits, logits), kd_weight)
    return loss


def train_step(model, batch, plan: TrainPlan, opt_state: AdamState, step: int, teacher=None) -> dict:
    model.zero_grad()
    loss = objective(model, batch, teacher, plan.kd_weight)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step}")
    loss.backward()
    params = model.parameters()
    gnorm = clip_grad_norm(params, plan.grad_clip)
    lr = lr_at(plan, step)
    adamw_update(params, opt_state, lr, plan.weight_decay)
    return {"step": step, "loss": value, "lr": lr, "grad_norm": gnorm}


def train(model, tokens: np.ndarray | None, plan: TrainPlan, teacher=None, fixed_batch=None, callback=None) -> list[dict]:
    """Run ``plan.total_steps`` updates and return one record per step.

    Batches are random windows of ``tokens`` drawn from a generator seeded by
    ``plan.seed``, unless ``fixed_batch`` is given.
    """
    rng = np.random.default_rng(plan.seed)
    state = AdamState()
    history = []
    for step in range(plan.total_steps):
        batch = fixed_batch if fixed_batch is not None else sample_batch(tokens, plan.batch_size, plan.seq_len, rng)
        rec = train_step(model, batch, plan, state, step, teacher)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if step % 50 == 0:
            log.debug("step %d loss %.4f lr %.2e", step, rec["loss"], rec["lr"])
    return history
