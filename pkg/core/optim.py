"""
Optimizers - Adam / AdamW with parameter groups, and learning-rate schedules
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from core.errors import UsageError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant", "linear-with-warmup", "cosine")


@dataclass
class LrSchedule:
    kind: str = "constant"
    total_steps: int = 1
    warmup_steps: int = 0
    base_rate: float = 1e-3

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise UsageError(f"unknown schedule kind '{self.kind}' (expected one of {SCHEDULE_KINDS})")
        if self.total_steps < 1 or self.warmup_steps < 0:
            raise UsageError(f"schedule needs total_steps >= 1 and warmup_steps >= 0, "
                             f"got {self.total_steps}/{self.warmup_steps}")


def schedule_rate(sched, step):
    """Learning rate at step in [0, total_steps]"""
    if step < 0 or step > sched.total_steps:
        raise UsageError(f"step {step} outside [0, {sched.total_steps}]")
    base = sched.base_rate
    if sched.kind == "constant":
        return base
    if sched.kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * step / sched.total_steps))
    warmup = min(sched.warmup_steps, sched.total_steps)
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    remaining = sched.total_steps - warmup
    if remaining <= 0:
        return base
    return max(0.0, base * (sched.total_steps - step) / remaining)


@dataclass
class ParamGroup:
    params: list
    lr: float
    name: str = "default"
    weight_decay: Optional[float] = None


@dataclass
class OptimizerState:
    groups: List[ParamGroup]
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    first_moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)

    @classmethod
    def create(cls, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=False):
        state = cls(groups=list(groups), betas=tuple(betas), eps=eps,
                    weight_decay=weight_decay, decoupled=decoupled)
        for group in state.groups:
            state.first_moments.append([np.zeros_like(p.values) for p in group.params])
            state.second_moments.append([np.zeros_like(p.values) for p in group.params])
        return state


def optimizer_step(params, grads, state, lr_scale=1.0):
    """
    One Adam (decoupled=False) or AdamW (decoupled=True) update, in place.
    params / grads are nested per group like state.groups; a None grad counts as zero.
    """
    if len(params) != len(state.groups) or len(grads) != len(state.groups):
        raise UsageError("params/grads must be grouped like the optimizer state")
    beta1, beta2 = state.betas
    t = state.step + 1
    for gi, group in enumerate(state.groups):
        lr = group.lr * lr_scale
        decay = state.weight_decay if group.weight_decay is None else group.weight_decay
        for pi, param in enumerate(params[gi]):
            grad = grads[gi][pi]
            if grad is None:
                grad = np.zeros_like(param.values)
            if grad.shape != param.values.shape:
                raise UsageError(f"grad shape {grad.shape} != param shape {param.values.shape} "
                                 f"in group '{group.name}'")
            if decay and not state.decoupled:
                grad = grad + decay * param.values
            m = state.first_moments[gi][pi]
            v = state.second_moments[gi][pi]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            if decay and state.decoupled:
                param.values -= lr * decay * param.values
            param.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return params


class Optimizer:
    """
    Thin driver around OptimizerState: pulls .grad off each parameter,
    applies the schedule multiplier and clears grads afterwards.
    """

    def __init__(self, groups, schedule=None, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decoupled=False):
        self.state = OptimizerState.create(groups, betas=betas, eps=eps,
                                           weight_decay=weight_decay, decoupled=decoupled)
        self.schedule = schedule

    @property
    def step_count(self):
        return self.state.step

    def current_scale(self):
        if self.schedule is None:
            return 1.0
        unit = replace(self.schedule, base_rate=1.0)
        step = min(self.state.step, unit.total_steps)
        if unit.kind == "linear-with-warmup" and step < unit.warmup_steps:
            # first warm-up update is non-zero
            step += 1
        return schedule_rate(unit, step)

    def step(self):
        params = [group.params for group in self.state.groups]
        grads = [[p.grad for p in group.params] for group in self.state.groups]
        optimizer_step(params, grads, self.state, lr_scale=self.current_scale())
        self.zero_grad()

    def zero_grad(self):
        for group in self.state.groups:
            for p in group.params:
                p.grad = None


def adam(params, lr, schedule=None, weight_decay=0.0):
    return Optimizer([ParamGroup(list(params), lr)], schedule=schedule, weight_decay=weight_decay)


def adamw(groups, schedule=None, weight_decay=0.01):
    return Optimizer(groups, schedule=schedule, weight_decay=weight_decay, decoupled=True)
