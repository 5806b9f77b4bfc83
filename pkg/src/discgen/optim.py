"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 1e-4, eps: float = ADAM_EPS) -> None:
    """One AdamW update, in place.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ContractError(
            f"adamw_step: shape mismatch param {param.shape} grad {grad.shape} m {state.m.shape}")
    if lr <= 0:
        raise ContractError(f"adamw_step: lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** t)
    vhat = state.v / (1.0 - beta2 ** t)
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)); anneals to zero."""
    if step < 0:
        raise ContractError(f"cosine_lr: negative step {step}")
    if step > total_steps:
        warnings.warn(f"cosine_lr: step {step} beyond total {total_steps}, clamping to 0")
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamW:
    """Named-parameter AdamW over a dict of trainable Tensors.

    Iteration order is sorted by name, so updates are deterministic.
    """

    params: dict
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in sorted(self.params):
            self.states[name] = AdamState.for_param(self.params[name].data)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name in sorted(self.params):
            p: Tensor = self.params[name]
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.states[name], lr,
                       self.beta1, self.beta2, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
