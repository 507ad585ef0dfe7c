"""Warmup/linear-decay schedule and AdamW with decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import Tensor


def lr_schedule(step: int, total_steps: int, peak: float, warmup_frac: float = 0.1) -> float:
    """Linear 0 -> peak over the first ceil(warmup_frac * total) steps, then linear peak -> 0 at total."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = math.ceil(warmup_frac * total_steps)
    if step < warmup:
        return peak * step / warmup
    if warmup == total_steps:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class AdamWHyper:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    hyper: AdamWHyper,
    decay: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update with decoupled decay; ``step`` counts from 1. Updates in place."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(f"AdamW shape mismatch: param {param.shape}, grad {grad.shape}, moments {m.shape}/{v.shape}")
    b1, b2 = hyper.beta1, hyper.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    if decay and hyper.weight_decay:
        param *= 1 - hyper.lr * hyper.weight_decay
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    param -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return param, m, v


def decays(name: str) -> bool:
    """Prompt entries, biases and norm gains are exempt from weight decay."""
    return not (name.startswith("prompts.") or name.endswith(".bias") or name.endswith(".gain"))


class AdamW:
    """AdamW over named parameters split into learning-rate groups."""

    def __init__(self, named: dict[str, Tensor], groups: dict[str, list[str]], weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = named
        self.group_of = {name: group for group, names in groups.items() for name in names}
        missing = set(named) - set(self.group_of)
        if missing:
            raise ValueError(f"parameters without a learning-rate group: {sorted(missing)}")
        self.weight_decay = weight_decay
        self.betas, self.eps = betas, eps
        self.m = {n: np.zeros_like(p.data) for n, p in named.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in named.items()}
        self.step_count = 0

    def step(self, lrs: dict[str, float]) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            hyper = AdamWHyper(lrs[self.group_of[name]], self.weight_decay, *self.betas, self.eps)
            adamw_step(p.data, grad.astype(p.data.dtype, copy=False), self.m[name], self.v[name],
                       self.step_count, hyper, decay=decays(name))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
