"""Adam with bias correction, driven by a warmup + linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``base_lr`` at ``warmup_steps``, then linear decay to 0."""

    warmup_steps: int
    total_steps: int
    base_lr: float

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"bad schedule: warmup={self.warmup_steps}, total={self.total_steps}")

    @classmethod
    def with_warmup_fraction(cls, total_steps: int, base_lr: float, fraction: float = 0.1) -> "LrSchedule":
        return cls(int(round(fraction * total_steps)), total_steps, base_lr)

    @classmethod
    def constant(cls, base_lr: float) -> "LrSchedule":
        return _Constant(0, 1, base_lr)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if step >= self.total_steps:
            return 0.0
        span = self.total_steps - self.warmup_steps
        return self.base_lr * (self.total_steps - step) / span


class _Constant(LrSchedule):
    def __call__(self, step: int) -> float:
        return self.base_lr


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over a fixed parameter list.

    The learning rate for update ``t`` (1-based) is ``schedule(t)``.
    Gradients are not cleared by :meth:`step`; call :meth:`zero_grad`.
    """

    def __init__(self, params: list[Tensor], schedule: LrSchedule,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.schedule = schedule
        self.clip_norm = clip_norm
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if len(missing) == len(self.params):
            raise RuntimeError("adam step called with no gradients populated")
        st = self.state
        st.step += 1
        lr = self.schedule(st.step)
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            update = lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return lr
