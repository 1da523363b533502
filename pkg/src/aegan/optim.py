"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over a fixed, ordered list of named parameters.

    Every registered parameter must carry a gradient when :meth:`step` runs;
    a missing one usually means a sub-network silently dropped out of the graph.
    """

    def __init__(
        self,
        named_params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params: list[Tensor] = [p for _, p in named]
        self.state = AdamState(
            learning_rate=lr,
            beta1=beta1,
            beta2=beta2,
            epsilon=eps,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        s = self.state
        missing = [n for n, p in zip(self.names, self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"adam_step: no gradient for registered parameters {missing[:5]}")
        s.step_count += 1
        t = s.step_count
        b1, b2 = s.beta1, s.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, s.first_moment, s.second_moment):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if s.learning_rate == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + s.epsilon)
            p.data -= (s.learning_rate * update).astype(p.data.dtype, copy=False)
