"""AdamW with decoupled weight decay.

Parameters and moments live in plain name-keyed ndarray dicts; ``step``
mutates them in place. The decay term multiplies the parameter directly
(theta -= lr*wd*theta) instead of entering the gradient, so adaptive scaling
never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWHyper:
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                 v: np.ndarray, t: int, hyper: AdamWHyper) -> None:
    """One in-place update of a single parameter and its moments; t >= 1."""
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * grad
    v *= hyper.beta2
    v += (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    # both terms read the pre-step parameter: decay is decoupled, not chained
    param -= hyper.lr * (m_hat / (np.sqrt(v_hat) + hyper.eps)) \
        + hyper.lr * hyper.weight_decay * param


@dataclass
class AdamW:
    """Stateful wrapper holding first/second moments per named parameter."""

    hyper: AdamWHyper
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict, hyper: AdamWHyper | None = None) -> "AdamW":
        opt = cls(hyper or AdamWHyper())
        for name, p in params.items():
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        return opt

    def step(self, params: dict, grads: dict) -> None:
        if set(params) != set(self.m):
            raise ValueError("optimizer state does not match parameter set")
        self.t += 1
        for name in sorted(params):
            g = grads[name].astype(params[name].dtype, copy=False)
            adamw_update(params[name], g, self.m[name], self.v[name],
                         self.t, self.hyper)
