"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..adcore import NonFiniteError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float = 5e-4, weight_decay: float = 0.08,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Update ``params`` (name -> ndarray) in place and return them.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)
    return params


class AdamW:
    """Stateful wrapper over a :class:`ParamStore`."""

    def __init__(self, store, lr: float = 5e-4, weight_decay: float = 0.08, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, names=None):
        self.store = store
        self.names = list(store) if names is None else list(names)
        self.hyper = dict(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
        self.state = AdamState()

    def step(self) -> None:
        params = {k: self.store[k].data for k in self.names}
        grads = {k: self.store[k].grad for k in self.names}
        adamw_step(params, grads, self.state, **self.hyper)
