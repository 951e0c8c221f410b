from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, ShapeError


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one group of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place to ``param.data``.

    A ``None`` entry in ``grads`` counts as a zero gradient.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def step_params(params, state):
    """Adam step using each parameter's accumulated ``.grad``."""
    return adam_step(params, [p.grad for p in params], state)
