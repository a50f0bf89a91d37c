"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators per named parameter plus step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.values) for name, p in params.items()},
        v={name: np.zeros_like(p.values) for name, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on params and state.

    Rejects NaN gradients: a NaN here means training has diverged and silently
    propagating it would corrupt every parameter.
    """
    for name, g in grads.items():
        if np.isnan(g).any():
            raise ValueError(f"NaN gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.values.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
