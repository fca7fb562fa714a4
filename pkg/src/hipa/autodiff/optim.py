from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(values: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update. Returns new arrays; inputs untouched.

    ``state`` is advanced in place (moments and step count).
    """
    if set(values) != set(grads):
        raise ValueError("values and grads must have the same keys")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    out = {}
    for k, w in values.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(w):
            raise ValueError(f"shape mismatch for {k}: {g.shape} vs {np.shape(w)}")
        m = BETA1 * state.m.get(k, 0.0) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(k, 0.0) + (1.0 - BETA2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = w - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return out
