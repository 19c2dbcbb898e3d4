from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autograd import Parameter


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step = int(state["step"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update of every trainable parameter in ``params``.

    Frozen parameters are skipped and need no gradient. Parameter values are
    replaced, never modified in place, so earlier snapshots stay valid.
    """
    live = [p for p in params if p.trainable]
    missing = [p.name for p in live if p.name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {missing[:5]}")
    scale = 1.0
    if state.clip_norm is not None:
        norm = global_norm({p.name: grads[p.name] for p in live})
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in live:
        g = grads[p.name] * scale
        if g.shape != p.value.shape:
            raise ValueError(f"gradient for {p.name} has shape {g.shape}, parameter is {p.value.shape}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
