from __future__ import annotations

import numpy as np

from ..autograd import Parameter, Tensor, lift, ops
from ..numkit import Rng


class Module:
    """Named container of parameters and child modules.

    Parameter names are dotted paths (``enc_2d.layers.0.attn.q.w``) so they are
    unique within a model and double as checkpoint keys.
    """

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def _name(self, local: str) -> str:
        return f"{self.prefix}.{local}" if self.prefix else local

    def add_param(self, local: str, value, trainable: bool = True) -> Parameter:
        p = Parameter(self._name(local), value, trainable)
        self._params[local] = p
        return p

    def add_module(self, local: str, module: "Module") -> "Module":
        self._children[local] = module
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params.values())
        for child in self._children.values():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                v = np.asarray(state[name], dtype=np.float64)
                if v.shape != p.value.shape:
                    raise ValueError(f"shape mismatch for {name}: {v.shape} vs {p.value.shape}")
                p.value = v.copy()


def _init_weight(rng: Rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, prefix: str, n_in: int, n_out: int, rng: Rng, bias: bool = True, gain: float = 1.0):
        super().__init__(prefix)
        self.n_in, self.n_out = n_in, n_out
        self.w = self.add_param("w", _init_weight(rng, n_in, n_out, gain))
        self.b = self.add_param("b", np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        x = lift(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.prefix}: expected input width {self.n_in}, got {x.shape[-1]}")
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, prefix: str, dim: int):
        super().__init__(prefix)
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class ResidualBlock(Module):
    """``x + W2 gelu(W1 x)``."""

    def __init__(self, prefix: str, width: int, hidden: int, rng: Rng):
        super().__init__(prefix)
        self.fc1 = self.add_module("fc1", Linear(self._name("fc1"), width, hidden, rng.child("fc1")))
        self.fc2 = self.add_module("fc2", Linear(self._name("fc2"), hidden, width, rng.child("fc2"), gain=0.5))

    def __call__(self, x) -> Tensor:
        return ops.add(x, self.fc2(ops.gelu(self.fc1(x))))


class MlpBlockStack(Module):
    """Input projection, ``n_blocks`` residual blocks, output projection."""

    def __init__(self, prefix: str, n_in: int, width: int, n_out: int, rng: Rng, n_blocks: int = 3):
        super().__init__(prefix)
        self.n_in, self.width, self.n_out = n_in, width, n_out
        self.inp = self.add_module("inp", Linear(self._name("inp"), n_in, width, rng.child("inp")))
        self.blocks = [
            self.add_module(f"blocks.{i}", ResidualBlock(self._name(f"blocks.{i}"), width, width, rng.child("block", i)))
            for i in range(n_blocks)
        ]
        self.out = self.add_module("out", Linear(self._name("out"), width, n_out, rng.child("out")))

    def __call__(self, x) -> Tensor:
        x = lift(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.prefix}: expected input width {self.n_in}, got {x.shape[-1]}")
        h = self.inp(x)
        for block in self.blocks:
            h = block(h)
        return self.out(ops.gelu(h))


class MultiHeadSelfAttention(Module):
    def __init__(self, prefix: str, width: int, heads: int, rng: Rng):
        super().__init__(prefix)
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.qkv = self.add_module("qkv", Linear(self._name("qkv"), width, 3 * width, rng.child("qkv")))
        self.proj = self.add_module("proj", Linear(self._name("proj"), width, width, rng.child("proj"), gain=0.5))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, w = x.shape
        h, dh = self.heads, w // self.heads
        qkv = ops.reshape(self.qkv(x), (b, t, 3, h, dh))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q, k, v = ops.gather(qkv, 0), ops.gather(qkv, 1), ops.gather(qkv, 2)
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v)  # (B, H, T, dh)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, w))
        return self.proj(out)


class TransformerLayer(Module):
    """Pre-norm encoder layer: self-attention and feed-forward, each with a residual."""

    def __init__(self, prefix: str, width: int, heads: int, ff_width: int, rng: Rng):
        super().__init__(prefix)
        self.ln1 = self.add_module("ln1", LayerNorm(self._name("ln1"), width))
        self.attn = self.add_module("attn", MultiHeadSelfAttention(self._name("attn"), width, heads, rng.child("attn")))
        self.ln2 = self.add_module("ln2", LayerNorm(self._name("ln2"), width))
        self.ff1 = self.add_module("ff1", Linear(self._name("ff1"), width, ff_width, rng.child("ff1")))
        self.ff2 = self.add_module("ff2", Linear(self._name("ff2"), ff_width, width, rng.child("ff2"), gain=0.5))

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.ff2(ops.gelu(self.ff1(self.ln2(x)))))
