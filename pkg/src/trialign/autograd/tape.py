"""Tape, tensors and parameters for reverse-mode differentiation.

A :class:`Tape` records one node per primitive in call order, so the
insertion order is already topological and the backward sweep is a single
reverse pass over the list.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Parameter:
    """A named, optionally trainable array owned by a model."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


class Tensor:
    """Array value plus an optional handle into the tape that produced it."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / other)
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.gather(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        from . import ops
        return ops.swapaxes(self, -1, -2)


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Callable | None
    name: str | None = None


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = model.loss(batch)
        grads = tape.backward(loss)
    """

    def __init__(self, strict: bool = False):
        self.strict = strict
        self.nodes: list[_Node] = []
        self._param_nodes: dict[str, int] = {}
        self._params: dict[str, Parameter] = {}
        self.diagnostics: dict[str, int] = {"eig_degenerate": 0}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    # -- entry points ------------------------------------------------------

    def _check_finite(self, value: np.ndarray, what: str):
        if self.strict and not np.all(np.isfinite(value)):
            raise TapeError(f"non-finite values entering the tape via {what}")

    def watch(self, param: Parameter) -> Tensor:
        """Leaf tensor for ``param``; watching the same parameter twice reuses its node."""
        nid = self._param_nodes.get(param.name)
        if nid is not None:
            if self._params[param.name] is not param:
                raise TapeError(f"two different parameters share the name {param.name!r}")
            return Tensor(param.value, self, nid)
        self._check_finite(param.value, f"parameter {param.name!r}")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, param.name))
        self._param_nodes[param.name] = nid
        self._params[param.name] = param
        return Tensor(param.value, self, nid)

    def variable(self, value, name: str = "input") -> Tensor:
        """Leaf tensor for a raw array, differentiable but not a model parameter."""
        value = np.array(value, dtype=np.float64)
        self._check_finite(value, name)
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, None))
        return Tensor(value, self, nid)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        if all(i is None for i in ids):
            return Tensor(value)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward))
        return Tensor(value, self, nid)

    # -- backward ----------------------------------------------------------

    def _sweep(self, loss: Tensor) -> list:
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)
        for k in range(loss.node, -1, -1):
            g = grads[k]
            if g is None:
                continue
            node = self.nodes[k]
            if node.backward is None:
                continue
            for nid, gi in zip(node.inputs, node.backward(g)):
                if nid is None or gi is None:
                    continue
                grads[nid] = gi if grads[nid] is None else grads[nid] + gi
        return grads

    def backward(self, loss: Tensor, params: Sequence[Parameter] | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for trainable parameters, keyed by parameter name.

        Parameters watched on this tape but not connected to ``loss`` (or
        listed in ``params`` but never watched) get zero gradients.
        """
        grads = self._sweep(loss)
        if params is None:
            params = [p for p in self._params.values() if p.trainable]
        out = {}
        for p in params:
            if not p.trainable:
                continue
            nid = self._param_nodes.get(p.name)
            g = grads[nid] if nid is not None and nid < len(grads) else None
            out[p.name] = np.zeros_like(p.value) if g is None else np.broadcast_to(g, p.value.shape).copy()
        return out

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` with respect to arbitrary tensors recorded on this tape."""
        grads = self._sweep(loss)
        out = []
        for t in wrt:
            g = grads[t.node] if t.tape is self and t.node is not None and t.node < len(grads) else None
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def lift(x) -> Tensor:
    """Tensor view of ``x``; trainable parameters are watched on the active tape.

    Frozen parameters enter as constants, so nothing downstream of them alone
    is recorded and no gradient work is spent on them.
    """
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = _ACTIVE.get()
        return tape.watch(x) if tape is not None and x.trainable else Tensor(x.value)
    return Tensor(np.asarray(x, dtype=np.float64))


def tape_of(*tensors: Tensor) -> Tape | None:
    for t in tensors:
        if t.tape is not None and t.node is not None:
            return t.tape
    return None
