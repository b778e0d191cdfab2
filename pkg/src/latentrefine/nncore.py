"""Reverse-mode autodiff on numpy arrays, MLPs, Adam with exponential LR decay.

The graph is a flat tape: every operation appends one node holding the result
array, the indices of its parents, and one vector-Jacobian closure per parent.
Appending in creation order keeps the tape topologically sorted, so the
backward pass is a single reverse sweep that visits each node exactly once.

All math is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError

__all__ = [
    "Tape",
    "Node",
    "Param",
    "Mlp",
    "AdamState",
    "adam_step",
    "bce_with_logits",
    "save_params",
    "load_params",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Node:
    """One tape entry: a value plus how to push gradients to its parents."""

    __slots__ = ("tape", "idx", "value", "parents", "vjps", "grad")

    def __init__(self, tape, idx, value, parents, vjps):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents  # tuple of parent indices on the same tape
        self.vjps = vjps  # one closure per parent: output-grad -> parent-grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # -- binary ops (other side may be a plain array or scalar constant) --

    def __add__(self, other):
        if isinstance(other, Node):
            return self.tape._record(
                self.value + other.value,
                (self, other),
                (
                    lambda g, s=self: _unbroadcast(g, s.value.shape),
                    lambda g, o=other: _unbroadcast(g, o.value.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return self.tape._record(
            self.value + c, (self,), (lambda g, s=self: _unbroadcast(g, s.value.shape),)
        )

    __radd__ = __add__

    def __neg__(self):
        return self.tape._record(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.tape._record(
                self.value - other.value,
                (self, other),
                (
                    lambda g, s=self: _unbroadcast(g, s.value.shape),
                    lambda g, o=other: _unbroadcast(-g, o.value.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return self.tape._record(
            self.value - c, (self,), (lambda g, s=self: _unbroadcast(g, s.value.shape),)
        )

    def __rsub__(self, other):
        c = np.asarray(other, dtype=np.float64)
        return self.tape._record(
            c - self.value, (self,), (lambda g, s=self: _unbroadcast(-g, s.value.shape),)
        )

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape._record(
                self.value * other.value,
                (self, other),
                (
                    lambda g, s=self, o=other: _unbroadcast(g * o.value, s.value.shape),
                    lambda g, s=self, o=other: _unbroadcast(g * s.value, o.value.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return self.tape._record(
            self.value * c,
            (self,),
            (lambda g, s=self, c=c: _unbroadcast(g * c, s.value.shape),),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.tape._record(
                self.value / other.value,
                (self, other),
                (
                    lambda g, s=self, o=other: _unbroadcast(g / o.value, s.value.shape),
                    lambda g, s=self, o=other: _unbroadcast(
                        -g * s.value / (o.value * o.value), o.value.shape
                    ),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return self * (1.0 / c)

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=np.float64)
        return self.tape._record(
            c / self.value,
            (self,),
            (lambda g, s=self, c=c: _unbroadcast(-g * c / (s.value * s.value), s.value.shape),),
        )

    def __matmul__(self, other):
        if not isinstance(other, Node):
            c = np.asarray(other, dtype=np.float64)
            return self.tape._record(
                self.value @ c, (self,), (lambda g, c=c: g @ c.T,)
            )
        return self.tape._record(
            self.value @ other.value,
            (self, other),
            (
                lambda g, o=other: g @ o.value.T,
                lambda g, s=self: s.value.T @ g,
            ),
        )

    # -- unary ops --

    def exp(self):
        out = np.exp(self.value)
        return self.tape._record(out, (self,), (lambda g, y=out: g * y,))

    def log(self):
        return self.tape._record(
            np.log(self.value), (self,), (lambda g, s=self: g / s.value,)
        )

    def tanh(self):
        out = np.tanh(self.value)
        return self.tape._record(out, (self,), (lambda g, y=out: g * (1.0 - y * y),))

    def sigmoid(self):
        out = _sigmoid(self.value)
        return self.tape._record(out, (self,), (lambda g, y=out: g * y * (1.0 - y),))

    def softplus(self):
        # log(1 + e^x), computed without overflow; d/dx = sigmoid(x)
        out = np.logaddexp(0.0, self.value)
        return self.tape._record(
            out, (self,), (lambda g, s=self: g * _sigmoid(s.value),)
        )

    def leaky_relu(self, slope: float = 0.01):
        mask = self.value > 0
        out = np.where(mask, self.value, slope * self.value)
        return self.tape._record(
            out, (self,), (lambda g, m=mask, a=slope: g * np.where(m, 1.0, a),)
        )

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient is zero outside the open interval (lo, hi)."""
        inside = (self.value > lo) & (self.value < hi)
        out = np.clip(self.value, lo, hi)
        return self.tape._record(out, (self,), (lambda g, m=inside: g * m,))

    def sum(self, axis=None):
        out = np.asarray(self.value.sum(axis=axis))
        shape = self.value.shape

        def vjp(g, axis=axis, shape=shape):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return self.tape._record(out, (self,), (vjp,))

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.value.shape})"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Param:
    """A trainable array. Lift onto a tape with ``tape.param`` to record usage."""

    __slots__ = ("value",)

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of operations; supports one backward sweep per loss."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: list[tuple[Param, Node]] = []

    def _record(self, value, parents: tuple, vjps: tuple) -> Node:
        node = Node(
            self,
            len(self.nodes),
            np.asarray(value, dtype=np.float64),
            tuple(p.idx for p in parents),
            vjps,
        )
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Record an input array as a gradient-accumulating leaf."""
        return self._record(value, (), ())

    def param(self, p: Param) -> Node:
        """Lift a Param; its gradient is later collected by ``grads_for``."""
        node = self.leaf(p.value)
        self._param_nodes.append((p, node))
        return node

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        """Fused affine map x @ w.T + b with w of shape (out, in)."""
        return self._record(
            x.value @ w.value.T + b.value,
            (x, w, b),
            (
                lambda g, w=w: g @ w.value,
                lambda g, x=x: g.T @ x.value,
                lambda g: g.sum(axis=0),
            ),
        )

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into ``node.grad`` for every ancestor."""
        if loss.value.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        nodes = self.nodes
        loss.grad = np.ones(())
        for i in range(loss.idx, -1, -1):
            node = nodes[i]
            g = node.grad
            if g is None:
                continue
            for parent_idx, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                parent = nodes[parent_idx]
                if parent.grad is None:
                    parent.grad = contrib.copy() if contrib is g else contrib
                else:
                    parent.grad = parent.grad + contrib

    def grads_for(self, params: list[Param]) -> list[np.ndarray]:
        """Per-Param gradients, summed over every lift of that Param."""
        acc: dict[int, np.ndarray] = {}
        for p, node in self._param_nodes:
            if node.grad is None:
                continue
            key = id(p)
            acc[key] = node.grad if key not in acc else acc[key] + node.grad
        return [acc.get(id(p), np.zeros_like(p.value)) for p in params]


# ---------------------------------------------------------------------------
# MLP


class Mlp:
    """Fully connected net: leaky-ReLU hidden layers, identity or sigmoid output.

    Weights use uniform Kaiming fan-in init scaled for the leaky-ReLU slope;
    biases start at zero.
    """

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        hidden_slope: float = 0.01,
        output_activation: str = "identity",
        zero_init_last: bool = False,
    ):
        if output_activation not in ("identity", "sigmoid"):
            raise ConfigError(f"unknown output activation {output_activation!r}")
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.hidden_slope = float(hidden_slope)
        self.output_activation = output_activation
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        gain_sq = 2.0 / (1.0 + hidden_slope**2)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(3.0 * gain_sq / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(Param(w))
            self.biases.append(Param(np.zeros(fan_out)))
        if zero_init_last:
            self.weights[-1].value[:] = 0.0
            self.biases[-1].value[:] = 0.0

    def parameters(self) -> list[Param]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def _check_input(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ConfigError(
                f"expected input of shape (batch, {self.sizes[0]}), got {x.shape}"
            )

    def forward(
        self,
        tape: Tape,
        x,
        apply_output_activation: bool = True,
        frozen: bool = False,
    ) -> Node:
        """Run the net on the tape. `x` may be a Node or an array.

        With ``frozen`` the parameters enter as constants: gradients still
        flow to the input but no parameter gradients are accumulated.
        """
        if not isinstance(x, Node):
            self._check_input(np.asarray(x))
            x = tape.leaf(x)
        else:
            self._check_input(x.value)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                h = (h @ w.value.T) + b.value
            else:
                h = tape.linear(h, tape.param(w), tape.param(b))
            if i < last:
                h = h.leaky_relu(self.hidden_slope)
        if apply_output_activation and self.output_activation == "sigmoid":
            h = h.sigmoid()
        return h

    def forward_array(self, x: np.ndarray, apply_output_activation: bool = True) -> np.ndarray:
        """Tape-free inference pass; matches ``forward`` bit for bit."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value.T + b.value
            if i < last:
                h = np.where(h > 0, h, self.hidden_slope * h)
        if apply_output_activation and self.output_activation == "sigmoid":
            h = _sigmoid(h)
        return h


def bce_with_logits(logits: Node, labels: np.ndarray) -> Node:
    """Mean binary cross entropy from pre-sigmoid outputs (overflow-safe)."""
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.value.shape)
    return (logits.softplus() - logits * labels).mean()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moments plus an exponential per-epoch learning-rate schedule.

    Effective learning rate is ``alpha0 * gamma ** epochs_completed``; call
    ``end_epoch`` once per epoch. Weight decay is decoupled from the gradient
    moments and applied directly at the update.
    """

    alpha0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    gamma: float = 1.0
    step_count: int = 0
    epochs_completed: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Param], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p.value) for p in params]
        state.second_moment = [np.zeros_like(p.value) for p in params]
        return state

    def effective_lr(self) -> float:
        return self.alpha0 * self.gamma**self.epochs_completed

    def end_epoch(self) -> None:
        self.epochs_completed += 1


def adam_step(state: AdamState, params: list[Param], grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(state.first_moment):
        raise ConfigError("AdamState was created for a different parameter list")
    lr = state.effective_lr()
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for parameter {i} (shape {p.value.shape}) "
                f"at step {t}"
            )
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.value -= lr * state.weight_decay * p.value
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Format (version 1): a .npz archive with
#   __format_version__ : scalar int
#   __meta__           : JSON string (shapes list plus caller metadata)
#   p000, p001, ...    : parameter arrays in row-major order, one per Param

_CHECKPOINT_VERSION = 1


def save_params(path, params: list[Param], meta: dict | None = None) -> None:
    arrays = {f"p{i:03d}": p.value for i, p in enumerate(params)}
    header = {
        "shapes": [list(p.value.shape) for p in params],
        "meta": meta or {},
    }
    np.savez(
        path,
        __format_version__=np.int64(_CHECKPOINT_VERSION),
        __meta__=np.str_(json.dumps(header)),
        **arrays,
    )


def load_params(path) -> tuple[list[np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as npz:
        version = int(npz["__format_version__"])
        if version != _CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(str(npz["__meta__"]))
        arrays = []
        for i, shape in enumerate(header["shapes"]):
            arr = np.asarray(npz[f"p{i:03d}"], dtype=np.float64)
            if list(arr.shape) != shape:
                raise ConfigError(f"checkpoint shape mismatch for parameter {i}")
            arrays.append(arr)
    return arrays, header["meta"]


def assign_params(params: list[Param], arrays: list[np.ndarray]) -> None:
    if len(params) != len(arrays):
        raise ConfigError(
            f"checkpoint has {len(arrays)} parameters, model expects {len(params)}"
        )
    for p, a in zip(params, arrays):
        if p.value.shape != a.shape:
            raise ConfigError(f"shape mismatch: {p.value.shape} vs {a.shape}")
        p.value[:] = a
