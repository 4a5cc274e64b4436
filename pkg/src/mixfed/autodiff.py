"""Small reverse-mode differentiation engine for stacks of dense layers.

Tensors are plain ``float64`` numpy arrays. A forward pass over a stack of
:class:`DenseLayer` returns the output together with a :class:`Tape` holding
the cached intermediates; :func:`backward` walks the tape in reverse,
accumulating gradients into every non-frozen :class:`Parameter` and returning
the gradient with respect to the stack input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a tensor."""


class TapeMismatchError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


class Parameter:
    """A trainable tensor with its gradient buffer and a freeze flag."""

    __slots__ = ("value", "grad", "frozen", "name")

    def __init__(self, value, frozen: bool = False, name: str = ""):
        self.value = np.array(as_tensor(value, name or "parameter"), dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> "Parameter":
        p = Parameter(self.value.copy(), frozen=self.frozen, name=self.name)
        p.grad = self.grad.copy()
        return p

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name or '?'}, shape={self.shape}{flag})"


class DenseLayer:
    """``y = act(x @ W.T + b)`` with ``W`` of shape (out_dim, in_dim)."""

    def __init__(self, weights: Parameter, bias: Parameter, activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weights.value.ndim != 2:
            raise ValueError("weights must be a matrix")
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match out_dim {weights.shape[0]}")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
             activation: str = "relu") -> "DenseLayer":
        # uniform(-1/sqrt(in), 1/sqrt(in)), the usual default for linear layers
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(Parameter(w, name="weights"), Parameter(b, name="bias"), activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)

    def __repr__(self) -> str:
        return f"DenseLayer({self.in_dim}->{self.out_dim}, {self.activation})"


@dataclass
class Tape:
    layers: list[DenseLayer]
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def check_stack(stack: Sequence[DenseLayer]) -> None:
    for j in range(len(stack) - 1):
        if stack[j].out_dim != stack[j + 1].in_dim:
            raise ValueError(
                f"layer {j} outputs {stack[j].out_dim} but layer {j + 1} expects {stack[j + 1].in_dim}"
            )


def forward(stack: Sequence[DenseLayer], x) -> tuple[np.ndarray, Tape]:
    x = as_tensor(x, "input")
    if x.ndim != 2:
        raise ValueError(f"input must be batch x features, got shape {x.shape}")
    check_stack(stack)
    if stack and x.shape[1] != stack[0].in_dim:
        raise ValueError(f"input width {x.shape[1]} != first layer in_dim {stack[0].in_dim}")
    tape = Tape(list(stack))
    h = x
    for layer in stack:
        tape.inputs.append(h)
        z = h @ layer.weights.value.T + layer.bias.value
        tape.preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return check_finite(h, "forward output"), tape


def backward(tape: Tape, dout, stack: Sequence[DenseLayer] | None = None) -> np.ndarray:
    """Backpropagate ``dout`` through the taped stack; returns d(loss)/d(input).

    Gradients are accumulated, not overwritten. ``stack`` may be passed to
    verify the tape was recorded on the same layers.
    """
    if stack is not None and (len(stack) != len(tape.layers)
                              or any(a is not b for a, b in zip(stack, tape.layers))):
        raise TapeMismatchError("tape was recorded on a different stack")
    if len(tape.inputs) != len(tape.layers):
        raise TapeMismatchError("incomplete tape")
    g = as_tensor(dout, "upstream gradient")
    for layer, h, z in zip(reversed(tape.layers), reversed(tape.inputs), reversed(tape.preacts)):
        if layer.weights.value.shape != (z.shape[1], h.shape[1]):
            raise TapeMismatchError("layer shape changed since forward")
        if g.shape != z.shape:
            raise TapeMismatchError(f"upstream gradient shape {g.shape} != {z.shape}")
        if layer.activation == "relu":
            g = g * (z > 0.0)
        layer.weights.accumulate(g.T @ h)
        layer.bias.accumulate(g.sum(axis=0))
        g = g @ layer.weights.value
    return g


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = as_tensor(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("cross_entropy needs a non-empty batch x classes matrix")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    return loss, grad


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain SGD on the non-frozen params, then zero every grad."""
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    params = list(params)
    for p in params:
        if not p.frozen:
            check_finite(p.grad, f"gradient of {p.name or 'parameter'}")
    for p in params:
        if not p.frozen and lr != 0.0:
            p.value -= lr * p.grad
        p.zero_grad()


def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[Parameter],
                     eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. each parameter.

    Test oracle: perturbs ``p.value`` in place one coordinate at a time and
    restores it exactly afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over every coordinate."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
