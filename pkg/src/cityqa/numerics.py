"""Minimal dense linear algebra with explicit forward/backward passes.

Matrices are 2-D C-contiguous float64 numpy arrays throughout (row-major,
64-bit, as everything downstream assumes). Backward passes are hand-written
per operation; there is no autodiff graph. `finite_diff_grad` is the
independent oracle used to check every analytic gradient in the repo.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


def as_matrix(data) -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array; 1-D input becomes a row."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit conformance and finiteness checks."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite entries in {what}")
    return x


@dataclass
class Parameter:
    """A learnable matrix with an accumulated gradient of the same shape."""

    value: np.ndarray
    grad: np.ndarray = None  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self):
        self.value = as_matrix(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_matrix(self.grad)
            if self.grad.shape != self.value.shape:
                raise ShapeError(
                    f"grad shape {self.grad.shape} != value shape {self.value.shape}"
                )

    def zero_grad(self) -> None:
        self.grad[:] = 0.0


@dataclass
class Layer:
    weight: Parameter
    bias: Parameter
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; allowed: {ACTIVATIONS}"
            )


class Mlp:
    """Fully connected layers, activations restricted to tanh / identity.

    `forward` returns the output together with a tape of cached activations;
    `backward` consumes the tape, accumulates parameter gradients additively,
    and returns the gradient w.r.t. the input. Weights initialize uniform in
    [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases at zero.
    """

    def __init__(
        self,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        name: str = "mlp",
    ):
        if len(dims) < 2:
            raise ValueError("need at least an input and an output dim")
        if len(activations) != len(dims) - 1:
            raise ValueError(
                f"{len(dims) - 1} layers but {len(activations)} activations"
            )
        self.name = name
        self.layers: list[Layer] = []
        for i, act in enumerate(activations):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.layers.append(
                Layer(
                    weight=Parameter(w, name=f"{name}.layer{i}.weight"),
                    bias=Parameter(np.zeros((1, fan_out)), name=f"{name}.layer{i}.bias"),
                    activation=act,
                )
            )
        self.input_dim = dims[0]
        self.output_dim = dims[-1]

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = as_matrix(x)
        if x.shape[1] != self.input_dim:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} columns, expected {self.input_dim}"
            )
        tape = []
        y = x
        for layer in self.layers:
            x_in = y
            pre = x_in @ layer.weight.value + layer.bias.value
            y = np.tanh(pre) if layer.activation == "tanh" else pre
            tape.append((x_in, y))
        check_finite(y, f"{self.name} forward output")
        return y, tape

    def backward(self, tape: list, dy: np.ndarray) -> np.ndarray:
        if tape is None:
            raise RuntimeError(f"{self.name}: backward called without a forward tape")
        if len(tape) != len(self.layers):
            raise RuntimeError(
                f"{self.name}: tape has {len(tape)} entries for {len(self.layers)} layers"
            )
        dy = as_matrix(dy)
        if dy.shape[1] != self.output_dim:
            raise ShapeError(
                f"{self.name}: upstream grad has {dy.shape[1]} columns, "
                f"expected {self.output_dim}"
            )
        grad = dy
        for layer, (x_in, y) in zip(reversed(self.layers), reversed(tape)):
            dpre = grad * (1.0 - y * y) if layer.activation == "tanh" else grad
            layer.weight.grad += x_in.T @ dpre
            layer.bias.grad += dpre.sum(axis=0, keepdims=True)
            grad = dpre @ layer.weight.value.T
        return grad


@dataclass
class Adam:
    """Adam with decoupled weight decay over a fixed parameter list.

    Each step applies value <- value * (1 - lr*wd) first, then the
    bias-corrected Adam update from the accumulated grads, then zeroes the
    grads. The decay is decoupled (never folded into the moments), so
    gradient checks against the loss alone must run with weight_decay=0.
    """

    params: list[Parameter]
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            check_finite(p.value, f"parameter {p.name or 'unnamed'} after adam step")
            p.zero_grad()


def finite_diff_grad(
    f: Callable[[], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of `params`.

    `f` must be deterministic (reseed any rng it uses per call). Each
    coordinate is perturbed in place by +/- h and restored exactly.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while perturbing {p.name or 'parameter'}"
                )
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2
) -> float:
    """Elementwise |a-n| / max(|a|, |n|, floor), maximized.

    The floor keeps finite-difference noise on exactly-zero gradients from
    registering as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
