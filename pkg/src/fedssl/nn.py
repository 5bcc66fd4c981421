"""Small dense networks with hand-rolled reverse-mode gradients.

The computation graph is the fixed MLP pipeline: a stack of linear layers
with optional per-batch feature standardization on hidden layers, ReLU or
identity activations, and optional L2 normalization of the output rows.
That is enough to realize both the encoder and the predictor of every
Siamese method at desk scale, and keeps gradients exactly checkable against
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import NamedParams, ShapeMismatchError

# Per-batch standardization epsilon (always-batch-stats mode, no running
# statistics).
STANDARDIZE_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one MLP: layer widths plus activation/normalization flags.

    ``layer_widths`` runs input dim first to embedding dim last.  The
    activation applies to every hidden layer; ``standardize_hidden``
    standardizes hidden pre-activations with per-batch statistics, the
    stand-in for one-dimensional batch normalization.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    normalize_output: bool = False
    standardize_hidden: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.layer_widths[-1] < 2:
            raise ValueError("final width must be at least 2")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_widths[:-1], self.layer_widths[1:]))


class Network:
    """An MLP owning a flat float64 parameter vector.

    ``forward`` retains the activations needed by ``backward``; the
    lower-level ``forward_tape``/``backward_tape`` pair allows several live
    forward passes per network, which the Siamese training step needs.
    """

    def __init__(self, spec: MlpSpec, group: str = "encoder",
                 theta: np.ndarray | None = None):
        self.spec = spec
        self.group = group
        n = spec.param_count()
        if theta is None:
            theta = np.zeros(n)
        else:
            theta = np.asarray(theta, dtype=np.float64).reshape(-1).copy()
            if theta.size != n:
                raise ShapeMismatchError(f"expected {n} parameters, got {theta.size}")
        self.theta = theta
        self._layouts = []  # (w_slice, b_slice, out, in) per layer
        off = 0
        for d_in, d_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            w = slice(off, off + d_out * d_in)
            off += d_out * d_in
            b = slice(off, off + d_out)
            off += d_out
            self._layouts.append((w, b, d_out, d_in))
        self._tape = None

    @classmethod
    def init(cls, spec: MlpSpec, group: str, rng: np.random.Generator) -> "Network":
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
        net = cls(spec, group)
        for w, b, d_out, d_in in net._layouts:
            bound = 1.0 / math.sqrt(d_in)
            net.theta[w] = rng.uniform(-bound, bound, d_out * d_in)
            net.theta[b] = rng.uniform(-bound, bound, d_out)
        return net

    def weights(self, layer: int) -> np.ndarray:
        w, _, d_out, d_in = self._layouts[layer]
        return self.theta[w].reshape(d_out, d_in)

    def biases(self, layer: int) -> np.ndarray:
        _, b, _, _ = self._layouts[layer]
        return self.theta[b]

    @property
    def params(self) -> NamedParams:
        return NamedParams({self.group: self.theta})

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != self.theta.size:
            raise ShapeMismatchError(
                f"expected {self.theta.size} parameters, got {theta.size}")
        self.theta[:] = theta

    def set_params(self, params: NamedParams) -> None:
        self.set_flat(params.group(self.group))

    def copy(self) -> "Network":
        return Network(self.spec, self.group, self.theta)

    # -- forward ------------------------------------------------------------

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Row-wise network output; retains activations for ``backward``."""
        out, tape = self.forward_tape(batch)
        self._tape = tape
        return out

    def forward_tape(self, batch: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeMismatchError(
                f"expected batch of shape [B x {self.spec.in_dim}], got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in input batch")
        spec = self.spec
        tape: list = []
        a = x
        last = spec.num_layers - 1
        for i in range(spec.num_layers):
            z = a @ self.weights(i).T + self.biases(i)
            entry = {"a_in": a}
            if i < last:
                if spec.standardize_hidden:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    inv = 1.0 / np.sqrt(var + STANDARDIZE_EPS)
                    z = (z - mean) * inv
                    entry["std_inv"] = inv
                    entry["std_xhat"] = z
                if spec.activation == "relu":
                    entry["act_in"] = z
                    z = np.maximum(z, 0.0)
            else:
                if spec.normalize_output:
                    norms = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
                    safe = np.where(norms > 0.0, norms, 1.0)
                    y = z / safe
                    y[norms[:, 0] == 0.0] = 0.0  # zero rows stay zero
                    entry["norm_inv"] = 1.0 / safe * (norms > 0.0)
                    entry["norm_y"] = y
                    z = y
            tape.append(entry)
            a = z
        return a, tape

    # -- backward -----------------------------------------------------------

    def backward(self, loss_grad_at_output: np.ndarray) -> NamedParams:
        """Parameter gradient for the most recent ``forward`` call."""
        if self._tape is None:
            raise RuntimeError("backward called without a preceding forward pass")
        grad, _ = self.backward_tape(self._tape, loss_grad_at_output)
        return NamedParams({self.group: grad})

    def backward_tape(self, tape: list, upstream: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Gradient w.r.t. the flat parameters and the input batch."""
        spec = self.spec
        g = np.asarray(upstream, dtype=np.float64)
        grad = np.zeros_like(self.theta)
        last = spec.num_layers - 1
        for i in range(last, -1, -1):
            entry = tape[i]
            if i == last:
                if spec.normalize_output:
                    y = entry["norm_y"]
                    inv = entry["norm_inv"]
                    g = (g - y * np.sum(g * y, axis=1, keepdims=True)) * inv
            else:
                if spec.activation == "relu":
                    g = g * (entry["act_in"] > 0.0)
                if spec.standardize_hidden:
                    xhat = entry["std_xhat"]
                    inv = entry["std_inv"]
                    n = xhat.shape[0]
                    g = (inv / n) * (
                        n * g - g.sum(axis=0) - xhat * np.sum(g * xhat, axis=0))
            a_in = entry["a_in"]
            w, b, d_out, d_in = self._layouts[i]
            grad[w] = (g.T @ a_in).reshape(-1)
            grad[b] = g.sum(axis=0)
            g = g @ self.weights(i)
        return grad, g


@dataclass
class OptimizerState:
    """Plain SGD with a cosine-annealed learning rate over a fixed horizon."""

    base_lr: float
    total_steps: int
    step: int = 0

    def __post_init__(self):
        # zero base_lr is allowed: fixed-point tests rely on training that
        # provably cannot move the parameters
        if self.base_lr < 0:
            raise ValueError("base_lr must be nonnegative")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not (0 <= self.step <= self.total_steps):
            raise ValueError("step must lie in [0, total_steps]")

    def current_lr(self) -> float:
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * self.step / self.total_steps))


def sgd_step(params: NamedParams, grad: NamedParams, opt: OptimizerState) -> NamedParams:
    """One descent step ``params - lr_t * grad``; advances the schedule."""
    if opt.step >= opt.total_steps:
        raise ValueError(f"optimizer exhausted: step {opt.step} >= {opt.total_steps}")
    if params.group_names != grad.group_names or params.group_lengths() != grad.group_lengths():
        raise ShapeMismatchError("gradient shape does not match parameters")
    lr = opt.current_lr()
    out = {name: vec - lr * grad.group(name) for name, vec in params.items()}
    opt.step += 1
    return NamedParams(out)
