"""Small dense networks with hand-written backprop, plus Adam.

All nets in the pipeline are plain MLPs evaluated on float64 numpy arrays.
Forward passes record a tape (layer inputs and pre-activations) so the
matching backward pass can run without recomputation. Weight layout is
``W[out, in]``; a layer computes ``act(x @ W.T + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["DenseNet", "NetTape", "AdamState"]

_ACTIVATIONS = ("relu", "none")


@dataclass
class NetTape:
    """Intermediates of one forward pass, consumed by DenseNet.backward."""

    inputs: list          # input to each layer, shape (N, fan_in)
    preacts: list         # pre-activation of each layer, shape (N, fan_out)
    batch_shape: tuple    # leading shape of the original input


@dataclass
class DenseNet:
    """MLP with per-layer weights (out, in), biases (out,), and activations."""

    weights: list
    biases: list
    activations: list

    @classmethod
    def create(cls, sizes, rng, hidden_activation="relu",
               final_activation="none", zero_last=False) -> "DenseNet":
        """Build a net with layer widths `sizes` = [in, h1, ..., out].

        Weights and biases start uniform in +-1/sqrt(fan_in); `zero_last`
        zeroes the final layer so the net initially outputs zeros.
        """
        if len(sizes) < 2:
            raise ValueError("need at least input and output widths")
        weights, biases, acts = [], [], []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
            acts.append(final_activation if i == n_layers - 1 else hidden_activation)
        if zero_last:
            weights[-1][:] = 0.0
            biases[-1][:] = 0.0
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        return cls(weights, biases, acts)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray):
        """Evaluate on (..., input_width); returns (y, tape)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_width:
            raise ValueError(
                f"input width {x.shape[-1]} does not match net input {self.input_width}"
            )
        batch_shape = x.shape[:-1]
        h = x.reshape(-1, self.input_width)
        inputs, preacts = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w.T + b
            preacts.append(z)
            h = np.maximum(z, 0.0) if act == "relu" else z
        return h.reshape(batch_shape + (self.output_width,)), NetTape(inputs, preacts, batch_shape)

    def backward(self, tape: NetTape, d_out: np.ndarray):
        """Backprop d_out (..., output_width) through the taped forward.

        Returns (param_grads, d_input) where param_grads is a list of
        (dW, db) per layer and d_input matches the forward input shape.
        """
        g = np.asarray(d_out, dtype=np.float64).reshape(-1, self.output_width)
        param_grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            if self.activations[i] == "relu":
                g = g * (tape.preacts[i] > 0.0)
            dw = g.T @ tape.inputs[i]
            db = g.sum(axis=0)
            param_grads[i] = (dw, db)
            g = g @ self.weights[i]
        return param_grads, g.reshape(tape.batch_shape + (self.input_width,))

    def named_params(self):
        """Yield (name, array) pairs; arrays are the live parameters."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"W{i}", w
            yield f"b{i}", b

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        list(self.activations))


@dataclass
class AdamState:
    """Adam moments keyed by parameter name, with per-call learning rate.

    Each parameter keeps its own step counter so groups updated at
    different cadences (e.g. per-frame trajectories) stay correctly
    bias-corrected.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """Apply one Adam update to `param` in place."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ValueError(f"gradient shape {grad.shape} != param shape {param.shape}")
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, name: str, index: np.ndarray, n_new: int) -> None:
        """Rebuild moments after rows of a parameter were kept/added.

        `index` lists, for each row of the new parameter, the old row it
        came from, or -1 for fresh rows (moments reset to zero).
        """
        if name not in self.m:
            return
        index = np.asarray(index)
        for store in (self.m, self.v):
            old = store[name]
            new = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
            keep = index >= 0
            new[keep] = old[index[keep]]
            store[name] = new
