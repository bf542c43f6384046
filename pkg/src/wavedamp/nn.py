"""Minimal feed-forward networks with hand-rolled backpropagation.

Everything the training stack needs from a neural net lives here: batched
forward passes, exact parameter gradients, forward-mode directional
derivatives (for Fisher-vector products), flat parameter vectors for
conjugate-gradient updates, and a finite-difference audit.
"""
from __future__ import annotations

import base64
import json

import numpy as np


def _relu(x):
    return np.maximum(x, 0.0)


# float64 tanh rounds to exactly +-1 deep in saturation; keep the bounded
# output strictly inside the open interval
_TANH_BOUND = 1.0 - 1e-9


def _bounded_tanh(x):
    return np.clip(np.tanh(x), -_TANH_BOUND, _TANH_BOUND)


def orthogonal_init(shape: tuple[int, int], rng: np.random.Generator, gain: float = 1.0):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """Fully-connected net: ReLU hidden layers, identity or tanh output.

    Weights are (out, in) matrices. The flat parameter layout is
    W0, b0, W1, b1, ... with row-major weight flattening.
    """

    def __init__(self, layer_sizes: list[int], output_activation: str = "identity"):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.output_activation = output_activation
        self.weights = [
            np.zeros((layer_sizes[i + 1], layer_sizes[i]))
            for i in range(len(layer_sizes) - 1)
        ]
        self.biases = [np.zeros(layer_sizes[i + 1]) for i in range(len(layer_sizes) - 1)]

    @classmethod
    def initialized(
        cls,
        layer_sizes: list[int],
        rng: np.random.Generator,
        output_activation: str = "identity",
        output_scale: float = 0.0,
    ) -> "Mlp":
        """Orthogonal hidden layers; the output layer is scaled by
        output_scale (zero keeps the net's output identically zero, the
        residual-learning starting point)."""
        net = cls(layer_sizes, output_activation)
        for i in range(len(net.weights)):
            last = i == len(net.weights) - 1
            gain = output_scale if last else np.sqrt(2.0)
            if gain == 0.0:
                continue
            net.weights[i] = orthogonal_init(net.weights[i].shape, rng, gain)
        return net

    # ---- sizes and flat parameter handling -------------------------------

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]
        )

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(
                f"flat vector has length {flat.size}, expected {self.n_params}"
            )
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = flat[k:k + b.size].copy()
            k += b.size

    # ---- evaluation ------------------------------------------------------

    def _check_input(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input has {x.shape[1]} features, expected {self.layer_sizes[0]}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x):
        """Forward pass returning (output, cache) where the cache holds the
        per-layer activations and pre-activations needed by backward/jvp."""
        h = self._check_input(x)
        acts = [h]
        pres = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            pres.append(pre)
            if i < last:
                h = _relu(pre)
            elif self.output_activation == "tanh":
                h = _bounded_tanh(pre)
            else:
                h = pre
            acts.append(h)
        return h, (acts, pres)

    def _out_deriv(self, pre, out):
        if self.output_activation == "tanh":
            return 1.0 - out * out
        return np.ones_like(pre)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Exact gradient of sum(grad_out * output) w.r.t. the flat params."""
        acts, pres = cache
        grad_out = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if grad_out.shape != acts[-1].shape:
            raise ValueError("grad_out shape does not match the forward output")
        last = len(self.weights) - 1
        delta = grad_out * self._out_deriv(pres[last], acts[-1])
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in range(last, -1, -1):
            grads_w[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (pres[i - 1] > 0)
        return np.concatenate(
            [np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)]
        )

    def jvp(self, cache, tangent_flat: np.ndarray) -> np.ndarray:
        """Directional derivative of the output w.r.t. the parameters along a
        flat tangent vector (forward-mode)."""
        acts, pres = cache
        tangent_flat = np.asarray(tangent_flat, dtype=float)
        if tangent_flat.shape != (self.n_params,):
            raise ValueError("tangent length mismatch")
        k = 0
        t = np.zeros_like(acts[0])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            dw = tangent_flat[k:k + w.size].reshape(w.shape)
            k += w.size
            db = tangent_flat[k:k + b.size]
            k += b.size
            pre_t = acts[i] @ dw.T + t @ w.T + db
            if i < last:
                t = pre_t * (pres[i] > 0)
            else:
                t = pre_t * self._out_deriv(pres[i], acts[-1])
        return t

    # ---- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "wavedamp.net/1",
            "layer_sizes": self.layer_sizes,
            "output_activation": self.output_activation,
            "params": base64.b64encode(
                self.get_flat().astype("<f8").tobytes()
            ).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != "wavedamp.net/1":
            raise ValueError(f"unsupported net format {d.get('format')!r}")
        net = cls(d["layer_sizes"], d["output_activation"])
        flat = np.frombuffer(base64.b64decode(d["params"]), dtype="<f8")
        net.set_flat(flat)
        return net

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        return cls.from_dict(json.loads(text))


def flatten(net: Mlp) -> np.ndarray:
    return net.get_flat()


def unflatten(template: Mlp, flat: np.ndarray) -> Mlp:
    net = Mlp(template.layer_sizes, template.output_activation)
    net.set_flat(flat)
    return net


def finite_diff_check(net: Mlp, x, step: float = 1e-5, rng=None) -> float:
    """Max relative error between backward() and a central finite-difference
    gradient of sum(g * output) for a random probe g."""
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, cache = net.forward_cached(x)
    g = rng.standard_normal(out.shape)
    analytic = net.backward(cache, g)
    theta = net.get_flat()
    fd = np.empty_like(theta)
    probe = Mlp(net.layer_sizes, net.output_activation)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        probe.set_flat(theta + e)
        f_plus = float(np.sum(g * probe.forward(x)))
        probe.set_flat(theta - e)
        f_minus = float(np.sum(g * probe.forward(x)))
        fd[k] = (f_plus - f_minus) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(fd - analytic) / denom))


class MomentumSgd:
    """Plain gradient descent with momentum on a flat parameter vector."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, net: Mlp, grad_flat: np.ndarray) -> None:
        if self.velocity is None:
            self.velocity = np.zeros_like(grad_flat)
        self.velocity = self.momentum * self.velocity + grad_flat
        net.set_flat(net.get_flat() - self.lr * self.velocity)
