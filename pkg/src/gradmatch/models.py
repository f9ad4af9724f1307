"""Linear and MLP predictors with exact gradients and Hessian-vector products.

Parameter layout
----------------
A model is a chain of dense layers. The flat parameter vector stores, for
each layer from the input side, the weight matrix of shape
``(fan_in, fan_out)`` in row-major order followed by its bias. The
``linear`` kind is a single bias-free layer, so ``yhat = X @ theta`` with
``theta`` reshaped to ``(d, k)``.

Gradients are accumulated in reverse over the layer chain (a vector-Jacobian
product, the Jacobian of the outputs is never formed). Hessian-vector
products push a tangent through that same backward pass (Pearlmutter's
R-operator), which is what double backpropagation computes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthdata import Dataset, stream

LOSS_KINDS = ("half-mse-normalized", "mse-normalized", "squared-error-half", "cross-entropy")
ACTIVATIONS = ("tanh", "relu")


class ModelError(ValueError):
    pass


class SmoothnessError(ModelError):
    """Raised when second derivatives are requested for a ReLU network."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layer_widths: tuple
    activation: str = "tanh"
    dropout_rate: float = 0.0
    loss_kind: str = "half-mse-normalized"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kind not in ("linear", "mlp"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.kind == "linear" and len(self.layer_widths) != 2:
            raise ModelError("a linear model has exactly (input, output) widths")
        if self.kind == "mlp" and len(self.layer_widths) < 3:
            raise ModelError("an mlp needs at least one hidden layer")
        if min(self.layer_widths) < 1:
            raise ModelError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ModelError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def hidden_widths(self) -> tuple:
        return self.layer_widths[1:-1]

    @property
    def has_bias(self) -> bool:
        return self.kind == "mlp"

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + (w[i + 1] if self.has_bias else 0) for i in range(len(w) - 1))

    def replace(self, **changes) -> "ModelSpec":
        fields = dict(kind=self.kind, layer_widths=self.layer_widths, activation=self.activation,
                      dropout_rate=self.dropout_rate, loss_kind=self.loss_kind)
        fields.update(changes)
        return ModelSpec(**fields)

    def tag(self) -> str:
        widths = "x".join(map(str, self.layer_widths))
        return f"{self.kind}[{widths}]/{self.activation}/p{self.dropout_rate:g}/{self.loss_kind}"


@dataclass(frozen=True)
class DropoutMask:
    """Keep indicators for each hidden layer.

    Each entry has shape ``(width,)`` (one draw shared by every row) or
    ``(rows, width)`` (an independent draw per example).
    """
    keep: tuple
    keep_prob: float
    seed: int = 0


def sample_dropout_mask(spec: ModelSpec, seed: int, rows: int | None = None) -> DropoutMask:
    keep_prob = 1.0 - spec.dropout_rate
    rng = stream(seed, "dropout", spec.tag())
    keep = []
    for width in spec.hidden_widths:
        shape = (width,) if rows is None else (rows, width)
        keep.append((rng.random(shape) < keep_prob).astype(float))
    return DropoutMask(tuple(keep), keep_prob, seed)


def unpack(spec: ModelSpec, theta) -> list:
    """Split a flat vector into ``[(W, b), ...]`` views (``b`` is None for linear)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != spec.n_params:
        raise ModelError(f"parameter vector has length {theta.size}, model needs {spec.n_params}")
    layers, pos = [], 0
    w = spec.layer_widths
    for i in range(len(w) - 1):
        size = w[i] * w[i + 1]
        W = theta[pos:pos + size].reshape(w[i], w[i + 1])
        pos += size
        b = None
        if spec.has_bias:
            b = theta[pos:pos + w[i + 1]]
            pos += w[i + 1]
        layers.append((W, b))
    return layers


def pack(layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.ravel(W))
        if b is not None:
            parts.append(np.ravel(b))
    return np.concatenate(parts)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Zeros for linear models; Glorot-uniform weights and zero biases otherwise."""
    if spec.kind == "linear":
        return np.zeros(spec.n_params)
    rng = stream(seed, "init", spec.tag())
    layers = []
    w = spec.layer_widths
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        layers.append((rng.uniform(-limit, limit, size=(w[i], w[i + 1])), np.zeros(w[i + 1])))
    return pack(layers)


def _act(kind, z):
    if kind == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t
    return np.maximum(z, 0.0), (z > 0).astype(float)


def _check_input(spec, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.layer_widths[0]:
        raise ModelError(f"input has shape {X.shape}, model expects {spec.layer_widths[0]} columns")
    return X


def _forward(spec, layers, X, mask):
    """Forward pass keeping what the backward passes need."""
    acts, derivs, scales = [X], [], []
    a = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W
        if b is not None:
            z = z + b
        if i == last:
            return z, acts, derivs, scales
        a, d = _act(spec.activation, z)
        s = None
        if mask is not None:
            s = mask.keep[i] / mask.keep_prob
            a = a * s
        acts.append(a)
        derivs.append(d)
        scales.append(s)


def forward(spec: ModelSpec, theta, X, mask: DropoutMask | None = None) -> np.ndarray:
    """Model outputs (logits for classification). Inverted dropout when ``mask`` is given."""
    X = _check_input(spec, X)
    out, *_ = _forward(spec, unpack(spec, theta), X, mask)
    return out


def _loss_and_dout(kind, out, Y):
    n = Y.shape[0]
    if kind == "cross-entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        soft = np.exp(logp)
        loss = -(Y * logp).sum() / n
        dout = (soft * Y.sum(axis=1, keepdims=True) - Y) / n
        return loss, dout
    r = out - Y
    sq = float(np.sum(r * r))
    if kind == "half-mse-normalized":
        return 0.5 * sq / n, r / n
    if kind == "mse-normalized":
        return sq / n, 2.0 * r / n
    return 0.5 * sq, r


def _dout_hvp(kind, out, Y, r_out):
    """Second derivative of the loss in the outputs, applied to ``r_out``."""
    n = Y.shape[0]
    if kind == "cross-entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        proj = soft * (r_out - (soft * r_out).sum(axis=1, keepdims=True))
        return proj * Y.sum(axis=1, keepdims=True) / n
    if kind == "half-mse-normalized":
        return r_out / n
    if kind == "mse-normalized":
        return 2.0 * r_out / n
    return r_out


def _check_targets(spec, data):
    if data.y.shape[1] != spec.layer_widths[-1]:
        raise ModelError(f"targets have {data.y.shape[1]} columns, model outputs {spec.layer_widths[-1]}")


def loss_value(spec: ModelSpec, theta, data: Dataset, mask: DropoutMask | None = None) -> float:
    _check_targets(spec, data)
    out = forward(spec, theta, data.X, mask)
    return float(_loss_and_dout(spec.loss_kind, out, data.y)[0])


def loss_and_grad(spec: ModelSpec, theta, data: Dataset, mask: DropoutMask | None = None):
    """Loss and its parameter gradient in one forward/backward sweep."""
    _check_targets(spec, data)
    X = _check_input(spec, data.X)
    layers = unpack(spec, theta)
    out, acts, derivs, scales = _forward(spec, layers, X, mask)
    loss, delta = _loss_and_dout(spec.loss_kind, out, data.y)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        grads.append((acts[i].T @ delta, None if b is None else delta.sum(axis=0)))
        if i > 0:
            delta = delta @ W.T
            if scales[i - 1] is not None:
                delta = delta * scales[i - 1]
            delta = delta * derivs[i - 1]
    return float(loss), pack(grads[::-1])


def loss_grad(spec: ModelSpec, theta, data: Dataset, mask: DropoutMask | None = None) -> np.ndarray:
    return loss_and_grad(spec, theta, data, mask)[1]


def loss_hvp(spec: ModelSpec, theta, data: Dataset, v) -> np.ndarray:
    """Hessian of the (dropout-free) loss applied to ``v``."""
    if spec.kind == "mlp" and spec.activation == "relu":
        raise SmoothnessError("Hessian-vector products need a twice differentiable loss; relu is not")
    _check_targets(spec, data)
    X = _check_input(spec, data.X)
    layers = unpack(spec, theta)
    vlayers = unpack(spec, v)
    out, acts, derivs, _ = _forward(spec, layers, X, None)
    last = len(layers) - 1

    # forward tangents: r_acts[i] = R{acts[i]}, r_z[i] = R{pre-activation of layer i}
    r_acts, r_z = [np.zeros_like(X)], []
    for i, ((W, b), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        rz = r_acts[i] @ W + acts[i] @ VW
        if Vb is not None:
            rz = rz + Vb
        r_z.append(rz)
        if i < last:
            r_acts.append(derivs[i] * rz)

    _, delta = _loss_and_dout(spec.loss_kind, out, data.y)
    r_delta = _dout_hvp(spec.loss_kind, out, data.y, r_z[last])
    hv = []
    for i in range(last, -1, -1):
        W, b = layers[i]
        VW, _ = vlayers[i]
        hv.append((r_acts[i].T @ delta + acts[i].T @ r_delta,
                   None if b is None else r_delta.sum(axis=0)))
        if i > 0:
            back = delta @ W.T
            r_back = r_delta @ W.T + delta @ VW.T
            d = derivs[i - 1]
            t = acts[i]  # tanh output of hidden layer i-1 (no mask here)
            second = -2.0 * t * d  # tanh''
            r_delta = r_back * d + back * second * r_z[i - 1]
            delta = back * d
    return pack(hv[::-1])


CHECKPOINT_MAGIC = "gradmatch-checkpoint 1"


def save_checkpoint(path, spec: ModelSpec, theta, step: int | None = None) -> None:
    """Write a self-describing text checkpoint.

    Layout: the magic line, ``key: value`` header lines, a ``---``
    separator, then one parameter per line in shortest round-trip form.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != spec.n_params:
        raise ModelError("parameter vector does not match the model")
    header = [
        CHECKPOINT_MAGIC,
        f"kind: {spec.kind}",
        f"layer_widths: {','.join(map(str, spec.layer_widths))}",
        f"activation: {spec.activation}",
        f"dropout_rate: {spec.dropout_rate!r}",
        f"loss_kind: {spec.loss_kind}",
        f"n_params: {spec.n_params}",
    ]
    if step is not None:
        header.append(f"step: {int(step)}")
    body = "\n".join(repr(float(x)) for x in theta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(header) + "\n---\n" + body + "\n")
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(spec, theta, step)`` from :func:`save_checkpoint` output."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a gradmatch checkpoint")
    sep = lines.index("---")
    meta = dict(line.split(": ", 1) for line in lines[1:sep])
    spec = ModelSpec(
        kind=meta["kind"],
        layer_widths=tuple(int(w) for w in meta["layer_widths"].split(",")),
        activation=meta["activation"],
        dropout_rate=float(meta["dropout_rate"]),
        loss_kind=meta["loss_kind"],
    )
    theta = np.array([float(x) for x in lines[sep + 1:] if x.strip()])
    if theta.size != int(meta["n_params"]) or theta.size != spec.n_params:
        raise ModelError(f"{path}: payload has {theta.size} values, header says {meta['n_params']}")
    step = int(meta["step"]) if "step" in meta else None
    return spec, theta, step
