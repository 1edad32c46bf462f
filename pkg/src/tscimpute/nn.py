"""Small fully connected networks in numpy with hand-written backprop and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, InterfaceError, NetworkError

CHECKPOINT_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    adaptive: bool = True  # False falls back to plain gradient descent

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # Adam moments, lazily allocated by the first train step
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)
    _t: int = 0

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def load_from(self, other: "Mlp") -> None:
        """Copy parameter values from ``other`` (e.g. target network sync)."""
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size


def mlp_init(layer_sizes, rng_seed: int = 0) -> Mlp:
    """He-uniform weights (fan-in scaled), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise NetworkError("an Mlp needs at least an input and an output layer")
    if any(s <= 0 for s in sizes):
        raise NetworkError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases)


def _as_batch(mlp: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mlp.layer_sizes[0]:
        raise InterfaceError(f"expected input width {mlp.layer_sizes[0]}, got shape {x.shape}")
    return x, single


def mlp_forward(mlp: Mlp, x) -> np.ndarray:
    """Forward pass; accepts a single vector or a batch (rows)."""
    h, single = _as_batch(mlp, x)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i < last:
            h = relu(h)
    return h[0] if single else h


def _forward_cache(mlp: Mlp, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        pre.append(z)
        h = relu(z) if i < last else z
        acts.append(h)
    return acts, pre


def _backward(mlp: Mlp, acts, pre, dout):
    grads_w = [None] * len(mlp.weights)
    grads_b = [None] * len(mlp.weights)
    delta = dout
    for i in range(len(mlp.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ mlp.weights[i].T) * (pre[i - 1] > 0)
    return grads_w, grads_b


def loss_and_grads(mlp: Mlp, inputs, targets, actions=None):
    """MSE loss and exact gradients.

    Without ``actions`` the loss is over every output. With ``actions`` only
    the output column picked per row enters the loss (Q-target regression);
    ``targets`` is then one value per row.
    """
    x, _ = _as_batch(mlp, inputs)
    acts, pre = _forward_cache(mlp, x)
    out = acts[-1]
    n = x.shape[0]
    targets = np.asarray(targets, dtype=float)
    if actions is None:
        y = targets.reshape(out.shape)
        resid = out - y
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        dout = 2.0 * resid / n
    else:
        idx = np.asarray(actions, dtype=int)
        picked = out[np.arange(n), idx]
        resid = picked - targets.reshape(n)
        loss = float(np.mean(resid**2))
        dout = np.zeros_like(out)
        dout[np.arange(n), idx] = 2.0 * resid / n
    with np.errstate(invalid="ignore", over="ignore"):
        # non-finite values are reported by the caller as divergence
        gw, gb = _backward(mlp, acts, pre, dout)
    return loss, gw, gb


def mlp_train_step(mlp: Mlp, inputs, targets, opt: OptimizerConfig, actions=None) -> float:
    """One optimiser update; returns the loss before the update."""
    if len(np.asarray(inputs)) == 0:
        raise InterfaceError("empty batch")
    loss, gw, gb = loss_and_grads(mlp, inputs, targets, actions)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"non-finite loss or gradient (loss={loss})")
    if opt.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > opt.clip_norm:
            grads = [g * (opt.clip_norm / norm) for g in grads]
    params = mlp.params
    if opt.learning_rate == 0:
        return loss
    if not opt.adaptive:
        for p, g in zip(params, grads):
            p -= opt.learning_rate * g
        return loss
    if not mlp._m:
        mlp._m = [np.zeros_like(p) for p in params]
        mlp._v = [np.zeros_like(p) for p in params]
    mlp._t += 1
    b1, b2 = opt.beta1, opt.beta2
    lr_t = opt.learning_rate * np.sqrt(1 - b2**mlp._t) / (1 - b1**mlp._t)
    for p, g, m, v in zip(params, grads, mlp._m, mlp._v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr_t * m / (np.sqrt(v) + opt.eps)
    return loss


def save_mlp(mlp: Mlp, path: str | Path, meta: dict | None = None) -> None:
    """Write parameters plus a JSON header (layer sizes and caller metadata)."""
    header = {"version": CHECKPOINT_VERSION, "layer_sizes": mlp.layer_sizes, "meta": meta or {}}
    arrays = {f"w{i}": w for i, w in enumerate(mlp.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(mlp.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_mlp(path: str | Path) -> tuple[Mlp, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise InterfaceError(f"unsupported checkpoint version {header.get('version')!r}")
        n = len(header["layer_sizes"]) - 1
        weights = [data[f"w{i}"].copy() for i in range(n)]
        biases = [data[f"b{i}"].copy() for i in range(n)]
    return Mlp(list(header["layer_sizes"]), weights, biases), header["meta"]
