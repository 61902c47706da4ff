"""Small dense-layer toolkit: leaky-ReLU layers with hand-written backprop,
Adam, seeded initialization, finite-difference gradient checking and JSON
checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    grad_weights: np.ndarray = None
    grad_bias: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape}, {self.bias.shape}")
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def zero_grad(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)


@dataclass
class Cache:
    """What a forward call keeps for its backward call."""

    input: np.ndarray
    pre: np.ndarray
    activation: str


def dense_forward(layer: DenseLayer, x: np.ndarray, activation: str = "leaky_relu") -> tuple[np.ndarray, Cache]:
    """``act(W x + b)`` for a vector, or row-wise for a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != layer in_dim {layer.in_dim}")
    pre = x @ layer.weights.T + layer.bias
    if activation == "leaky_relu":
        out = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    elif activation == "identity":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return out, Cache(x, pre, activation)


def dense_backward(layer: DenseLayer, cache: Cache | None, upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. the input."""
    if cache is None:
        raise ValueError("backward called without a forward cache")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.pre.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {cache.pre.shape}")
    if cache.activation == "leaky_relu":
        delta = np.where(cache.pre > 0, upstream, LEAKY_SLOPE * upstream)
    else:
        delta = upstream
    if delta.ndim == 1:
        layer.grad_weights += np.outer(delta, cache.input)
        layer.grad_bias += delta
    else:
        layer.grad_weights += delta.T @ cache.input
        layer.grad_bias += delta.sum(axis=0)
    return delta @ layer.weights


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ParameterStore:
    layers: dict[str, DenseLayer]
    # per layer: (m_w, v_w, m_b, v_b)
    adam_state: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, layer in self.layers.items():
            if name not in self.adam_state:
                self.adam_state[name] = [
                    np.zeros_like(layer.weights),
                    np.zeros_like(layer.weights),
                    np.zeros_like(layer.bias),
                    np.zeros_like(layer.bias),
                ]

    def __getitem__(self, name: str) -> DenseLayer:
        return self.layers[name]

    def zero_grad(self) -> None:
        for layer in self.layers.values():
            layer.zero_grad()

    def scale_grad(self, factor: float) -> None:
        for layer in self.layers.values():
            layer.grad_weights *= factor
            layer.grad_bias *= factor

    def shapes(self) -> list[tuple[str, int, int]]:
        return [(name, l.in_dim, l.out_dim) for name, l in self.layers.items()]

    def num_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers.values())

    def copy(self) -> ParameterStore:
        layers = {
            k: DenseLayer(l.weights.copy(), l.bias.copy(), l.grad_weights.copy(), l.grad_bias.copy())
            for k, l in self.layers.items()
        }
        state = {k: [a.copy() for a in v] for k, v in self.adam_state.items()}
        return ParameterStore(layers, state, self.step)


def adam_step(store: ParameterStore, hyper: AdamHyper) -> ParameterStore:
    """One bias-corrected Adam update of every parameter, in place.

    Gradients are zeroed afterwards and the shared step counter advances.
    """
    for name, layer in store.layers.items():
        if not (np.all(np.isfinite(layer.grad_weights)) and np.all(np.isfinite(layer.grad_bias))):
            raise DivergenceError(f"non-finite gradient in layer {name}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, layer in store.layers.items():
        mw, vw, mb, vb = store.adam_state[name]
        for p, g, m, v in ((layer.weights, layer.grad_weights, mw, vw), (layer.bias, layer.grad_bias, mb, vb)):
            m *= hyper.beta1
            m += (1.0 - hyper.beta1) * g
            v *= hyper.beta2
            v += (1.0 - hyper.beta2) * (g * g)
            p -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.epsilon)
        layer.zero_grad()
    return store


def init_parameters(spec: Sequence[tuple[str, int, int]], seed: int) -> ParameterStore:
    """Weights ~ U(-1/sqrt(in), 1/sqrt(in)), zero biases; ``spec`` lists
    ``(name, in_dim, out_dim)`` in a fixed order."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, fan_in, fan_out in spec:
        bound = 1.0 / np.sqrt(fan_in)
        layers[name] = DenseLayer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))
    return ParameterStore(layers)


def _flat_views(store: ParameterStore):
    views = []
    for name, layer in store.layers.items():
        views.append((name, "weights", layer.weights, layer.grad_weights))
        views.append((name, "bias", layer.bias, layer.grad_bias))
    return views


def grad_probes(
    forward_backward: Callable[[ParameterStore], float],
    store: ParameterStore,
    probes: int = 20,
    seed: int = 0,
    eps: float = 1e-5,
    forward: Callable[[ParameterStore], float] | None = None,
) -> np.ndarray:
    """Analytic and central-difference gradients at randomly chosen parameters.

    ``forward_backward(store)`` returns the loss and accumulates gradients
    into ``store``; ``forward`` (defaults to ``forward_backward``) only needs
    to return the loss. Probed entries are drawn uniformly over all
    parameters. Returns a ``(probes, 2)`` array of ``(analytic, numeric)``.
    """
    forward = forward or forward_backward
    store.zero_grad()
    forward_backward(store)
    views = _flat_views(store)
    analytic = [g.copy() for _, _, _, g in views]
    store.zero_grad()
    sizes = np.array([p.size for _, _, p, _ in views])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.empty((len(picks), 2))
    for row, flat in enumerate(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), views[k][2].shape)
        param = views[k][2]
        orig = param[idx]
        param[idx] = orig + eps
        up = forward(store)
        param[idx] = orig - eps
        down = forward(store)
        param[idx] = orig
        out[row] = analytic[k][idx], (up - down) / (2 * eps)
    store.zero_grad()
    return out


def relative_errors(pairs: np.ndarray) -> np.ndarray:
    """``|a - n| / max(1e-8, |n|)`` per ``(analytic, numeric)`` row."""
    a, n = pairs[:, 0], pairs[:, 1]
    return np.abs(a - n) / np.maximum(1e-8, np.abs(n))


def grad_check(
    forward_backward: Callable[[ParameterStore], float],
    store: ParameterStore,
    probes: int = 20,
    seed: int = 0,
    eps: float = 1e-5,
    forward: Callable[[ParameterStore], float] | None = None,
) -> float:
    """Largest relative error over :func:`grad_probes`."""
    pairs = grad_probes(forward_backward, store, probes, seed, eps, forward)
    return float(relative_errors(pairs).max()) if len(pairs) else 0.0


def _arr(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def store_to_dict(store: ParameterStore) -> dict:
    layers = []
    for name, l in store.layers.items():
        mw, vw, mb, vb = store.adam_state[name]
        layers.append(
            {
                "name": name,
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
                "adam": {"m_w": mw.tolist(), "v_w": vw.tolist(), "m_b": mb.tolist(), "v_b": vb.tolist()},
            }
        )
    return {"step": store.step, "layers": layers}


def store_from_dict(doc: dict, expected: Sequence[tuple[str, int, int]] | None = None) -> ParameterStore:
    shapes = [(d["name"], d["in_dim"], d["out_dim"]) for d in doc["layers"]]
    if expected is not None and [tuple(s) for s in expected] != shapes:
        raise ValueError("checkpoint architecture does not match the model")
    layers, state = {}, {}
    for d in doc["layers"]:
        w, b = _arr(d["weights"]).reshape(d["out_dim"], d["in_dim"]), _arr(d["bias"])
        layers[d["name"]] = DenseLayer(w, b)
        a = d["adam"]
        state[d["name"]] = [_arr(a["m_w"]).reshape(w.shape), _arr(a["v_w"]).reshape(w.shape), _arr(a["m_b"]), _arr(a["v_b"])]
    return ParameterStore(layers, state, int(doc["step"]))


def save_checkpoint(path: Path, store: ParameterStore, norm_stats=None, extra: dict | None = None) -> None:
    """Write the whole training state as one JSON document."""
    doc = {
        "format": "vesselgen-checkpoint/1",
        "architecture": [list(s) for s in store.shapes()],
        "norm_stats": None if norm_stats is None else {"min": list(map(float, norm_stats.min)), "max": list(map(float, norm_stats.max))},
        "extra": extra or {},
        "params": store_to_dict(store),
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path: Path, expected: Sequence[tuple[str, int, int]] | None = None):
    """Return ``(store, norm_stats_dict_or_None, extra)``."""
    doc = json.loads(Path(path).read_text())
    arch = [tuple(s) for s in doc["architecture"]]
    if expected is not None and arch != [tuple(s) for s in expected]:
        raise ValueError("checkpoint architecture does not match the model")
    store = store_from_dict(doc["params"], arch)
    return store, doc.get("norm_stats"), doc.get("extra", {})
