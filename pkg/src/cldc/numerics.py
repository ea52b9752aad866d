"""Small dense-network toolkit: MLP forward/backward, masked softmax, RMSProp.

Everything runs in float64. Inputs may be a single vector or a batch of row
vectors; gradients from a batch are summed over rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataInconsistencyWarning, EmptySupportError, NumericFaultError, ShapeError

ACTIVATIONS = ("relu", "sigmoid", "linear")
PROB_FLOOR = 1e-12


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ParamBundle:
    layers: list[Layer]

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
    ) -> "ParamBundle":
        """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
        if len(activations) != len(sizes) - 1:
            raise ShapeError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        bundle = cls(layers)
        bundle.validate()
        return bundle

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "ParamBundle":
        return ParamBundle(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def validate(self) -> None:
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError(
                    f"layer shapes do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError("bias length must equal layer output width")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class GradBundle:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros_like(cls, params: ParamBundle) -> "GradBundle":
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.layers:
            out.extend((gw, gb))
        return out

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(
            [(a + c, b + d) for (a, b), (c, d) in zip(self.layers, other.layers)]
        )

    def scale(self, k: float) -> "GradBundle":
        return GradBundle([(gw * k, gb * k) for gw, gb in self.layers])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    outputs: list[np.ndarray]  # post-activation output of each layer
    batched: bool


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        # tanh form cannot overflow
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activation_grad(y: np.ndarray, act: str) -> np.ndarray:
    # expressed through the post-activation value y
    if act == "relu":
        return (y > 0).astype(np.float64)
    if act == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


def net_forward(params: ParamBundle, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != params.in_dim:
        raise ShapeError(f"input width {h.shape[1]} != network input {params.in_dim}")
    inputs, outputs = [], []
    for layer in params.layers:
        inputs.append(h)
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(h)
    out = h if batched else h[0]
    return out, ForwardCache(inputs, outputs, batched)


def _check_cache(params: ParamBundle, cache: ForwardCache) -> None:
    if len(cache.inputs) != len(params.layers):
        raise ShapeError("cache does not match network depth")
    for layer, inp, out in zip(params.layers, cache.inputs, cache.outputs):
        if inp.shape[1] != layer.weight.shape[1] or out.shape[1] != layer.weight.shape[0]:
            raise ShapeError("stale forward cache for these parameters")


def _deltas(params: ParamBundle, cache: ForwardCache, upstream: np.ndarray) -> list[np.ndarray]:
    """Per-row gradients w.r.t. each layer's pre-activation, plus the input gradient last."""
    _check_cache(params, cache)
    g = np.asarray(upstream, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output {cache.outputs[-1].shape}")
    deltas: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        dz = g * _activation_grad(cache.outputs[k], layer.activation)
        deltas[k] = dz
        g = dz @ layer.weight
    deltas.append(g)
    return deltas


def net_backward(
    params: ParamBundle, cache: ForwardCache, upstream: np.ndarray
) -> tuple[GradBundle, np.ndarray]:
    """Gradient of ``sum(upstream * output)`` w.r.t. parameters and input."""
    deltas = _deltas(params, cache, upstream)
    grads = [(dz.T @ inp, dz.sum(axis=0)) for dz, inp in zip(deltas[:-1], cache.inputs)]
    input_grad = deltas[-1] if cache.batched else deltas[-1][0]
    return GradBundle(grads), input_grad


def per_sample_sq_grads(
    params: ParamBundle, cache: ForwardCache, upstream: np.ndarray
) -> GradBundle:
    """Row-mean of squared per-row parameter gradients (empirical Fisher diagonal).

    For a dense layer the per-row weight gradient is an outer product, so its
    elementwise square factorises and the mean needs no per-row loop.
    """
    deltas = _deltas(params, cache, upstream)
    n = deltas[0].shape[0]
    return GradBundle(
        [((dz**2).T @ inp**2 / n, (dz**2).mean(axis=0)) for dz, inp in zip(deltas[:-1], cache.inputs)]
    )


def softmax_masked(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Softmax over active entries only; inactive entries are exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    active = np.broadcast_to(np.asarray(active, dtype=bool), logits.shape)
    if not active.any(axis=-1).all():
        raise EmptySupportError("action mask has no active entry")
    z = np.where(active, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    ex = np.where(active, np.exp(np.where(active, z, 0.0)), 0.0)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_softmax_masked(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Log-probabilities over active entries; inactive entries are -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    active = np.broadcast_to(np.asarray(active, dtype=bool), logits.shape)
    if not active.any(axis=-1).all():
        raise EmptySupportError("action mask has no active entry")
    z = np.where(active, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.where(active, np.exp(np.where(active, z, 0.0)), 0.0).sum(axis=-1, keepdims=True))
    return np.where(active, z - lse, -np.inf)


def cross_entropy(probs: np.ndarray, target: int) -> float:
    p = float(probs[target])
    if p <= 0.0:
        warnings.warn(
            f"target action {target} has zero probability (masked?)",
            DataInconsistencyWarning,
            stacklevel=2,
        )
    return float(-np.log(max(p, PROB_FLOOR)))


@dataclass
class OptState:
    """RMSProp accumulators (epsilon sits inside the square root)."""

    sq: list[np.ndarray]
    step: int = 0
    lr: float = 4e-4
    decay: float = 0.99
    eps: float = 1e-8
    clip: float | None = 40.0

    @classmethod
    def create(cls, params: ParamBundle, **hyper) -> "OptState":
        return cls([np.zeros_like(a) for a in params.arrays()], **hyper)


def clip_by_global_norm(grads: GradBundle, bound: float | None) -> GradBundle:
    if bound is None:
        return grads
    norm = grads.global_norm()
    if norm > bound:
        return grads.scale(bound / norm)
    return grads


def opt_step(params: ParamBundle, grads: GradBundle, state: OptState) -> tuple[ParamBundle, OptState]:
    """One RMSProp update in place; returns the same (mutated) objects."""
    garrs = grads.arrays()
    parrs = params.arrays()
    if len(garrs) != len(parrs) or len(state.sq) != len(parrs):
        raise ShapeError("gradient / optimizer state do not match parameters")
    for g, p in zip(garrs, parrs):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericFaultError("non-finite gradient; update rejected")
    garrs = clip_by_global_norm(grads, state.clip).arrays()
    for g, p, acc in zip(garrs, parrs, state.sq):
        acc *= state.decay
        acc += (1.0 - state.decay) * g * g
        p -= state.lr * g / np.sqrt(acc + state.eps)
    state.step += 1
    if not params.all_finite():
        raise NumericFaultError("parameters became non-finite")
    return params, state


def fd_check(
    loss_fn: Callable[[ParamBundle], tuple[float, GradBundle]],
    params: ParamBundle,
    h: float = 1e-5,
) -> float:
    """Max of |analytic - central difference| / max(1, |central difference|).

    ``loss_fn`` returns the loss and its analytic gradient; ``params`` is
    perturbed in place and restored.
    """
    _, analytic = loss_fn(params)
    worst = 0.0
    for p, g in zip(params.arrays(), analytic.arrays()):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn(params)[0]
            flat[k] = orig - h
            down = loss_fn(params)[0]
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            err = abs(gflat[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
