"""Self-supervised action representations.

An encoder maps an observation pair (s, s') to a vector e; a single linear
decoder maps e to logits over every catalog action seen so far. Both are
trained to predict the action that produced the transition. When the action
space grows, the decoder gains output rows; when it shrinks, the removed
actions are masked out. Later tasks fine-tune with a diagonal-Fisher quadratic
penalty that anchors the decoder to its state after each earlier task.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .envs import ActionSpace, TaskSpec, consistent_actions, env_reset, env_step
from .errors import DataError, EmptySupportError, ShapeError
from .numerics import (
    GradBundle,
    Layer,
    OptState,
    ParamBundle,
    log_softmax_masked,
    net_backward,
    net_forward,
    opt_step,
    per_sample_sq_grads,
    softmax_masked,
)
from .storage import atomic_write

ExplorationPolicy = Callable[[np.ndarray, np.ndarray, np.random.Generator], int]


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    s_next: np.ndarray


@dataclass
class TransitionBuffer:
    """Column-stored transitions plus the action mask they were collected under."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    active: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def __getitem__(self, k: int) -> Transition:
        return Transition(self.s[k], int(self.a[k]), self.s_next[k])

    def __iter__(self) -> Iterator[Transition]:
        return (self[k] for k in range(len(self)))

    @classmethod
    def from_transitions(cls, items: Sequence[Transition], active: np.ndarray) -> "TransitionBuffer":
        return cls(
            np.stack([t.s for t in items]),
            np.array([t.a for t in items], dtype=np.int64),
            np.stack([t.s_next for t in items]),
            np.asarray(active, dtype=bool),
        )

    def pairs(self) -> np.ndarray:
        return np.concatenate([self.s, self.s_next], axis=1)

    def take(self, idx: np.ndarray) -> "TransitionBuffer":
        return TransitionBuffer(self.s[idx], self.a[idx], self.s_next[idx], self.active)


def uniform_policy(obs: np.ndarray, active: np.ndarray, rng: np.random.Generator) -> int:
    choices = np.flatnonzero(active)
    return int(choices[rng.integers(len(choices))])


def collect_transitions(
    task: TaskSpec,
    count: int,
    seed: int,
    policy: ExplorationPolicy | None = None,
) -> TransitionBuffer:
    """Reward-free exploration: ``count`` transitions from restarting episodes."""
    if count < 1:
        raise ValueError("need at least one transition")
    policy = policy or uniform_policy
    rng = np.random.default_rng([seed, 1])
    active = task.space.array
    dim = task.obs_dim
    S = np.empty((count, dim))
    S2 = np.empty((count, dim))
    A = np.empty(count, dtype=np.int64)
    episode = 0
    state, obs = env_reset(task, int(np.random.SeedSequence([seed, 0, episode]).generate_state(1)[0]))
    for m in range(count):
        a = policy(obs, active, rng)
        nxt, nobs, _, done = env_step(state, a, task)
        S[m], A[m], S2[m] = obs, a, nobs
        if done:
            episode += 1
            state, obs = env_reset(
                task, int(np.random.SeedSequence([seed, 0, episode]).generate_state(1)[0])
            )
        else:
            state, obs = nxt, nobs
    return TransitionBuffer(S, A, S2, active)


@dataclass
class ReprConfig:
    dim: int = 256
    hidden: tuple[int, ...] = (128,)
    sigmoid_head: bool = True
    epochs: int = 20
    batch_size: int = 256
    lr: float = 3e-3
    lr_schedule: str = "linear"  # "linear" decays to zero over the run, "constant" keeps lr
    decay: float = 0.99
    eps: float = 1e-8
    grad_clip: float | None = 40.0
    lam: float = 2e4
    reg_decoder: bool = True
    reg_encoder: bool = False

    def __post_init__(self):
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}; expected 'linear' or 'constant'")


@dataclass
class Decoder:
    """Linear map e -> logits with one row per seen catalog action."""

    params: ParamBundle
    row_actions: list[int]
    n_catalog: int

    @property
    def seen(self) -> np.ndarray:
        mask = np.zeros(self.n_catalog, dtype=bool)
        mask[self.row_actions] = True
        return mask

    @property
    def layer(self) -> Layer:
        return self.params.layers[0]

    def copy(self) -> "Decoder":
        return Decoder(self.params.copy(), list(self.row_actions), self.n_catalog)


@dataclass
class Anchor:
    """Parameters and Fisher diagonals frozen at the end of one task."""

    decoder: ParamBundle
    decoder_fisher: GradBundle
    encoder: ParamBundle
    encoder_fisher: GradBundle

    @property
    def rows(self) -> int:
        return self.decoder.out_dim


@dataclass
class EncoderDecoderState:
    encoder: ParamBundle
    decoder: Decoder
    anchors: list[Anchor] = field(default_factory=list)

    @classmethod
    def create(
        cls, obs_dim: int, n_catalog: int, config: ReprConfig, rng: np.random.Generator
    ) -> "EncoderDecoderState":
        sizes = [2 * obs_dim, *config.hidden, config.dim]
        acts = ["relu"] * len(config.hidden) + ["sigmoid" if config.sigmoid_head else "linear"]
        encoder = ParamBundle.init(sizes, acts, rng)
        empty = ParamBundle([Layer(np.zeros((0, config.dim)), np.zeros(0), "linear")])
        return cls(encoder, Decoder(empty, [], n_catalog))

    @property
    def dim(self) -> int:
        return self.encoder.out_dim

    def copy(self) -> "EncoderDecoderState":
        # anchors are never mutated after creation, so sharing them is safe
        return EncoderDecoderState(self.encoder.copy(), self.decoder.copy(), list(self.anchors))


def encode(encoder: ParamBundle, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    if s.shape != s_next.shape or s.shape[-1] * 2 != encoder.in_dim:
        raise ShapeError("observation pair does not match encoder input")
    return net_forward(encoder, np.concatenate([s, s_next], axis=-1))[0]


def decoder_logits(decoder: Decoder, e: np.ndarray) -> np.ndarray:
    """Logits scattered onto the catalog; unseen actions read 0 (always masked).

    One matrix-vector product per row, so a row's logits are bit-identical no
    matter how many rows are appended later (a single matmul may block
    differently when the row count changes).
    """
    layer = decoder.layer
    rows = np.stack([e @ w + b for w, b in zip(layer.weight, layer.bias)], axis=-1)
    out = np.zeros(rows.shape[:-1] + (decoder.n_catalog,))
    out[..., decoder.row_actions] = rows
    return out


def _check_active(decoder: Decoder, active: np.ndarray) -> np.ndarray:
    active = np.asarray(active, dtype=bool)
    if not active.any(axis=-1).all():
        raise EmptySupportError("empty active action mask")
    if (active & ~decoder.seen).any():
        raise DataError("active mask contains actions the decoder has never seen")
    return active


def decode(decoder: Decoder, e: np.ndarray, active: np.ndarray) -> np.ndarray:
    active = _check_active(decoder, active)
    return softmax_masked(decoder_logits(decoder, e), active)


def adapt_structure(
    state: EncoderDecoderState, new_space: ActionSpace, rng: np.random.Generator
) -> EncoderDecoderState:
    """Append decoder rows for newly seen actions; existing rows are untouched."""
    if len(new_space.mask) != state.decoder.n_catalog:
        raise ShapeError("action space is over a different catalog")
    new = [a for a in new_space.indices if a not in state.decoder.row_actions]
    if not new:
        return state
    layer = state.decoder.layer
    rows_total = layer.weight.shape[0] + len(new)
    bound = np.sqrt(6.0 / (state.dim + rows_total))
    w_new = rng.uniform(-bound, bound, size=(len(new), state.dim))
    state.decoder.params = ParamBundle(
        [Layer(np.vstack([layer.weight, w_new]), np.concatenate([layer.bias, np.zeros(len(new))]), "linear")]
    )
    state.decoder.row_actions = state.decoder.row_actions + new
    return state


def _row_labels(decoder: Decoder, actions: np.ndarray) -> np.ndarray:
    lookup = {a: r for r, a in enumerate(decoder.row_actions)}
    try:
        return np.array([lookup[int(a)] for a in actions], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"buffer action {exc.args[0]} has no decoder row") from None


def _row_mask(decoder: Decoder, active: np.ndarray) -> np.ndarray:
    return np.asarray(active, dtype=bool)[decoder.row_actions]


def _check_buffer(buffer: TransitionBuffer, decoder: Decoder) -> None:
    if len(buffer) == 0:
        raise DataError("empty transition buffer")
    if not buffer.active[buffer.a].all():
        raise DataError("buffer holds actions outside its own action space")
    _check_active(decoder, buffer.active)


def penalty(state: EncoderDecoderState, lam: float, decoder: bool = True, encoder: bool = False) -> float:
    """(lam/2) * sum over anchors of Fisher-weighted squared distance."""
    total = 0.0
    for anchor in state.anchors:
        if decoder:
            r = anchor.rows
            cur = state.decoder.layer
            (fw, fb), = anchor.decoder_fisher.layers
            ref = anchor.decoder.layers[0]
            total += float(np.sum(fw * (cur.weight[:r] - ref.weight) ** 2))
            total += float(np.sum(fb * (cur.bias[:r] - ref.bias) ** 2))
        if encoder:
            for cur, ref, (fw, fb) in zip(state.encoder.layers, anchor.encoder.layers, anchor.encoder_fisher.layers):
                total += float(np.sum(fw * (cur.weight - ref.weight) ** 2))
                total += float(np.sum(fb * (cur.bias - ref.bias) ** 2))
    return 0.5 * lam * total


def _penalty_grads(
    state: EncoderDecoderState, lam: float, decoder: bool, encoder: bool
) -> tuple[GradBundle, GradBundle]:
    gdec = GradBundle.zeros_like(state.decoder.params)
    genc = GradBundle.zeros_like(state.encoder)
    for anchor in state.anchors:
        if decoder:
            r = anchor.rows
            cur = state.decoder.layer
            if r > cur.weight.shape[0] or anchor.decoder.layers[0].weight.shape[1] != cur.weight.shape[1]:
                raise ShapeError("anchor is larger than the current decoder")
            (fw, fb), = anchor.decoder_fisher.layers
            ref = anchor.decoder.layers[0]
            gw, gb = gdec.layers[0]
            gw[:r] += lam * fw * (cur.weight[:r] - ref.weight)
            gb[:r] += lam * fb * (cur.bias[:r] - ref.bias)
        if encoder:
            for (gw, gb), cur, ref, (fw, fb) in zip(
                genc.layers, state.encoder.layers, anchor.encoder.layers, anchor.encoder_fisher.layers
            ):
                if cur.weight.shape != ref.weight.shape:
                    raise ShapeError("encoder anchor shape mismatch")
                gw += lam * fw * (cur.weight - ref.weight)
                gb += lam * fb * (cur.bias - ref.bias)
    return genc, gdec


def loss_and_grads(
    state: EncoderDecoderState,
    buffer: TransitionBuffer,
    lam: float = 0.0,
    reg_decoder: bool = True,
    reg_encoder: bool = False,
) -> tuple[float, GradBundle, GradBundle]:
    """Mean action-prediction cross-entropy plus the anchor penalty.

    Returns (loss, encoder grads, decoder grads).
    """
    e, enc_cache = net_forward(state.encoder, buffer.pairs())
    rows, dec_cache = net_forward(state.decoder.params, e)
    labels = _row_labels(state.decoder, buffer.a)
    logp = log_softmax_masked(rows, _row_mask(state.decoder, buffer.active))
    n = len(buffer)
    loss = -float(logp[np.arange(n), labels].mean())
    d_rows = np.exp(logp)
    d_rows[np.arange(n), labels] -= 1.0
    d_rows /= n
    gdec, d_e = net_backward(state.decoder.params, dec_cache, d_rows)
    genc, _ = net_backward(state.encoder, enc_cache, d_e)
    if lam and state.anchors:
        loss += penalty(state, lam, reg_decoder, reg_encoder)
        penc, pdec = _penalty_grads(state, lam, reg_decoder, reg_encoder)
        genc, gdec = genc + penc, gdec + pdec
    return loss, genc, gdec


def mean_ce(state: EncoderDecoderState, buffer: TransitionBuffer) -> float:
    e = net_forward(state.encoder, buffer.pairs())[0]
    rows = net_forward(state.decoder.params, e)[0]
    logp = log_softmax_masked(rows, _row_mask(state.decoder, buffer.active))
    return -float(logp[np.arange(len(buffer)), _row_labels(state.decoder, buffer.a)].mean())


def _fit(
    buffer: TransitionBuffer,
    state: EncoderDecoderState,
    config: ReprConfig,
    rng: np.random.Generator,
    lam: float,
) -> tuple[EncoderDecoderState, list[float]]:
    _check_buffer(buffer, state.decoder)
    hyper = dict(lr=config.lr, decay=config.decay, eps=config.eps, clip=config.grad_clip)
    enc_opt = OptState.create(state.encoder, **hyper)
    dec_opt = OptState.create(state.decoder.params, **hyper)
    trace = [mean_ce(state, buffer)]
    n = len(buffer)
    anchored = bool(lam) and bool(state.anchors)
    total = config.epochs * -(-n // config.batch_size)
    k = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if config.lr_schedule == "linear":
                enc_opt.lr = dec_opt.lr = config.lr * (1.0 - k / total)
            k += 1
            batch = buffer.take(order[start : start + config.batch_size])
            _, genc, gdec = loss_and_grads(state, batch)
            opt_step(state.encoder, genc, enc_opt)
            opt_step(state.decoder.params, gdec, dec_opt)
            if anchored:
                _prox_penalty(state, lam, enc_opt, dec_opt, config.reg_decoder, config.reg_encoder)
        trace.append(mean_ce(state, buffer))
    return state, trace


def _prox_penalty(
    state: EncoderDecoderState,
    lam: float,
    enc_opt: OptState,
    dec_opt: OptState,
    reg_decoder: bool,
    reg_encoder: bool,
) -> None:
    """Exact minimiser of the anchor penalty plus a proximity term, per coordinate.

    With the optimiser's effective step eta = lr / sqrt(acc + eps):
        p <- (p + eta * lam * sum_j F_j p_j) / (1 + eta * lam * sum_j F_j)
    An explicit gradient step on a stiff quadratic would overshoot; this
    stays stable for any lam and pins coordinates with large lam * F.
    """
    if reg_decoder:
        layer = state.decoder.layer
        targets = [(a.rows, a.decoder_fisher.layers[0], a.decoder.layers[0]) for a in state.anchors]
        (acc_w, acc_b) = dec_opt.sq
        for p, acc, pick in ((layer.weight, acc_w, 0), (layer.bias, acc_b, 1)):
            eta = dec_opt.lr / np.sqrt(acc + dec_opt.eps)
            num = p.copy()
            den = np.ones_like(p)
            for r, fisher, ref in targets:
                f = fisher[pick]
                ref_arr = ref.weight if pick == 0 else ref.bias
                num[:r] += eta[:r] * lam * f * ref_arr
                den[:r] += eta[:r] * lam * f
            p[:] = num / den
    if reg_encoder:
        parrs = state.encoder.arrays()
        for k, (p, acc) in enumerate(zip(parrs, enc_opt.sq)):
            eta = enc_opt.lr / np.sqrt(acc + enc_opt.eps)
            num = p.copy()
            den = np.ones_like(p)
            for anchor in state.anchors:
                f = anchor.encoder_fisher.arrays()[k]
                num += eta * lam * f * anchor.encoder.arrays()[k]
                den += eta * lam * f
            p[:] = num / den


def ssl_train(
    buffer: TransitionBuffer,
    state: EncoderDecoderState,
    config: ReprConfig,
    rng: np.random.Generator,
) -> tuple[EncoderDecoderState, list[float]]:
    """Minibatch action-prediction training.

    The trace holds the full-buffer mean cross-entropy before training and
    after every epoch.
    """
    return _fit(buffer, state, config, rng, lam=0.0)


def finetune(
    buffer: TransitionBuffer,
    state: EncoderDecoderState,
    lam: float,
    config: ReprConfig,
    rng: np.random.Generator,
) -> tuple[EncoderDecoderState, list[float]]:
    if lam < 0:
        raise ValueError("regularisation strength must be >= 0")
    for anchor in state.anchors:
        if anchor.rows > state.decoder.layer.weight.shape[0]:
            raise ShapeError("anchor is larger than the current decoder")
    return _fit(buffer, state, config, rng, lam=lam)


def _logp_upstream(state: EncoderDecoderState, buffer: TransitionBuffer):
    e, enc_cache = net_forward(state.encoder, buffer.pairs())
    rows, dec_cache = net_forward(state.decoder.params, e)
    labels = _row_labels(state.decoder, buffer.a)
    probs = softmax_masked(rows, _row_mask(state.decoder, buffer.active))
    # d log p(label) / d logits
    up = -probs
    up[np.arange(len(buffer)), labels] += 1.0
    return enc_cache, dec_cache, up


def compute_fisher(buffer: TransitionBuffer, state: EncoderDecoderState) -> GradBundle:
    """Empirical Fisher diagonal of the decoder, using the recorded actions."""
    _check_buffer(buffer, state.decoder)
    _, dec_cache, up = _logp_upstream(state, buffer)
    return per_sample_sq_grads(state.decoder.params, dec_cache, up)


def compute_encoder_fisher(buffer: TransitionBuffer, state: EncoderDecoderState) -> GradBundle:
    _check_buffer(buffer, state.decoder)
    enc_cache, dec_cache, up = _logp_upstream(state, buffer)
    d_e = up @ state.decoder.layer.weight
    return per_sample_sq_grads(state.encoder, enc_cache, d_e)


def make_anchor(buffer: TransitionBuffer, state: EncoderDecoderState) -> Anchor:
    return Anchor(
        state.decoder.params.copy(),
        compute_fisher(buffer, state),
        state.encoder.copy(),
        compute_encoder_fisher(buffer, state),
    )


def predict(state: EncoderDecoderState, buffer: TransitionBuffer) -> np.ndarray:
    """Most probable catalog action for every transition (lowest index on ties)."""
    e = encode(state.encoder, buffer.s, buffer.s_next)
    return np.argmax(decode(state.decoder, e, buffer.active), axis=-1)


def unambiguous_mask(buffer: TransitionBuffer, task: TaskSpec) -> np.ndarray:
    """True where exactly one active action explains the observed (s, s')."""
    return np.array(
        [len(consistent_actions(s, s2, task)) == 1 for s, s2 in zip(buffer.s, buffer.s_next)],
        dtype=bool,
    )


def decode_accuracy(state: EncoderDecoderState, buffer: TransitionBuffer, task: TaskSpec) -> dict[str, float]:
    if len(buffer) == 0:
        raise DataError("cannot score an empty buffer")
    hit = predict(state, buffer) == buffer.a
    unique = unambiguous_mask(buffer, task)
    return {
        "overall": float(hit.mean()),
        "unambiguous_only": float(hit[unique].mean()) if unique.any() else float("nan"),
        "n": int(len(buffer)),
        "n_unambiguous": int(unique.sum()),
    }


def dump_embeddings(state: EncoderDecoderState, probes: TransitionBuffer, path: str | Path) -> Path:
    """CSV of (action, e_0..e_{d-1}) per probe transition, full float precision."""
    e = encode(state.encoder, probes.s, probes.s_next)
    if e.ndim == 1:
        e = e[None, :]

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["action", *(f"e_{k}" for k in range(e.shape[1]))])
        for a, row in zip(probes.a, e):
            w.writerow([int(a), *(repr(float(v)) for v in row)])

    return atomic_write(path, write)


def state_to_arrays(state: EncoderDecoderState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "row_actions": np.array(state.decoder.row_actions, dtype=np.int64),
        "n_catalog": np.array(state.decoder.n_catalog),
        "dec_w": state.decoder.layer.weight,
        "dec_b": state.decoder.layer.bias,
    }
    for k, layer in enumerate(state.encoder.layers):
        out[f"enc_{k}_w"] = layer.weight
        out[f"enc_{k}_b"] = layer.bias
        out[f"enc_{k}_act"] = np.array(layer.activation)
    return out


def state_from_arrays(arrays) -> EncoderDecoderState:
    layers = []
    k = 0
    while f"enc_{k}_w" in arrays:
        layers.append(Layer(np.array(arrays[f"enc_{k}_w"]), np.array(arrays[f"enc_{k}_b"]), str(arrays[f"enc_{k}_act"])))
        k += 1
    decoder = Decoder(
        ParamBundle([Layer(np.array(arrays["dec_w"]), np.array(arrays["dec_b"]), "linear")]),
        [int(a) for a in arrays["row_actions"]],
        int(arrays["n_catalog"]),
    )
    return EncoderDecoderState(ParamBundle(layers), decoder)
