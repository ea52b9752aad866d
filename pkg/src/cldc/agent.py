"""Actor-critic agents and the AACL two-stage task loop.

The AACL policy network emits a point e in the action-representation space
(sigmoid head); the frozen decoder turns e into a distribution over the
task's active actions. With ``decoder=None`` the same machinery acts directly
on catalog logits, which is how the baselines are built.

Training is synchronous n-step advantage actor-critic over a batch of
parallel episodes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .action_repr import (
    Decoder,
    EncoderDecoderState,
    ReprConfig,
    adapt_structure,
    collect_transitions,
    decoder_logits,
    finetune,
    make_anchor,
    ssl_train,
    uniform_policy,
)
from .envs import SequenceSpec, TaskSpec, VecEnv, env_reset, env_step, normalize_return
from .errors import EmptySupportError, NumericFaultError
from .metrics import PerfMatrix
from .numerics import (
    GradBundle,
    OptState,
    ParamBundle,
    log_softmax_masked,
    net_backward,
    net_forward,
    opt_step,
)

log = logging.getLogger(__name__)

TRAINER_NOTE = (
    "synchronous n-step advantage actor-critic (single process) in place of "
    "IMPALA with V-trace"
)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream derived from a root seed."""
    key = [ord(c) for c in name]
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass
class A2CConfig:
    gamma: float = 0.99
    rollout: int = 20
    n_envs: int = 8
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 1e-3
    decay: float = 0.99
    eps: float = 1e-8
    grad_clip: float | None = 40.0
    hidden: tuple[int, ...] = (64,)
    prev_action: bool = True
    debug: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.rollout < 1 or self.n_envs < 1:
            raise ValueError("rollout length and env count must be >= 1")


@dataclass
class PolicyState:
    policy: ParamBundle
    value: ParamBundle
    policy_opt: OptState
    value_opt: OptState

    @classmethod
    def create(
        cls, in_dim: int, out_dim: int, head: str, config: A2CConfig, rng: np.random.Generator
    ) -> "PolicyState":
        hidden = list(config.hidden)
        acts = ["relu"] * len(hidden)
        policy = ParamBundle.init([in_dim, *hidden, out_dim], acts + [head], rng)
        value = ParamBundle.init([in_dim, *hidden, 1], acts + ["linear"], rng)
        hyper = dict(lr=config.lr, decay=config.decay, eps=config.eps, clip=config.grad_clip)
        return cls(policy, value, OptState.create(policy, **hyper), OptState.create(value, **hyper))


def policy_input(obs: np.ndarray, prev_feat: np.ndarray | None, prev_reward: np.ndarray | None) -> np.ndarray:
    """Observation, optionally followed by the previous action feature and reward."""
    if prev_feat is None:
        return obs
    return np.concatenate([obs, prev_feat, prev_reward[..., None]], axis=-1)


def forward_logits(policy: PolicyState, decoder: Decoder | None, x: np.ndarray):
    """Catalog logits for a batch of policy inputs.

    Returns (logits, e, cache); ``e`` is the emitted representation (or the
    raw logits for a direct policy).
    """
    e, cache = net_forward(policy.policy, x)
    if decoder is None:
        return e, e, cache
    return decoder_logits(decoder, e), e, cache


def sample_from(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row; zero-probability entries are never chosen."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.array([np.searchsorted(c, v, side="right") for c, v in zip(cum, u)], dtype=np.int64)


def act(
    policy: PolicyState,
    decoder: Decoder | None,
    x: np.ndarray,
    active: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Choose actions for a batch (or single) input; returns (actions, log-probs, e)."""
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(x)
    active = np.asarray(active, dtype=bool)
    if not active.any():
        raise EmptySupportError("empty active action mask")
    logits, e, _ = forward_logits(policy, decoder, x2)
    logp = log_softmax_masked(logits, active)
    probs = np.exp(logp)
    if mode == "greedy":
        actions = np.argmax(probs, axis=-1)
    elif mode == "sample":
        actions = sample_from(probs, rng)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    chosen = logp[np.arange(len(actions)), actions]
    if single:
        return actions[0], chosen[0], e[0]
    return actions, chosen, e


@dataclass
class RolloutBatch:
    """T steps of E parallel episodes.

    ``inputs[t]`` produced ``actions[t]``; ``bootstrap`` is the input after
    the last step, used for the value bootstrap.
    """

    inputs: np.ndarray  # (T, E, in)
    actions: np.ndarray  # (T, E)
    rewards: np.ndarray  # (T, E)
    dones: np.ndarray  # (T, E)
    active: np.ndarray  # (C,)
    bootstrap: np.ndarray  # (E, in)

    @property
    def size(self) -> int:
        return self.actions.size


def nstep_returns(rewards: np.ndarray, dones: np.ndarray, last_value: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    running = last_value
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        out[t] = running
    return out


def value_targets(batch: RolloutBatch, policy: PolicyState, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """(n-step returns, advantages), both flattened to T*E and treated as constants."""
    T, E = batch.actions.shape
    flat = batch.inputs.reshape(T * E, -1)
    v = net_forward(policy.value, flat)[0][:, 0]
    last = net_forward(policy.value, batch.bootstrap)[0][:, 0]
    returns = nstep_returns(batch.rewards, batch.dones.astype(np.float64), last, gamma).reshape(-1)
    return returns, returns - v


ExtraLoss = Callable[[PolicyState], "tuple[float, GradBundle]"]


def a2c_loss_and_grads(
    batch: RolloutBatch,
    policy: PolicyState,
    decoder: Decoder | None,
    config: A2CConfig,
    returns: np.ndarray | None = None,
    advantages: np.ndarray | None = None,
) -> tuple[dict[str, float], GradBundle, GradBundle]:
    """Total loss terms and gradients for policy and value parameters.

    policy loss = -mean(A * log pi(a|s)) - entropy_coef * mean(H)
    value loss  = mean((R - V)^2), weighted by value_coef
    """
    if returns is None or advantages is None:
        returns, advantages = value_targets(batch, policy, config.gamma)
    T, E = batch.actions.shape
    n = T * E
    x = batch.inputs.reshape(n, -1)
    a = batch.actions.reshape(-1)
    logits, _, pcache = forward_logits(policy, decoder, x)
    logp = log_softmax_masked(logits, batch.active)
    probs = np.exp(logp)
    plogp = np.where(probs > 0, probs * np.where(np.isfinite(logp), logp, 0.0), 0.0)
    entropy = -plogp.sum(axis=-1)
    chosen = logp[np.arange(n), a]

    pg_loss = -float(np.mean(advantages * chosen))
    ent = float(entropy.mean())
    # d(-A log p_a)/dz = A (p - onehot); dH/dz = -(p log p + p H)
    d_logits = advantages[:, None] * probs
    d_logits[np.arange(n), a] -= advantages
    d_logits += config.entropy_coef * (plogp + probs * entropy[:, None])
    d_logits /= n

    if decoder is None:
        d_out = d_logits
    else:
        d_out = d_logits[:, decoder.row_actions] @ decoder.layer.weight
    pgrads, _ = net_backward(policy.policy, pcache, d_out)

    v, vcache = net_forward(policy.value, x)
    diff = v[:, 0] - returns
    v_loss = float(np.mean(diff**2))
    vgrads, _ = net_backward(policy.value, vcache, (2.0 * config.value_coef / n) * diff[:, None])

    total = pg_loss - config.entropy_coef * ent + config.value_coef * v_loss
    if not np.isfinite(total):
        raise NumericFaultError("non-finite actor-critic loss")
    terms = {"policy_loss": pg_loss, "value_loss": v_loss, "entropy": ent, "total_loss": total}
    return terms, pgrads, vgrads


def _param_snapshot(decoder: Decoder | None) -> list[np.ndarray]:
    return [] if decoder is None else [a.copy() for a in decoder.params.arrays()]


def a2c_update(
    batch: RolloutBatch,
    policy: PolicyState,
    decoder: Decoder | None,
    config: A2CConfig,
    extra: ExtraLoss | None = None,
) -> tuple[PolicyState, dict[str, float]]:
    """One gradient step. The decoder is read, never written."""
    before = _param_snapshot(decoder) if config.debug else None
    terms, pgrads, vgrads = a2c_loss_and_grads(batch, policy, decoder, config)
    if extra is not None:
        extra_loss, extra_grads = extra(policy)
        if not np.isfinite(extra_loss):
            raise NumericFaultError("non-finite auxiliary loss")
        terms["extra_loss"] = extra_loss
        terms["total_loss"] += extra_loss
        pgrads = pgrads + extra_grads
    else:
        terms["extra_loss"] = 0.0
    opt_step(policy.policy, pgrads, policy.policy_opt)
    opt_step(policy.value, vgrads, policy.value_opt)
    if before is not None:
        after = decoder.params.arrays()
        assert all(np.array_equal(b, c) for b, c in zip(before, after)), "decoder modified"
    return policy, terms


def _eval_mask(task: TaskSpec, decoder: Decoder | None) -> np.ndarray | None:
    """Actions usable on ``task``; None means the agent knows none of them."""
    mask = task.space.array
    if decoder is not None:
        mask = mask & decoder.seen
    return mask if mask.any() else None


class Learner:
    """Shared rollout / update / evaluation loop.

    Subclasses define what the policy emits, what feeds back as the
    previous-action feature, and what happens at task boundaries.
    """

    head = "linear"

    def __init__(self, obs_dim: int, n_catalog: int, a2c: A2CConfig, seed: int):
        self.obs_dim = obs_dim
        self.n_catalog = n_catalog
        self.a2c = a2c
        self.seed = seed
        self.sample_rng = substream(seed, "sampling")
        self.env_seed = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
        self.global_step = 0
        self.tasks_done = 0
        self.log: list[dict] = []
        self.policy = self._new_policy()

    # -- hooks -----------------------------------------------------------
    @property
    def feat_dim(self) -> int:
        return self.n_catalog

    @property
    def out_dim(self) -> int:
        return self.n_catalog

    def decoder(self) -> Decoder | None:
        return None

    def prev_feature(self, actions: np.ndarray, e: np.ndarray) -> np.ndarray:
        return np.eye(self.n_catalog)[actions]

    def begin_task(self, task: TaskSpec) -> None:
        pass

    def end_task(self, task: TaskSpec) -> None:
        pass

    def extra_loss(self, batch: RolloutBatch) -> ExtraLoss | None:
        return None

    def observe_batch(self, batch: RolloutBatch) -> None:
        pass

    # -- machinery -------------------------------------------------------
    @property
    def in_dim(self) -> int:
        return self.obs_dim + (self.feat_dim + 1 if self.a2c.prev_action else 0)

    def _new_policy(self) -> PolicyState:
        rng = substream(self.seed, f"policy-init-{getattr(self, 'tasks_done', 0)}")
        return PolicyState.create(self.in_dim, self.out_dim, self.head, self.a2c, rng)

    def _inputs(self, obs: np.ndarray, feat: np.ndarray, rew: np.ndarray) -> np.ndarray:
        if not self.a2c.prev_action:
            return obs
        return policy_input(obs, feat, rew)

    def run_task(
        self,
        task: TaskSpec,
        on_eval: Callable[["Learner", int], None] | None = None,
        eval_interval: int | None = None,
    ) -> list[dict]:
        """Train on one task for ``task.steps`` environment steps.

        ``on_eval(agent, step_in_task)`` fires every ``eval_interval`` steps.
        """
        start_log = len(self.log)
        self.begin_task(task)
        self._train(task, task.steps, on_eval, eval_interval)
        self.end_task(task)
        self.tasks_done += 1
        return self.log[start_log:]

    def _train(self, task, steps, on_eval, eval_interval) -> None:
        if steps <= 0:
            return
        cfg = self.a2c
        env = VecEnv(task, cfg.n_envs, self.env_seed + 7919 * task.index + 104729 * self.tasks_done)
        active = task.space.array
        decoder = self.decoder()
        E = cfg.n_envs
        feat = np.zeros((E, self.feat_dim))
        rew = np.zeros(E)
        obs = env.obs.copy()
        ep_ret = np.zeros(E)
        done_steps = 0
        next_eval = eval_interval if eval_interval else None
        while done_steps < steps:
            T = min(cfg.rollout, -(-(steps - done_steps) // E))
            inputs = np.empty((T, E, self.in_dim))
            actions = np.empty((T, E), dtype=np.int64)
            rewards = np.empty((T, E))
            dones = np.empty((T, E), dtype=bool)
            finished = []
            for t in range(T):
                x = self._inputs(obs, feat, rew)
                a, _, e = act(self.policy, decoder, x, active, "sample", self.sample_rng)
                obs, r, d = env.step(a)
                inputs[t], actions[t], rewards[t], dones[t] = x, a, r, d
                ep_ret += r
                finished.extend(ep_ret[d].tolist())
                ep_ret[d] = 0.0
                feat = self.prev_feature(a, e)
                rew = r.copy()
                feat[d] = 0.0
                rew[d] = 0.0
            batch = RolloutBatch(inputs, actions, rewards, dones, active, self._inputs(obs, feat, rew))
            self.observe_batch(batch)
            _, terms = a2c_update(batch, self.policy, decoder, cfg, self.extra_loss(batch))
            done_steps += T * E
            self.global_step += T * E
            self.log.append(
                {
                    "global_step": self.global_step,
                    "task_index": task.index,
                    "episode_return": float(np.mean(finished)) if finished else None,
                    **terms,
                }
            )
            if next_eval is not None and on_eval is not None:
                while done_steps >= next_eval and next_eval < steps:
                    on_eval(self, next_eval)
                    next_eval += eval_interval

    def eval_actions(self, x: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Actions and emitted outputs for a batch of evaluation inputs."""
        a, _, e = act(self.policy, self.decoder(), x, mask, "sample", rng)
        return a, e

    def evaluate(self, task: TaskSpec, episodes: int, seed: int) -> float:
        return evaluate(self, task, episodes, seed)


def evaluate(agent: Learner, task: TaskSpec, episodes: int, seed: int) -> float:
    """Mean normalised return over ``episodes`` seeded episodes in sample mode.

    Actions the agent has no structure for are left out of its choice set; an
    agent that knows none of the task's actions acts uniformly at random.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng([seed, 11])
    decoder = agent.decoder()
    mask = _eval_mask(task, decoder)
    states, obs = [], []
    for k in range(episodes):
        s, o = env_reset(task, int(np.random.SeedSequence([seed, 13, k]).generate_state(1)[0]))
        states.append(s)
        obs.append(o)
    obs = np.stack(obs)
    feat = np.zeros((episodes, agent.feat_dim))
    rew = np.zeros(episodes)
    totals = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    while alive.any():
        idx = np.flatnonzero(alive)
        if mask is None:
            acts = [uniform_policy(None, task.space.array, rng) for _ in idx]
            e = np.zeros((len(idx), agent.feat_dim))
        else:
            x = agent._inputs(obs[idx], feat[idx], rew[idx])
            acts, e = agent.eval_actions(x, mask, rng)
        nf = agent.prev_feature(np.asarray(acts, dtype=np.int64), e) if mask is not None else e
        for j, k in enumerate(idx):
            s, o, r, d = env_step(states[k], int(acts[j]), task)
            states[k], obs[k] = s, o
            totals[k] += r
            rew[k] = r
            feat[k] = nf[j]
            if d:
                alive[k] = False
    return float(np.mean([normalize_return(t, task) for t in totals]))


def eval_seed(seed: int, task_index: int) -> int:
    """Evaluation seed for one task; identical for every row so rows share episodes."""
    return int(np.random.SeedSequence([seed, 5, task_index]).generate_state(1)[0])


RowCallback = Callable[[int, int, float, str, int], None]


def run_sequence(
    agent: Learner,
    sequence: SequenceSpec,
    episodes: int = 10,
    interval: int | None = None,
    seed: int = 0,
    on_row: RowCallback | None = None,
    on_task_end: Callable[[int, TaskSpec], None] | None = None,
) -> PerfMatrix:
    """Train through a sequence, evaluating every task before training, every
    ``interval`` steps, and at each task boundary.

    Boundary evaluations fill the returned matrix; ``on_row(trained_after,
    eval_task, value, phase, global_step)`` sees every evaluation, with phase
    "boundary" or "periodic" (periodic rows carry the number of finished tasks).
    """
    n = len(sequence)
    P = PerfMatrix.empty(n)

    def eval_all(trained: int, phase: str) -> None:
        for j, task in enumerate(sequence.tasks, 1):
            v = agent.evaluate(task, episodes, eval_seed(seed, j))
            if phase == "boundary":
                P.set(trained, j, v)
            if on_row is not None:
                on_row(trained, j, v, phase, agent.global_step)

    eval_all(0, "boundary")
    for i, task in enumerate(sequence.tasks, 1):
        hook = (lambda ag, step, done=i - 1: eval_all(done, "periodic")) if interval else None
        agent.run_task(task, hook, interval)
        eval_all(i, "boundary")
        if on_task_end is not None:
            on_task_end(i, task)
    return P


@dataclass
class AACLConfig:
    repr: ReprConfig = field(default_factory=ReprConfig)
    a2c: A2CConfig = field(default_factory=A2CConfig)
    exploration_steps: int = 10_000
    exploration_policy: str = "random"  # "random" | "previous"


# ablations: which parts of the encoder-decoder carry the anchor penalty
VARIANTS = {
    "AACL": dict(reg_decoder=True, reg_encoder=False),
    "AACL-O": dict(reg_decoder=False, reg_encoder=False),
    "AACL-E": dict(reg_decoder=True, reg_encoder=True),
    "AACL-OE": dict(reg_decoder=False, reg_encoder=True),
}


class AACLAgent(Learner):
    head = "sigmoid"

    def __init__(self, obs_dim: int, n_catalog: int, config: AACLConfig, seed: int, variant: str = "AACL"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown AACL variant {variant!r}")
        self.config = config
        self.variant = variant
        super().__init__(obs_dim, n_catalog, config.a2c, seed)
        self.repr = EncoderDecoderState.create(obs_dim, n_catalog, config.repr, substream(seed, "repr-init"))
        self.repr_rng = substream(seed, "repr-train")
        self.last_buffer = None
        self.ssl_trace: list[float] = []

    @property
    def feat_dim(self) -> int:
        return self.config.repr.dim

    @property
    def out_dim(self) -> int:
        return self.config.repr.dim

    def decoder(self) -> Decoder:
        return self.repr.decoder

    def prev_feature(self, actions: np.ndarray, e: np.ndarray) -> np.ndarray:
        return np.array(e, copy=True)

    def _exploration_policy(self, task: TaskSpec):
        if self.config.exploration_policy == "random" or not self.repr.anchors:
            return None
        if self.config.exploration_policy != "previous":
            raise ValueError(f"unknown exploration policy {self.config.exploration_policy!r}")
        rng_mask = task.space.array & self.repr.decoder.seen
        if not rng_mask.any():
            return None
        zero_feat = np.zeros(self.feat_dim)

        def previous(obs, active, rng):
            x = self._inputs(obs, zero_feat, np.zeros(())) if self.a2c.prev_action else obs
            return int(act(self.policy, self.repr.decoder, x, rng_mask, "sample", rng)[0])

        return previous

    def begin_task(self, task: TaskSpec) -> None:
        cfg = self.config
        explore_seed = int(np.random.SeedSequence([self.seed, 3, task.index, self.tasks_done]).generate_state(1)[0])
        buffer = collect_transitions(task, cfg.exploration_steps, explore_seed, self._exploration_policy(task))
        adapt_structure(self.repr, task.space, self.repr_rng)
        flags = VARIANTS[self.variant]
        rcfg = ReprConfig(**{**asdict(cfg.repr), **flags})
        if not self.repr.anchors:
            _, trace = ssl_train(buffer, self.repr, rcfg, self.repr_rng)
        else:
            lam = rcfg.lam if (flags["reg_decoder"] or flags["reg_encoder"]) else 0.0
            _, trace = finetune(buffer, self.repr, lam, rcfg, self.repr_rng)
        self.repr.anchors.append(make_anchor(buffer, self.repr))
        self.last_buffer = buffer
        self.ssl_trace = trace
        log.debug("task %d: ssl loss %.4f -> %.4f", task.index, trace[0], trace[-1])
