"""Comparison agents that act directly on logits over the union action catalog.

IND     fresh parameters for every task
FT      one network fine-tuned across tasks
EWC     quadratic anchor per finished task, weighted by the policy's Fisher
onlineEWC  a single decayed running Fisher and the latest anchor
replayBC   on-policy loss plus behaviour cloning on reservoir-sampled past inputs

replayBC is a simplified CLEAR: no V-trace, only the cloning term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import A2CConfig, Learner, PolicyState, RolloutBatch, act, forward_logits, run_sequence, substream
from .envs import SequenceSpec, TaskSpec
from .errors import ConfigError
from .metrics import PerfMatrix
from .numerics import GradBundle, ParamBundle, log_softmax_masked, net_backward, net_forward, per_sample_sq_grads

METHODS = ("IND", "FT", "EWC", "onlineEWC", "replayBC")


@dataclass
class BaselineConfig:
    a2c: A2CConfig = field(default_factory=A2CConfig)
    ewc_lambda: float = 1e4
    online_ewc_lambda: float = 175.0
    online_decay: float = 0.95
    fisher_samples: int = 10_000
    replay_ratio: float = 0.5
    replay_capacity: int = 50_000

    def __post_init__(self):
        if not 0.0 <= self.online_decay <= 1.0:
            raise ConfigError("online EWC decay must lie in [0, 1]")
        if not 0.0 <= self.replay_ratio < 1.0:
            raise ConfigError("replay ratio must lie in [0, 1)")


class Reservoir:
    """Fixed-capacity uniform sample of a stream (Vitter's algorithm R)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.seen = 0
        self.items: list = []

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item) -> None:
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self.rng.integers(self.seen + 1))
            if j < self.capacity:
                self.items[j] = item
        self.seen += 1

    def sample(self, k: int) -> list:
        idx = self.rng.integers(len(self.items), size=k)
        return [self.items[i] for i in idx]


class RecentSamples:
    """The last ``capacity`` (input, action, mask) triples of the current task."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.clear()

    def clear(self) -> None:
        self.x: list[np.ndarray] = []
        self.a: list[np.ndarray] = []
        self.count = 0

    def add_batch(self, batch: RolloutBatch) -> None:
        T, E = batch.actions.shape
        self.x.append(batch.inputs.reshape(T * E, -1))
        self.a.append(batch.actions.reshape(-1))
        self.count += T * E
        while self.count - len(self.a[0]) >= self.capacity:
            self.count -= len(self.a.pop(0))
            self.x.pop(0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate(self.x)[-self.capacity :]
        a = np.concatenate(self.a)[-self.capacity :]
        return x, a


def policy_fisher(policy: ParamBundle, x: np.ndarray, actions: np.ndarray, active: np.ndarray) -> GradBundle:
    """Empirical Fisher diagonal of log pi(a|x) over the policy parameters."""
    logits, cache = net_forward(policy, x)
    probs = np.exp(log_softmax_masked(logits, active))
    up = -probs
    up[np.arange(len(actions)), actions] += 1.0
    return per_sample_sq_grads(policy, cache, up)


def quadratic_penalty(
    params: ParamBundle, anchors: list[tuple[ParamBundle, GradBundle]], lam: float
) -> tuple[float, GradBundle]:
    """(lam/2) sum_j sum_k F_k^j (theta_k - theta_k^j)^2 and its gradient."""
    grads = GradBundle.zeros_like(params)
    total = 0.0
    for ref, fisher in anchors:
        for (gw, gb), cur, old, (fw, fb) in zip(grads.layers, params.layers, ref.layers, fisher.layers):
            dw = cur.weight - old.weight
            db = cur.bias - old.bias
            total += float(np.sum(fw * dw * dw) + np.sum(fb * db * db))
            gw += lam * fw * dw
            gb += lam * fb * db
    return 0.5 * lam * total, grads


class DirectAgent(Learner):
    head = "linear"

    def __init__(self, method: str, obs_dim: int, n_catalog: int, config: BaselineConfig, seed: int):
        if method not in METHODS:
            raise ConfigError(f"unknown baseline {method!r}; expected one of {METHODS}")
        self.method = method
        self.config = config
        super().__init__(obs_dim, n_catalog, config.a2c, seed)
        self.reinit_calls = 0
        self.anchors: list[tuple[ParamBundle, GradBundle]] = []
        self.recent = RecentSamples(config.fisher_samples)
        self.replay = Reservoir(config.replay_capacity, substream(seed, "reservoir"))

    @property
    def lam(self) -> float:
        if self.method == "EWC":
            return self.config.ewc_lambda
        if self.method == "onlineEWC":
            return self.config.online_ewc_lambda
        return 0.0

    def reinit(self) -> None:
        self.policy = self._new_policy()
        self.reinit_calls += 1

    def begin_task(self, task: TaskSpec) -> None:
        if self.method == "IND" and self.tasks_done > 0:
            self.reinit()
        self.recent.clear()

    def observe_batch(self, batch: RolloutBatch) -> None:
        if self.method in ("EWC", "onlineEWC"):
            self.recent.add_batch(batch)
        elif self.method == "replayBC":
            T, E = batch.actions.shape
            x = batch.inputs.reshape(T * E, -1)
            logits, _, _ = forward_logits(self.policy, None, x)
            probs = np.exp(log_softmax_masked(logits, batch.active))
            for xi, pi in zip(x, probs):
                self.replay.add((xi, pi, batch.active))

    def end_task(self, task: TaskSpec) -> None:
        if self.method not in ("EWC", "onlineEWC") or self.recent.count == 0:
            return
        x, a = self.recent.arrays()
        fisher = policy_fisher(self.policy.policy, x, a, task.space.array)
        snapshot = self.policy.policy.copy()
        if self.method == "EWC":
            self.anchors.append((snapshot, fisher))
        else:
            if self.anchors:
                old = self.anchors[0][1]
                d = self.config.online_decay
                fisher = GradBundle(
                    [(d * ow + nw, d * ob + nb) for (ow, ob), (nw, nb) in zip(old.layers, fisher.layers)]
                )
            self.anchors = [(snapshot, fisher)]

    def extra_loss(self, batch: RolloutBatch):
        if self.method in ("EWC", "onlineEWC"):
            if not self.anchors or self.lam == 0.0:
                return None
            anchors, lam = self.anchors, self.lam
            return lambda policy: quadratic_penalty(policy.policy, anchors, lam)
        if self.method == "replayBC" and len(self.replay) > 0:
            ratio = self.config.replay_ratio
            k = int(round(batch.size * ratio / (1.0 - ratio)))
            if k == 0:
                return None
            items = self.replay.sample(k)
            return lambda policy: behaviour_cloning(policy, items)
        return None


def behaviour_cloning(policy: PolicyState, items: list) -> tuple[float, GradBundle]:
    """Mean cross-entropy between stored behaviour distributions and the current policy."""
    x = np.stack([it[0] for it in items])
    target = np.stack([it[1] for it in items])
    active = np.stack([it[2] for it in items])
    logits, cache = net_forward(policy.policy, x)
    logp = log_softmax_masked(logits, active)
    n = len(items)
    finite = np.where(np.isfinite(logp), logp, 0.0)
    loss = -float(np.sum(target * finite) / n)
    d_logits = (np.exp(logp) - target) / n
    grads, _ = net_backward(policy.policy, cache, d_logits)
    return loss, grads


def make_baseline(
    method: str, obs_dim: int, n_catalog: int, seed: int, config: BaselineConfig | None = None
) -> DirectAgent:
    return DirectAgent(method, obs_dim, n_catalog, config or BaselineConfig(), seed)


def baseline_act(
    state: PolicyState, x: np.ndarray, active: np.ndarray, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Action and log-probability from union-catalog logits restricted to ``active``."""
    a, logp, _ = act(state, None, x, active, mode, rng)
    return a, logp


def run_sequence_baseline(
    method: str,
    sequence: SequenceSpec,
    config: BaselineConfig | None = None,
    seed: int = 0,
    episodes: int = 10,
    interval: int | None = None,
) -> tuple[PerfMatrix, list[dict]]:
    tasks = sequence.tasks
    agent = make_baseline(method, tasks[0].obs_dim, len(tasks[0].catalog), seed, config)
    P = run_sequence(agent, sequence, episodes, interval, seed)
    return P, agent.log
