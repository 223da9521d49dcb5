"""Reinforcement-learned coalition formation.

Two learners choose a joint coalition assignment each epoch:

* :class:`DQNLearner` is centralized. One network reads the full state
  ``(C, D)`` and has one head of ``J+1`` values per user, trained with a
  summed per-head TD loss. A single output over the ``(J+1)^K`` joint actions
  would not scale to ``K=10``.
* :class:`QmixLearner` gives every user an agent network that only sees its
  own coalition id and size. A state-conditioned mixing network with
  nonnegative weights combines the chosen agent values into ``Q_tot`` during
  training; execution needs the agent networks alone.

Networks reuse the dense layers of :mod:`cffl.estimator` and are optimized
with a small Adam implementation.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from . import federation as fed
from . import hfl
from .coalition import CoalitionPartition, GameSettings, UtilityOracle, coalition_utility


class InsufficientBufferError(ValueError):
    pass


def reward(mean_error: float) -> float:
    """``1 - mean_error``; the caller passes the mean of clipped linear NMSEs."""
    return 1.0 - float(mean_error)


def mean_clipped_error(errors) -> float:
    values = np.clip(np.asarray(list(errors.values()) if isinstance(errors, dict) else errors, dtype=float), 0, 1)
    return float(values.mean())


# ---------------------------------------------------------------------------
# encodings

def encode_state(partition: CoalitionPartition) -> np.ndarray:
    """One-hot coalition choice of every user followed by sizes ``D / K``."""
    k, j = partition.n_users, partition.max_coalitions
    onehot = np.zeros((k, j + 1))
    onehot[np.arange(k), partition.assignment] = 1.0
    return np.concatenate([onehot.ravel(), partition.sizes / k])


def decode_assignment(state: np.ndarray, k: int, j: int) -> np.ndarray:
    return state[:k * (j + 1)].reshape(k, j + 1).argmax(axis=1)


@dataclass
class AgentObservation:
    """What a single Qmix agent sees at execution time."""

    coalition: np.ndarray  # one-hot over J+1
    size: np.ndarray  # own coalition size / K, or the whole size vector / K

    def __post_init__(self):
        if np.count_nonzero(self.coalition) != 1:
            raise ValueError("coalition one-hot must have exactly one entry set")

    def vector(self, agent_id: np.ndarray | None = None) -> np.ndarray:
        parts = [self.coalition, np.atleast_1d(self.size)]
        if agent_id is not None:
            parts.append(agent_id)
        return np.concatenate(parts)


def observe(partition: CoalitionPartition, user: int, full_sizes: bool = False) -> AgentObservation:
    k, j = partition.n_users, partition.max_coalitions
    label = partition.assignment[user]
    onehot = np.zeros(j + 1)
    onehot[label] = 1.0
    if full_sizes:
        size = partition.sizes / k
    else:
        size = np.array([len(partition.coalition_of(user)) / k])
    return AgentObservation(onehot, size)


# ---------------------------------------------------------------------------
# plumbing: MLPs, Adam, replay

def mlp(sizes, rng: np.random.Generator, hidden_activation="relu") -> est.LayeredModel:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = hidden_activation if i < len(sizes) - 2 else "identity"
        layers.append(est.dense_layer(rng, a, b, act))
    return est.LayeredModel(layers)


class Adam:
    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool = False

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    def __init__(self, capacity: int = 10_000):
        self.items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, t: Transition) -> None:
        self.items.append(t)

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        if len(self.items) < batch:
            raise InsufficientBufferError(f"buffer holds {len(self.items)} transitions, need {batch}")
        idx = rng.choice(len(self.items), size=batch, replace=False)
        return [self.items[i] for i in idx]


def _stack(batch: list[Transition]):
    return (np.stack([t.state for t in batch]), np.stack([t.action for t in batch]).astype(int),
            np.array([t.reward for t in batch]), np.stack([t.next_state for t in batch]),
            np.array([float(t.done) for t in batch]))


def epsilon_at(epoch: int, total: int, start=1.0, end=0.05, fraction=0.6) -> float:
    horizon = max(1, int(round(fraction * total)))
    if epoch >= horizon:
        return end
    return start + (end - start) * epoch / horizon


# ---------------------------------------------------------------------------
# factored DQN

def dqn_select(qnet: est.LayeredModel, state: np.ndarray, eps: float, rng: np.random.Generator,
               n_users: int, n_choices: int) -> np.ndarray:
    """Per-user epsilon-greedy choice over that user's ``J+1`` head outputs."""
    if not 0 <= eps <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    q = est.forward(qnet, state[None])[0].reshape(n_users, n_choices)
    action = q.argmax(axis=1)
    for k in range(n_users):
        if rng.random() < eps:
            action[k] = rng.integers(n_choices)
    return action


def dqn_loss_and_grad(qnet, target_net, batch: list[Transition], gamma: float, n_users: int, n_choices: int):
    s, a, r, s2, done = _stack(batch)
    b = len(batch)
    q_next = est.forward(target_net, s2).reshape(b, n_users, n_choices)
    y = r[:, None] + gamma * (1 - done)[:, None] * q_next.max(axis=2)
    out, caches = est.forward_cache(qnet, s)
    q = out.reshape(b, n_users, n_choices)
    chosen = np.take_along_axis(q, a[:, :, None], axis=2)[:, :, 0]
    td = chosen - y
    loss = float(np.sum(td ** 2) / b)
    dq = np.zeros_like(q)
    np.put_along_axis(dq, a[:, :, None], (2.0 / b * td)[:, :, None], axis=2)
    grads, _ = est.backward_from_output(qnet, caches, dq.reshape(b, -1))
    return loss, grads


class DQNLearner:
    def __init__(self, n_users: int, max_coalitions: int, hidden: int = 64, learning_rate: float = 1e-3,
                 gamma: float = 0.9, target_sync: int = 50, rng: np.random.Generator | None = None):
        self.k, self.c = n_users, max_coalitions + 1
        self.rng = np.random.default_rng(0) if rng is None else rng
        state_dim = n_users * self.c + max_coalitions
        self.qnet = mlp([state_dim, hidden, hidden, n_users * self.c], self.rng)
        self.target = self.qnet.copy()
        self.opt = Adam(self.qnet.params(), learning_rate)
        self.gamma, self.target_sync, self.steps = gamma, target_sync, 0

    def select(self, partition: CoalitionPartition, eps: float) -> np.ndarray:
        return dqn_select(self.qnet, encode_state(partition), eps, self.rng, self.k, self.c)

    def sync_target(self) -> None:
        self.target = self.qnet.copy()

    def train_step(self, buffer: ReplayBuffer, batch_size: int) -> float:
        batch = buffer.sample(batch_size, self.rng)
        loss, grads = dqn_loss_and_grad(self.qnet, self.target, batch, self.gamma, self.k, self.c)
        self.qnet.set_params(self.opt.step(self.qnet.params(), grads))
        self.steps += 1
        if self.steps % self.target_sync == 0:
            self.sync_target()
        return loss


def dqn_train_step(buffer: ReplayBuffer, learner: DQNLearner, batch_size: int) -> float:
    return learner.train_step(buffer, batch_size)


# ---------------------------------------------------------------------------
# Qmix

def qmix_agent_q(agent_net: est.LayeredModel, observation: np.ndarray) -> np.ndarray:
    """Action values of one agent (or a batch of observations)."""
    obs = np.asarray(observation, dtype=float)
    return est.forward(agent_net, obs[None])[0] if obs.ndim == 1 else est.forward(agent_net, obs)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


class MixingNetwork:
    """``Q_tot = act(q |W1(s)| + b1(s)) . |w2(s)| + b2(s)``.

    Absolute values on the hypernetwork outputs keep every mixing weight
    nonnegative, so ``Q_tot`` is monotone in each agent value.
    """

    def __init__(self, n_agents: int, state_dim: int, hidden: int = 16, activation: str = "elu",
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.k, self.h, self.activation = n_agents, hidden, activation
        self.hyper_w1 = mlp([state_dim, n_agents * hidden], rng)
        self.hyper_b1 = mlp([state_dim, hidden], rng)
        self.hyper_w2 = mlp([state_dim, hidden], rng)
        self.hyper_b2 = mlp([state_dim, hidden, 1], rng)

    @property
    def nets(self):
        return [self.hyper_w1, self.hyper_b1, self.hyper_w2, self.hyper_b2]

    def params(self):
        return [p for n in self.nets for p in n.params()]

    def set_params(self, values):
        i = 0
        for n in self.nets:
            c = len(n.params())
            n.set_params(values[i:i + c])
            i += c

    def copy(self) -> "MixingNetwork":
        import copy
        return copy.deepcopy(self)

    def forward_cache(self, q: np.ndarray, state: np.ndarray):
        q, state = np.atleast_2d(q), np.atleast_2d(state)
        b = q.shape[0]
        w1_raw, c_w1 = est.forward_cache(self.hyper_w1, state)
        b1, c_b1 = est.forward_cache(self.hyper_b1, state)
        w2_raw, c_w2 = est.forward_cache(self.hyper_w2, state)
        b2, c_b2 = est.forward_cache(self.hyper_b2, state)
        w1 = np.abs(w1_raw).reshape(b, self.k, self.h)
        w2 = np.abs(w2_raw)
        pre = np.einsum("bk,bkh->bh", q, w1) + b1
        hid = _elu(pre) if self.activation == "elu" else pre
        q_tot = np.sum(hid * w2, axis=1) + b2[:, 0]
        cache = dict(q=q, w1_raw=w1_raw, w2_raw=w2_raw, w1=w1, w2=w2, pre=pre, hid=hid,
                     c=(c_w1, c_b1, c_w2, c_b2))
        return q_tot, cache

    def forward(self, q, state) -> np.ndarray:
        return self.forward_cache(q, state)[0]

    def backward(self, cache, dq_tot: np.ndarray):
        """Gradients of the hypernetworks and of the agent values ``q``."""
        b = dq_tot.shape[0]
        c_w1, c_b1, c_w2, c_b2 = cache["c"]
        d_w2 = dq_tot[:, None] * cache["hid"]
        d_hid = dq_tot[:, None] * cache["w2"]
        d_pre = d_hid * _elu_grad(cache["pre"]) if self.activation == "elu" else d_hid
        d_w1 = cache["q"][:, :, None] * d_pre[:, None, :]
        d_q = np.einsum("bh,bkh->bk", d_pre, cache["w1"])
        g_w1, _ = est.backward_from_output(self.hyper_w1, c_w1, d_w1.reshape(b, -1) * np.sign(cache["w1_raw"]))
        g_b1, _ = est.backward_from_output(self.hyper_b1, c_b1, d_pre)
        g_w2, _ = est.backward_from_output(self.hyper_w2, c_w2, d_w2 * np.sign(cache["w2_raw"]))
        g_b2, _ = est.backward_from_output(self.hyper_b2, c_b2, dq_tot[:, None])
        return g_w1 + g_b1 + g_w2 + g_b2, d_q


def qmix_mix(mixer: MixingNetwork, agent_q_chosen: np.ndarray, global_state: np.ndarray) -> float:
    """Global value of one joint choice."""
    return float(mixer.forward(np.asarray(agent_q_chosen)[None], np.asarray(global_state)[None])[0])


class QmixLearner:
    """Agent networks plus mixer, trained centrally on ``Q_tot`` TD errors."""

    def __init__(self, n_users: int, max_coalitions: int, hidden: int = 64, mixing_hidden: int = 16,
                 learning_rate: float = 1e-3, gamma: float = 0.9, target_sync: int = 50,
                 share_params: bool = True, agent_id: bool = True, full_sizes: bool = False,
                 rng: np.random.Generator | None = None):
        self.k, self.j, self.c = n_users, max_coalitions, max_coalitions + 1
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.share, self.agent_id, self.full_sizes = share_params, agent_id, full_sizes
        obs_dim = self.c + (max_coalitions if full_sizes else 1) + (n_users if agent_id else 0)
        n_nets = 1 if share_params else n_users
        self.agents = [mlp([obs_dim, hidden, self.c], self.rng) for _ in range(n_nets)]
        state_dim = n_users * self.c + max_coalitions
        self.mixer = MixingNetwork(n_users, state_dim, mixing_hidden, "elu", self.rng)
        self.target_agents = [a.copy() for a in self.agents]
        self.target_mixer = self.mixer.copy()
        self.opt = Adam(self.params(), learning_rate)
        self.gamma, self.target_sync, self.steps = gamma, target_sync, 0

    def params(self):
        return [p for a in self.agents for p in a.params()] + self.mixer.params()

    def set_params(self, values):
        i = 0
        for a in self.agents:
            c = len(a.params())
            a.set_params(values[i:i + c])
            i += c
        self.mixer.set_params(values[i:])

    def agent_net(self, k: int, target: bool = False) -> est.LayeredModel:
        nets = self.target_agents if target else self.agents
        return nets[0] if self.share else nets[k]

    def observation_vector(self, obs: AgentObservation, k: int) -> np.ndarray:
        return obs.vector(np.eye(self.k)[k] if self.agent_id else None)

    def act_agent(self, k: int, obs: AgentObservation, eps: float) -> int:
        """Decentralized execution: agent ``k`` sees only its own observation."""
        if self.rng.random() < eps:
            return int(self.rng.integers(self.c))
        return int(np.argmax(qmix_agent_q(self.agent_net(k), self.observation_vector(obs, k))))

    def select(self, partition: CoalitionPartition, eps: float) -> np.ndarray:
        return np.array([self.act_agent(k, observe(partition, k, self.full_sizes), eps) for k in range(self.k)])

    def _obs_batch(self, states: np.ndarray) -> np.ndarray:
        """``(B, K, obs_dim)`` observations, vectorized equivalent of :func:`observe`."""
        b = states.shape[0]
        onehot = states[:, :self.k * self.c].reshape(b, self.k, self.c)
        sizes = states[:, self.k * self.c:]  # (B, J), already divided by K
        if self.full_sizes:
            size = np.repeat(sizes[:, None, :], self.k, axis=1)
        else:
            padded = np.concatenate([np.full((b, 1), 1.0 / self.k), sizes], axis=1)
            size = np.take_along_axis(padded, onehot.argmax(axis=2), axis=1)[:, :, None]
        parts = [onehot, size]
        if self.agent_id:
            parts.append(np.broadcast_to(np.eye(self.k), (b, self.k, self.k)))
        return np.concatenate(parts, axis=2)

    def _agent_values(self, obs: np.ndarray, target: bool = False):
        b = obs.shape[0]
        if self.share:
            net = self.agent_net(0, target)
            out, cache = est.forward_cache(net, obs.reshape(b * self.k, -1))
            return out.reshape(b, self.k, self.c), [cache]
        outs, caches = [], []
        for k in range(self.k):
            out, cache = est.forward_cache(self.agent_net(k, target), obs[:, k])
            outs.append(out)
            caches.append(cache)
        return np.stack(outs, axis=1), caches

    def loss_and_grad(self, obs, actions, states, y):
        """Squared TD loss of ``Q_tot`` against fixed targets ``y``, and its gradient."""
        b = obs.shape[0]
        q_all, agent_caches = self._agent_values(obs)
        chosen = np.take_along_axis(q_all, actions[:, :, None], axis=2)[:, :, 0]
        q_tot, mcache = self.mixer.forward_cache(chosen, states)
        td = q_tot - y
        loss = float(np.mean(td ** 2))
        g_mix, d_chosen = self.mixer.backward(mcache, 2.0 / b * td)
        dq_all = np.zeros_like(q_all)
        np.put_along_axis(dq_all, actions[:, :, None], d_chosen[:, :, None], axis=2)
        if self.share:
            g_agents, _ = est.backward_from_output(self.agents[0], agent_caches[0], dq_all.reshape(b * self.k, -1))
        else:
            g_agents = []
            for k in range(self.k):
                g, _ = est.backward_from_output(self.agents[k], agent_caches[k], dq_all[:, k])
                g_agents += g
        return loss, g_agents + g_mix

    def targets(self, rewards, next_states, done):
        obs2 = self._obs_batch(next_states)
        q2, _ = self._agent_values(obs2, target=True)
        q_tot2 = self.target_mixer.forward(q2.max(axis=2), next_states)
        return rewards + self.gamma * (1 - done) * q_tot2

    def sync_target(self) -> None:
        self.target_agents = [a.copy() for a in self.agents]
        self.target_mixer = self.mixer.copy()

    def train_step(self, buffer: ReplayBuffer, batch_size: int) -> float:
        batch = buffer.sample(batch_size, self.rng)
        s, a, r, s2, done = _stack(batch)
        y = self.targets(r, s2, done)
        loss, grads = self.loss_and_grad(self._obs_batch(s), a, s, y)
        self.set_params(self.opt.step(self.params(), grads))
        self.steps += 1
        if self.steps % self.target_sync == 0:
            self.sync_target()
        return loss


def qmix_train_step(buffer: ReplayBuffer, learner: QmixLearner, batch_size: int) -> float:
    return learner.train_step(buffer, batch_size)


# ---------------------------------------------------------------------------
# environments and the CFFL loop

class SurrogateEnvironment:
    """Coalition errors from a utility oracle; no models are trained."""

    def __init__(self, oracle: UtilityOracle):
        self.oracle = oracle

    def step(self, partition: CoalitionPartition):
        return self.oracle.evaluate(partition), 0


class FLEnvironment:
    """Runs ``E`` FL (or HFL) rounds inside every coalition of the chosen partition.

    Each user keeps its own model between epochs. A coalition starts from
    the mean of its members' models, trains jointly and hands the result back
    to every member; solo users take ``E`` local steps. Errors are linear
    test NMSE clipped to ``[0, 1]``.
    """

    def __init__(self, train: dict[int, est.TrainBatch], test: dict[int, est.TrainBatch],
                 init_model: est.LayeredModel, rounds: int = 5, learning_rate: float = 1e-3,
                 strategy: str = "plain", positions: np.ndarray | None = None,
                 rsrp: dict[int, float] | None = None, reference_distance: float = 300.0,
                 rsrp_delta: float | None = None, hfl_pairs: dict[int, hfl.HflPair] | None = None,
                 hfl_kwargs: dict | None = None, rng: np.random.Generator | None = None):
        self.train, self.test = train, test
        self.models = {u: init_model.copy() for u in train}
        self.rounds, self.lr, self.strategy = rounds, learning_rate, strategy
        self.positions, self.rsrp = positions, rsrp
        self.reference, self.delta = reference_distance, rsrp_delta
        self.hfl_pairs = hfl_pairs
        self.hfl_kwargs = hfl_kwargs or {}
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.reports: list[fed.RoundReport] = []

    def _group(self, members):
        if self.positions is None or self.strategy == "plain":
            return fed.FLGroup(members, members[0]), None
        center = fed.select_center(members, self.positions, self.reference)
        ctx = fed.make_transfer_context(members, center, self.positions, self.rsrp, self.reference, self.delta)
        return fed.FLGroup(members, center), ctx

    def step(self, partition: CoalitionPartition, epoch: int = 0):
        total_bytes = 0
        for label in range(1, partition.max_coalitions + 1):
            members = sorted(partition.members(label))
            if not members:
                continue
            start = self.models[members[0]].copy()
            start.set_params([np.mean([self.models[m].params()[i] for m in members], axis=0)
                              for i in range(len(start.params()))])
            if self.hfl_pairs is not None:
                pair = self.hfl_pairs[label]
                pair = hfl.HflPair(pair.global_model, start, pair.server_data)
                for r in range(self.rounds):
                    pair, report = hfl.run_hfl_round(pair, members, self.train, rng=self.rng, round_index=r,
                                                     group_id=label, epoch=epoch, **self.hfl_kwargs)
                    self.reports.append(report)
                    total_bytes += report.bytes_exchanged
                self.hfl_pairs[label] = pair
                model = pair.local_template
            else:
                group, ctx = self._group(members)
                model = start
                for r in range(self.rounds):
                    try:
                        model, report = fed.run_fl_round(group, model, self.train, self.strategy, ctx, self.lr,
                                                         round_index=r, group_id=label, epoch=epoch)
                    except fed.DegenerateWeightsError:
                        model, report = fed.run_fl_round(group, model, self.train, "plain", None, self.lr,
                                                         round_index=r, group_id=label, epoch=epoch)
                    self.reports.append(report)
                    total_bytes += report.bytes_exchanged
            for m in members:
                self.models[m] = model.copy()
        for user in sorted(partition.members(0)):
            for _ in range(self.rounds):
                self.models[user] = est.sgd_step(self.models[user], est.backward(self.models[user], self.train[user]),
                                                 self.lr)
        errors = {u: float(np.clip(est.batch_nmse(self.models[u], self.test[u]), 0, 1)) for u in sorted(self.models)}
        return errors, total_bytes


def potential_from_errors(partition: CoalitionPartition, errors: dict[int, float], settings: GameSettings) -> float:
    # payoff shares sum to each coalition's utility
    return sum(coalition_utility(s, errors, settings.utility_constant) for s in partition.coalitions())


@dataclass
class EpochRecord:
    epoch: int
    action: tuple[int, ...]
    reward: float
    mean_error: float
    errors: dict[int, float]
    bytes_exchanged: int
    potential: float
    loss: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for r in self.records:
            h.update(repr((r.epoch, r.action, round(r.reward, 12))).encode())
        return h.hexdigest()


def make_learner(backend: str, n_users: int, max_coalitions: int, rl, rng) -> DQNLearner | QmixLearner:
    if backend == "dqn":
        return DQNLearner(n_users, max_coalitions, rl.hidden, rl.learning_rate, rl.gamma, rl.target_sync, rng)
    if backend == "qmix":
        return QmixLearner(n_users, max_coalitions, rl.hidden, rl.mixing_hidden, rl.learning_rate, rl.gamma,
                           rl.target_sync, rl.share_params, rl.agent_id, rl.full_size_observation, rng)
    raise ValueError(f"unknown RL backend {backend!r}")


def run_cffl(environment, n_users: int, max_coalitions: int, rl, backend: str = "dqn",
             settings: GameSettings | None = None, seed: int = 0,
             initial: CoalitionPartition | None = None) -> History:
    """Coalition-formation-guided FL outer loop.

    Every epoch the learner picks a joint coalition choice, the environment
    trains and evaluates it, and ``1 - mean error`` is stored as the reward
    of the transition from the previous partition to the chosen one.
    """
    settings = settings or GameSettings()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    learner = make_learner(backend, n_users, max_coalitions, rl, rng)
    buffer = ReplayBuffer(rl.replay_capacity)
    partition = initial or CoalitionPartition.solo(n_users, max_coalitions)
    history = History()
    for epoch in range(rl.epochs):
        eps = epsilon_at(epoch, rl.epochs, rl.eps_start, rl.eps_end, rl.eps_decay_fraction)
        action = learner.select(partition, eps)
        chosen = CoalitionPartition(tuple(int(a) for a in action), max_coalitions)
        if isinstance(environment, FLEnvironment):
            errors, nbytes = environment.step(chosen, epoch)
        else:
            errors, nbytes = environment.step(chosen)
        e_bar = mean_clipped_error(errors)
        r = reward(e_bar)
        buffer.add(Transition(encode_state(partition), np.asarray(action), r, encode_state(chosen)))
        loss = None
        if len(buffer) >= rl.batch_size:
            for _ in range(rl.train_steps_per_epoch):
                loss = learner.train_step(buffer, rl.batch_size)
        history.records.append(EpochRecord(epoch, chosen.assignment, r, e_bar, dict(errors), int(nbytes),
                                           potential_from_errors(chosen, errors, settings), loss))
        partition = chosen
    return history


CURVE_FIELDS = ["epoch", "reward", "mean_error", "phi"]


def write_curve_csv(path: str | Path, history: History) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
        for r in history.records:
            writer.writerow([r.epoch, f"{r.reward:.12g}", f"{r.mean_error:.12g}", f"{r.potential:.12g}"])
