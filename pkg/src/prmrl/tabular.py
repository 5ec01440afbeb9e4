"""Q-learning over the product of a finite environment and tabulated machines,
with optional counterfactual updates and potential-based shaping."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, HybridState, is_terminal, prm_step
from .product import JointMachine


@dataclass
class TabularParams:
    lam: float = 0.9
    kappa: float = 0.5
    epsilon: float = 0.1
    optimistic_init: float = 2.0
    max_training_steps: int = 50_000
    episode_step_cap: int = 1000
    use_prme: bool = False
    use_shaping: bool = False
    counterfactual_cap: int | None = None  # None: modes x 32
    metric_window: int = 100
    checkpoint_every: int = 100
    shaping_tol: float = 1e-6

    def __post_init__(self):
        for name in ("lam", "kappa", "epsilon"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if self.max_training_steps < 1 or self.episode_step_cap < 1:
            raise ConfigurationError("step budgets must be positive")
        if self.metric_window < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("metric window and checkpoint cadence must be positive")
        if self.counterfactual_cap is not None and self.counterfactual_cap < 1:
            raise ConfigurationError("counterfactual_cap must be at least 1")


class QTable:
    """Dense ``q[x, m, u]`` with visit counts."""

    def __init__(self, n_env: int, n_machine: int, n_actions: int, init: float = 2.0):
        if n_actions < 1:
            raise ConfigurationError("empty action set")
        self.q = np.full((n_env, n_machine, n_actions), float(init))
        self.visits = np.zeros((n_env, n_machine, n_actions), dtype=np.int64)
        self.init = float(init)

    @property
    def shape(self):
        return self.q.shape

    def greedy_sets(self, tol: float = 1e-9) -> np.ndarray:
        """Boolean mask of actions within ``tol`` of the row maximum."""
        return self.q >= self.q.max(axis=-1, keepdims=True) - tol


def epsilon_greedy(values, epsilon: float, rng) -> int:
    """Uniform action w.p. ``epsilon``, else an argmax with random tie-breaking."""
    n = len(values)
    if n == 0:
        raise ConfigurationError("empty action set")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(n))
    best = np.flatnonzero(values == np.max(values))
    if len(best) == 1:
        return int(best[0])
    return int(best[rng.integers(len(best))])


def q_update(q: QTable, x, m, u, r: float, x_next, m_next, terminal: bool, lam: float, kappa: float) -> float:
    """One Bellman update; returns the new entry."""
    target = r if terminal else r + lam * float(np.max(q.q[x_next, m_next]))
    old = q.q[x, m, u]
    q.q[x, m, u] = old + kappa * (target - old)
    q.visits[x, m, u] += 1
    return float(q.q[x, m, u])


def batch_update(q: QTable, x: int, u: int, m, r, x_next: int, m_next, terminal, lam: float, kappa: float) -> None:
    """Apply experiences ``(x, m_j, u, r_j, x', m'_j)`` in order.

    Machine indices ``m`` must be distinct.  The result equals updating one
    experience at a time: when ``x' == x`` an item whose successor row was
    written earlier in the batch is deferred until that write has happened.
    """
    m = np.asarray(m, dtype=np.int64)
    m_next = np.asarray(m_next, dtype=np.int64)
    r = np.asarray(r, dtype=float)
    live = ~np.asarray(terminal, dtype=bool)
    qx = q.q[x]
    qn = q.q[x_next]
    n = len(m)
    level = None
    if x_next == x and n > 1:
        pos = np.full(qx.shape[0], n, dtype=np.int64)
        pos[m] = np.arange(n)
        writer = pos[m_next]
        late = np.flatnonzero(live & (writer < np.arange(n)))
        if len(late):
            level = np.zeros(n, dtype=np.int64)
            for j in late.tolist():
                level[j] = level[writer[j]] + 1
    if level is None:
        target = r + lam * np.where(live, qn[m_next].max(axis=1), 0.0)
        qx[m, u] += kappa * (target - qx[m, u])
    else:
        for lv in range(int(level.max()) + 1):
            sel = np.flatnonzero(level == lv)
            ms, mn = m[sel], m_next[sel]
            target = r[sel] + lam * np.where(live[sel], qn[mn].max(axis=1), 0.0)
            qx[ms, u] += kappa * (target - qx[ms, u])
    q.visits[x, m, u] += 1


@dataclass
class TabularResult:
    q: QTable
    steps: np.ndarray
    avg_reward: np.ndarray
    rewards: np.ndarray
    episodes: int
    updates: int
    runtime: float
    snapshots: dict = field(default_factory=dict)


def window_average(rewards: np.ndarray, every: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Average reward per step over the last ``window`` steps at every checkpoint."""
    n = len(rewards)
    cum = np.concatenate([[0.0], np.cumsum(rewards)])
    steps = np.arange(every, n + 1, every)
    lo = np.maximum(steps - window, 0)
    return steps, (cum[steps] - cum[lo]) / (steps - lo)


class _Counterfactuals:
    """Selects and evaluates counterfactual machine states for one step."""

    def __init__(self, joint: JointMachine, cap: int, prms):
        self.joint = joint
        self.cap = cap
        self.prms = prms
        self.n = joint.n_nonterminal
        self.all_joint = joint.nonterminal_joint()
        self.pos_of = {int(j): i for i, j in enumerate(self.all_joint)}
        self.uses_step = any(p.uses_step for p in prms)

    def select(self, actual: int, rng) -> np.ndarray:
        """Joint indices of the other states, sorted, at most ``cap - 1``."""
        p = self.pos_of.get(actual)
        others = self.n - (p is not None)
        budget = self.cap - 1
        if budget <= 0 or others <= 0:
            return np.empty(0, dtype=np.int64)
        if others <= budget:
            idx = self.all_joint
            return idx[idx != actual] if p is not None else idx
        picks = np.sort(rng.choice(others, size=budget, replace=False))
        if p is not None:
            picks[picks >= p] += 1
        return self.all_joint[picks]

    def evaluate(self, joint_idx: np.ndarray, env_label, step: int):
        masks = self.joint.masks(env_label)
        if not self.uses_step:
            return self.joint.step_many(joint_idx, masks)
        # step-dependent guards: replay from cell centres at the live step count
        parts = self.joint.decode(joint_idx)
        nxt = np.zeros(len(joint_idx), dtype=np.int64)
        rew = np.zeros(len(joint_idx))
        for t, idx, prm, lab, stride in zip(self.joint.tables, parts, self.prms, self.joint.labelers, self.joint.strides):
            label = lab(env_label)
            for j, s in enumerate(idx.tolist()):
                c = t.disc.states[s]
                hs, r = prm_step(prm, HybridState(c.mode, c.psi, step), label)
                nxt[j] += t.disc.index(hs) * stride
                rew[j] += r
        return nxt, rew / len(self.prms)


def default_cap(prms) -> int:
    return int(np.prod([p.n_modes for p in prms])) * 32


def train_tabular(env, prms, joint: JointMachine, params: TabularParams, seed: int, snapshot_steps=()) -> TabularResult:
    """Q-learning on ``env x machines``.

    ``joint`` carries the tabulated machines, labelers and (when shaping)
    the joint potential.  Rewards in the metric are unshaped.
    """
    rng = np.random.default_rng(seed)
    prms = list(prms)
    labelers = joint.labelers
    n_actions = len(env.actions)
    q = QTable(env.n_keys, joint.n_states, n_actions, params.optimistic_init)
    lam, kappa, eps = params.lam, params.kappa, params.epsilon
    phi = joint.potential if params.use_shaping else None
    cf = None
    if params.use_prme:
        cap = params.counterfactual_cap or default_cap(prms)
        cf = _Counterfactuals(joint, cap, prms)
    snapshot_steps = set(int(s) for s in snapshot_steps)
    snapshots = {}

    rewards = np.zeros(params.max_training_steps)
    episodes, updates = 0, 0
    t0 = time.perf_counter()

    def reset():
        hs = tuple(p.initial_state() for p in prms)
        return env.initial_state(), hs, joint.index(hs)

    x, hs, m = reset()
    ep_len = 0
    for t in range(params.max_training_steps):
        u = epsilon_greedy(q.q[x, m], eps, rng)
        x2 = env.step(x, u, rng)
        label = env.label(x2)
        hs2, total = [], 0.0
        for prm, h, lab in zip(prms, hs, labelers):
            h2, ri = prm_step(prm, h, lab(label))
            hs2.append(h2)
            total += ri
        hs2 = tuple(hs2)
        r = total / len(prms)
        m2 = joint.index(hs2)
        done = any(is_terminal(p, h) for p, h in zip(prms, hs2))
        rewards[t] = r

        r_hat = r if phi is None else r - lam * phi[m2] + phi[m]
        if cf is None:
            q_update(q, x, m, u, r_hat, x2, m2, done, lam, kappa)
            updates += 1
        else:
            others = cf.select(m, rng)
            o_next, o_rew = cf.evaluate(others, label, hs[0].step)
            ms = np.concatenate([[m], others])
            mn = np.concatenate([[m2], o_next])
            rs = np.concatenate([[r], o_rew])
            if phi is not None:
                rs = rs - lam * phi[mn] + phi[ms]
            term = np.concatenate([[done], joint.terminal[o_next]])
            batch_update(q, x, u, ms, rs, x2, mn, term, lam, kappa)
            updates += len(ms)

        ep_len += 1
        if (t + 1) in snapshot_steps:
            snapshots[t + 1] = q.q.copy()
        if done or ep_len >= params.episode_step_cap:
            episodes += 1
            ep_len = 0
            x, hs, m = reset()
        else:
            x, hs, m = x2, hs2, m2

    steps, avg = window_average(rewards, params.checkpoint_every, params.metric_window)
    return TabularResult(q, steps, avg, rewards, episodes, updates, time.perf_counter() - t0, snapshots)
