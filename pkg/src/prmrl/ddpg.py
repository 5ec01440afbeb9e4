"""Actor-critic learning over continuous product spaces with counterfactual
replay and optional potential-based shaping."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, HybridState, is_terminal, prm_step
from .nn import Adam, Mlp, actor_gradients, interleave, mlp_gradients, soft_update
from .product import JointMachine
from .tabular import window_average


@dataclass
class DdpgParams:
    lam: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    hidden: tuple = (64, 64)
    batch_base: int = 128
    batch_cap: int = 1024
    buffer_base: int = 50_000
    target_every: int = 300
    target_rate: float = 1.0
    noise_scale: float = 0.1  # fraction of the action half-width
    max_training_steps: int = 20_000
    episode_step_cap: int = 1000
    warmup_steps: int = 0
    use_prme: bool = False
    use_shaping: bool = False
    counterfactual_cap: int | None = None  # None: every non-terminal cell
    metric_window: int = 100
    checkpoint_every: int = 100
    eval_episodes: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.lam < 1.0:
            raise ConfigurationError("lam must lie in [0, 1)")
        if not 0.0 <= self.target_rate <= 1.0:
            raise ConfigurationError("target_rate must lie in [0, 1]")
        if self.target_every < 1 or self.batch_base < 1 or self.buffer_base < 1:
            raise ConfigurationError("batch, buffer and target cadence must be positive")


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored as feature arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, s, a, r, s2, done) -> None:
        """Append one transition or a batch (leading axis), evicting the oldest."""
        s = np.atleast_2d(s)
        n = len(s)
        idx = (self.inserted + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = np.atleast_2d(a)
        self.r[idx] = r
        self.s2[idx] = np.atleast_2d(s2)
        self.done[idx] = done
        self.inserted += n

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        n = len(self)
        start = self.inserted - n
        return (start + np.arange(n)) % self.capacity

    def sample(self, batch: int, rng):
        """Uniform sample with replacement over the current contents."""
        if len(self) == 0:
            raise ConfigurationError("cannot sample from an empty buffer")
        idx = rng.integers(len(self), size=batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


class Featurizer:
    """Network input: environment state scaled to its box, then per machine a
    one-hot mode and ``psi`` scaled to ``[0, 1]`` by its bounds."""

    def __init__(self, env, prms):
        self.env = env
        self.prms = list(prms)
        self.lows = [np.array([lo for lo, _ in p.psi_bounds], dtype=float) for p in self.prms]
        self.spans = [
            np.array([(hi - lo) if hi > lo else 1.0 for lo, hi in p.psi_bounds], dtype=float) for p in self.prms
        ]
        self.dim = env.dim + sum(p.n_modes + p.psi_dim for p in self.prms)

    def __call__(self, x, states) -> np.ndarray:
        parts = [self.env.features(x)]
        for p, hs, lo, span in zip(self.prms, states, self.lows, self.spans):
            onehot = np.zeros(p.n_modes)
            onehot[hs.mode] = 1.0
            parts.append(onehot)
            if p.psi_dim:
                parts.append((np.asarray(hs.psi, dtype=float) - lo) / span)
        return np.concatenate(parts)


def critic_target(r, s2, done, actor_t: Mlp, critic_t: Mlp, lam: float):
    """``r`` for terminal successors, else ``r + lam * Q'(s', mu'(s'))``."""
    r = np.asarray(r, dtype=float)
    s2 = np.atleast_2d(s2)
    a2 = actor_t.forward(s2)
    q2 = critic_t.forward(np.concatenate([s2, a2], axis=1))[:, 0]
    return np.where(np.asarray(done, dtype=bool), r, r + lam * q2)


def joint_counterfactuals(joint: JointMachine, prms, actual, env_label, cap, rng, step: int):
    """Actual machine transition followed by replays from other grid states.

    Returns a list of ``(states, next_states, reward)``; the replayed states
    are cell centres (all of them if they fit under ``cap``), taken at the
    live step count ``step``.
    """
    labels = [lab(env_label) for lab in joint.labelers]
    out = []
    nxt, total = [], 0.0
    for p, hs, lab in zip(prms, actual, labels):
        h2, r = prm_step(p, hs, lab)
        nxt.append(h2)
        total += r
    out.append((tuple(actual), tuple(nxt), total / len(prms)))
    own = joint.index(actual) if not any(is_terminal(p, h) for p, h in zip(prms, actual)) else -1
    every = joint.nonterminal_joint()
    pool = every[every != own]
    budget = (cap if cap is not None else len(pool) + 1) - 1
    if budget <= 0 or len(pool) == 0:
        return out
    if len(pool) > budget:
        pool = pool[np.sort(rng.choice(len(pool), size=budget, replace=False))]
    parts = joint.decode(pool)
    for j in range(len(pool)):
        states, nexts, total = [], [], 0.0
        for t, idx, p, lab in zip(joint.tables, parts, prms, labels):
            c = t.disc.states[int(idx[j])]
            hs = HybridState(c.mode, c.psi, step)
            h2, r = prm_step(p, hs, lab)
            states.append(hs)
            nexts.append(h2)
            total += r
        out.append((tuple(states), tuple(nexts), total / len(prms)))
    return out


@dataclass
class DdpgResult:
    actor: Mlp
    critic: Mlp
    steps: np.ndarray
    avg_reward: np.ndarray
    rewards: np.ndarray
    episodes: int
    inserts: int
    runtime: float
    eval_reward: float = float("nan")
    extras: dict = field(default_factory=dict)


def _potential_of(joint: JointMachine, states) -> float:
    return float(joint.potential[joint.index(states)])


def evaluate_policy(env, prms, labelers, policy, episodes: int, cap: int, rng) -> float:
    """Average reward per step of ``policy(x, states)`` over fresh episodes."""
    total, steps = 0.0, 0
    for _ in range(episodes):
        x = env.initial_state()
        hs = tuple(p.initial_state() for p in prms)
        for _ in range(cap):
            x = env.step(x, policy(x, hs), rng)
            label = env.label(x)
            new, r = [], 0.0
            for p, h, lab in zip(prms, hs, labelers):
                h2, ri = prm_step(p, h, lab(label))
                new.append(h2)
                r += ri
            hs = tuple(new)
            total += r / len(prms)
            steps += 1
            if any(is_terminal(p, h) for p, h in zip(prms, hs)):
                break
    return total / max(steps, 1)


def ddpg_train(env, prms, joint: JointMachine, params: DdpgParams, seed: int) -> DdpgResult:
    """DDPG on ``env x machines``; rewards in the metric are unshaped."""
    if getattr(env, "discrete", False) or not hasattr(env, "action_box"):
        raise ConfigurationError(f"environment {env.name} has no continuous action box")
    rng = np.random.default_rng(seed)
    prms = list(prms)
    labelers = joint.labelers
    feat = Featurizer(env, prms)
    lo, hi = (np.asarray(v, dtype=float) for v in env.action_box)
    half = (hi - lo) / 2.0
    n_act = len(lo)

    h = joint.n_nonterminal if params.use_prme else 1
    if params.use_prme and params.counterfactual_cap is not None:
        h = min(h, params.counterfactual_cap)
    batch = min(params.batch_base * h, params.batch_cap)
    buffer = ReplayBuffer(params.buffer_base * h, feat.dim, n_act)

    net_rng = np.random.default_rng([seed, 1])
    actor = Mlp([feat.dim, *params.hidden, n_act], net_rng, output="tanh", box=(lo, hi))
    critic = Mlp([feat.dim + n_act, *params.hidden, 1], net_rng)
    actor_t, critic_t = actor.copy(), critic.copy()
    opt_a = Adam(actor.params, params.actor_lr)
    opt_c = Adam(critic.params, params.critic_lr)
    lam = params.lam
    shaping = params.use_shaping

    rewards = np.zeros(params.max_training_steps)
    episodes, inserts, grad_steps = 0, 0, 0
    t0 = time.perf_counter()

    def reset():
        return env.initial_state(), tuple(p.initial_state() for p in prms)

    x, hs = reset()
    ep_len = 0
    for t in range(params.max_training_steps):
        s = feat(x, hs)
        if t < params.warmup_steps:
            u = rng.uniform(lo, hi)
        else:
            u = actor.forward(s[None, :])[0] + rng.normal(0.0, params.noise_scale, n_act) * half
            u = np.clip(u, lo, hi)
        x2 = env.step(x, u, rng)
        label = env.label(x2)

        if params.use_prme:
            batch_exp = joint_counterfactuals(joint, prms, hs, label, params.counterfactual_cap, rng, hs[0].step)
        else:
            nxt, total = [], 0.0
            for p, hcur, lab in zip(prms, hs, labelers):
                h2, ri = prm_step(p, hcur, lab(label))
                nxt.append(h2)
                total += ri
            batch_exp = [(hs, tuple(nxt), total / len(prms))]
        hs2, r = batch_exp[0][1], batch_exp[0][2]
        done = any(is_terminal(p, hh) for p, hh in zip(prms, hs2))
        rewards[t] = r

        S, S2, R, D = [], [], [], []
        for states, nexts, rr in batch_exp:
            S.append(feat(x, states))
            S2.append(feat(x2, nexts))
            if shaping:
                rr = rr - lam * _potential_of(joint, nexts) + _potential_of(joint, states)
            R.append(rr)
            D.append(any(is_terminal(p, hh) for p, hh in zip(prms, nexts)))
        buffer.add(np.array(S), np.repeat(u[None, :], len(S), axis=0), np.array(R), np.array(S2), np.array(D))
        inserts += len(S)

        if len(buffer) >= min(batch, params.batch_base) and t >= params.warmup_steps:
            bs, ba, br, bs2, bd = buffer.sample(batch, rng)
            y = critic_target(br, bs2, bd, actor_t, critic_t, lam)
            gW, gb = mlp_gradients(critic, np.concatenate([bs, ba], axis=1), y[:, None])
            opt_c.step(interleave(gW, gb))
            gW, gb = actor_gradients(actor, critic, bs)
            opt_a.step(interleave(gW, gb))
            grad_steps += 1
            if grad_steps % params.target_every == 0:
                soft_update(actor_t, actor, params.target_rate)
                soft_update(critic_t, critic, params.target_rate)

        ep_len += 1
        if done or ep_len >= params.episode_step_cap:
            episodes += 1
            ep_len = 0
            x, hs = reset()
        else:
            x, hs = x2, hs2

    steps, avg = window_average(rewards, params.checkpoint_every, params.metric_window)
    eval_rng = np.random.default_rng([seed, 2])
    greedy = evaluate_policy(
        env,
        prms,
        labelers,
        lambda xx, ss: actor.forward(feat(xx, ss)[None, :])[0],
        params.eval_episodes,
        params.episode_step_cap,
        eval_rng,
    )
    return DdpgResult(actor, critic, steps, avg, rewards, episodes, inserts, time.perf_counter() - t0, greedy)


def random_baseline(env, prms, labelers, episodes: int, cap: int, seed: int) -> float:
    """Average reward per step of uniformly random actions."""
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(v, dtype=float) for v in env.action_box)
    return evaluate_policy(env, prms, labelers, lambda x, s: rng.uniform(lo, hi), episodes, cap, rng)
