"""Exact models of ``office x tabulated machines`` for checking learners.

Product states are indexed ``x * n_m + m``.  Terminal machine states have
no outgoing transitions and zero reward, so every value there is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import ConfigurationError
from .product import JointMachine


@dataclass
class OracleResult:
    v: np.ndarray  # (n_x, n_m)
    q: np.ndarray  # (n_x, n_m, n_a)
    iterations: int
    initial_value: float

    def greedy_sets(self, tol: float = 1e-9) -> np.ndarray:
        return self.q >= self.q.max(axis=-1, keepdims=True) - tol


class ProductModel:
    """Sparse transition matrices and expected rewards per action."""

    def __init__(self, env, joint: JointMachine, max_states: int = 2_000_000):
        if not getattr(env, "discrete", False) or not hasattr(env, "transition_probs"):
            raise ConfigurationError("the product oracle needs an enumerable environment")
        self.env, self.joint = env, joint
        n_x, n_m = env.n_states, joint.n_states
        self.n_x, self.n_m, self.n_a = n_x, n_m, len(env.actions)
        self.n = n_x * n_m
        if self.n > max_states:
            raise ConfigurationError(f"product has {self.n} states, above the limit of {max_states}")
        all_m = np.arange(n_m)
        self.m_next = np.empty((n_x, n_m), dtype=np.int64)
        self.r_next = np.empty((n_x, n_m))
        for x2 in range(n_x):
            nxt, rew = joint.step_many(all_m, joint.masks(env.label(x2)))
            self.m_next[x2], self.r_next[x2] = nxt, rew
        live = np.flatnonzero(~joint.terminal)
        self.live_mask = np.tile(~joint.terminal, n_x)
        self.P, self.R_parts = [], []
        for a in range(self.n_a):
            rows, cols, vals = [], [], []
            for x in range(n_x):
                for x2, p in env.transition_probs(x, a):
                    rows.append(x * n_m + live)
                    cols.append(x2 * n_m + self.m_next[x2, live])
                    vals.append(np.full(len(live), p))
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
            self.P.append(sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n)))
            self.R_parts.append((rows, cols, vals))

    def rewards(self, potential: np.ndarray | None = None, lam: float = 0.9) -> list[np.ndarray]:
        """Expected one-step reward per product state, optionally shaped."""
        out = []
        n_m = self.n_m
        for rows, cols, vals in self.R_parts:
            x2, m2 = cols // n_m, cols % n_m
            m = rows % n_m
            r = self.r_next[x2, m]
            if potential is not None:
                r = r - lam * potential[m2] + potential[m]
            out.append(np.bincount(rows, weights=vals * r, minlength=self.n))
        return out

    def index(self, x: int, m: int) -> int:
        return x * self.n_m + m

    def value_iteration(self, lam: float, potential=None, tol: float = 1e-12, max_iter: int = 100_000) -> OracleResult:
        rewards = self.rewards(potential, lam)
        v = np.zeros(self.n)
        for it in range(1, max_iter + 1):
            q = np.stack([r + lam * (P @ v) for r, P in zip(rewards, self.P)], axis=1)
            v_new = q.max(axis=1)
            if np.max(np.abs(v_new - v)) < tol:
                v = v_new
                break
            v = v_new
        q = np.stack([r + lam * (P @ v) for r, P in zip(rewards, self.P)], axis=1)
        return OracleResult(v.reshape(self.n_x, self.n_m), q.reshape(self.n_x, self.n_m, self.n_a), it, float("nan"))

    def policy_matrix(self, policy: np.ndarray):
        """Markov chain and reward vector of a stochastic policy ``(n_x, n_m, n_a)``."""
        pi = policy.reshape(self.n, self.n_a)
        rewards = self.rewards()
        P = sum(sp.diags(pi[:, a]) @ self.P[a] for a in range(self.n_a))
        r = sum(pi[:, a] * rewards[a] for a in range(self.n_a))
        return sp.csr_matrix(P), r

    def policy_value(self, policy: np.ndarray, lam: float) -> np.ndarray:
        P, r = self.policy_matrix(policy)
        v = spla.spsolve(sp.identity(self.n, format="csc") - lam * P.tocsc(), r)
        return np.asarray(v).reshape(self.n_x, self.n_m)

    def average_reward(self, policy: np.ndarray, start: int, horizon: int) -> tuple[float, float, float]:
        """Long-run reward per step when episodes restart at ``start``.

        Episodes end on a terminal machine state or after ``horizon`` steps.
        Returns ``(rate, expected episode reward, expected episode length)``.
        """
        P, r = self.policy_matrix(policy)
        PT = P.T.tocsr()
        d = np.zeros(self.n)
        d[start] = 1.0
        total_r, total_len = 0.0, 0.0
        for _ in range(horizon):
            alive = float(d.sum())
            if alive < 1e-15:
                break
            total_len += alive
            total_r += float(d @ r)
            d = (PT @ d) * self.live_mask
        return total_r / total_len, total_r, total_len


def greedy_policy(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Uniform distribution over each row's near-maximal actions."""
    best = q >= q.max(axis=-1, keepdims=True) - tol
    return best / best.sum(axis=-1, keepdims=True)
