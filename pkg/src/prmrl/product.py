"""Synchronous product of an environment with one or more machines.

Environment labels are mapped into each machine's alphabet by a labeler:
an optional alias map (machine symbol -> environment symbol) followed by
restriction to the machine's propositions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    Discretization,
    HybridState,
    PrmDefinition,
    is_terminal,
    prm_step,
)


@dataclass(frozen=True)
class Experience:
    x: Any
    rho: Any
    u: Any
    r: float
    x_next: Any
    rho_next: Any


@dataclass(frozen=True)
class ProductState:
    x: Any
    machines: tuple[HybridState, ...]

    def __post_init__(self):
        if len(self.machines) < 1:
            raise ConfigurationError("a product state needs at least one machine state")


def make_labeler(prm: PrmDefinition, aliases: Mapping[str, str] | None = None) -> Callable[[frozenset], frozenset]:
    """Map environment labels into ``prm``'s alphabet.

    ``aliases`` renames environment symbols: ``{"a": "h"}`` makes the
    machine see ``a`` whenever the environment emits ``h``.
    """
    symbols = prm.props.symbols
    if aliases:
        unknown = set(aliases) - set(symbols)
        if unknown:
            raise ConfigurationError(f"aliases for unknown propositions {sorted(unknown)}")
        source = {s: aliases.get(s, s) for s in symbols}
    else:
        source = {s: s for s in symbols}
    cache: dict[frozenset, frozenset] = {}

    def labeler(label: frozenset) -> frozenset:
        out = cache.get(label)
        if out is None:
            out = frozenset(s for s in symbols if source[s] in label)
            cache[label] = out
        return out

    return labeler


def _identity_labeler(prm):
    return lambda label: prm.props.restrict(label)


def product_step(env, machines: Sequence[PrmDefinition], state: ProductState, action, rng, labelers=None):
    """Sample ``x'`` and advance every machine on ``L(x')``.

    Returns ``(next_state, reward, done)`` with the reward averaged over the
    machines and ``done`` set when any machine is terminal.
    """
    if len(machines) != len(state.machines):
        raise ConfigurationError(f"{len(machines)} machines but {len(state.machines)} machine states")
    if labelers is None:
        labelers = [_identity_labeler(m) for m in machines]
    x_next = env.step(state.x, action, rng)
    label = env.label(x_next)
    new_states, total = [], 0.0
    for prm, hs, lab in zip(machines, state.machines, labelers):
        nxt, r = prm_step(prm, hs, lab(label))
        new_states.append(nxt)
        total += r
    done = any(is_terminal(prm, hs) for prm, hs in zip(machines, new_states))
    return ProductState(x_next, tuple(new_states)), total / len(machines), done


def counterfactual_experiences(
    x,
    u,
    x_next,
    machine: PrmDefinition,
    states: Sequence[HybridState],
    cap: float,
    rng,
    label=None,
    actual: HybridState | None = None,
    discretization: Discretization | None = None,
) -> list[Experience]:
    """Replay one environment transition from many machine states.

    ``states`` are the discretized non-terminal machine states.  When every
    state fits under ``cap`` all of them are used in order; otherwise a
    uniform sample without replacement is drawn (kept in enumeration order).
    With ``actual`` given, its own experience comes first and the state
    sharing its grid cell (per ``discretization``) is skipped, so ``cap=1``
    yields the actual experience alone.  ``label`` is ``L(x')`` already
    mapped into the machine's alphabet.
    """
    if len(states) == 0:
        raise ConfigurationError("no non-terminal machine states to replay from")
    if cap < 1:
        raise ConfigurationError("counterfactual cap must be at least 1")
    if label is None:
        raise ConfigurationError("counterfactual_experiences needs the label of x'")
    out: list[Experience] = []
    pool = list(states)
    budget = cap
    if actual is not None:
        nxt, r = prm_step(machine, actual, label)
        out.append(Experience(x, actual, u, r, x_next, nxt))
        budget = cap - 1
        if discretization is None:
            raise ConfigurationError("the discretization is needed to place the actual experience")
        if not is_terminal(machine, actual):
            own = discretization.index(actual)
            pool = [s for s in pool if discretization.index(s) != own]
    if budget <= 0:
        return out
    if len(pool) > budget:
        picked = np.sort(rng.choice(len(pool), size=int(budget), replace=False))
        pool = [pool[i] for i in picked]
    step = actual.step if actual is not None else None
    for s in pool:
        if step is not None and s.step != step:
            s = HybridState(s.mode, s.psi, step)
        nxt, r = prm_step(machine, s, label)
        out.append(Experience(x, s, u, r, x_next, nxt))
    return out


# ---------------------------------------------------------------------------
# tabulated machines
# ---------------------------------------------------------------------------


class MachineTable:
    """Transition and reward tables of a discretized machine.

    ``next[s, mask]`` and ``reward[s, mask]`` give the successor cell index
    and edge reward from the centre of cell ``s`` on the label with bitmask
    ``mask``.  Step-dependent guards are evaluated at ``k = 1``.  Terminal
    rows self-loop with reward 0.
    """

    def __init__(self, disc: Discretization):
        prm = disc.prm
        self.disc = disc
        self.prm = prm
        n, n_labels = len(disc), 1 << len(prm.props)
        labels = prm.props.all_labels()
        self.next = np.empty((n, n_labels), dtype=np.int64)
        self.reward = np.zeros((n, n_labels))
        for s, hs in enumerate(disc.states):
            if disc.terminal[s]:
                self.next[s] = s
                continue
            for mask, lab in enumerate(labels):
                nxt, r = prm_step(prm, hs, lab)
                self.next[s, mask] = disc.index(nxt)
                self.reward[s, mask] = r
        self.terminal = disc.terminal.copy()
        self.nonterminal = disc.nonterminal_indices.copy()

    @property
    def n_states(self) -> int:
        return len(self.disc)

    @property
    def n_labels(self) -> int:
        return self.next.shape[1]

    def max_abs_reward(self) -> float:
        return float(np.max(np.abs(self.reward))) if self.reward.size else 0.0


class JointMachine:
    """Mixed-radix product of several tabulated machines.

    Joint index ``sum(idx_i * stride_i)`` with machine 0 most significant.
    Rewards and potentials are averaged over machines.
    """

    def __init__(self, tables: Sequence[MachineTable], labelers=None):
        if not tables:
            raise ConfigurationError("at least one machine is required")
        self.tables = list(tables)
        self.labelers = list(labelers) if labelers is not None else [_identity_labeler(t.prm) for t in tables]
        self.sizes = tuple(t.n_states for t in tables)
        self.strides = tuple(int(np.prod(self.sizes[i + 1 :])) for i in range(len(tables)))
        self.n_states = int(np.prod(self.sizes))
        grids = np.meshgrid(*[t.terminal for t in tables], indexing="ij")
        self.terminal = np.logical_or.reduce([g.reshape(-1) for g in grids]) if grids else np.zeros(1, bool)
        self.nonterminal_sizes = tuple(len(t.nonterminal) for t in tables)
        self.n_nonterminal = int(np.prod(self.nonterminal_sizes))
        self._mask_cache: dict[frozenset, tuple[int, ...]] = {}
        self.potential = np.zeros(self.n_states)

    @property
    def n_machines(self) -> int:
        return len(self.tables)

    def masks(self, env_label: frozenset) -> tuple[int, ...]:
        m = self._mask_cache.get(env_label)
        if m is None:
            m = tuple(t.prm.props.mask(lab(env_label)) for t, lab in zip(self.tables, self.labelers))
            self._mask_cache[env_label] = m
        return m

    def encode(self, indices: Sequence[int]) -> int:
        return int(sum(i * s for i, s in zip(indices, self.strides)))

    def decode(self, joint):
        return tuple((np.asarray(joint) // s) % n for s, n in zip(self.strides, self.sizes))

    def index(self, states: Sequence[HybridState]) -> int:
        return self.encode([t.disc.index(hs) for t, hs in zip(self.tables, states)])

    def set_potentials(self, potentials: Sequence[np.ndarray]) -> None:
        """Joint potential is the mean of per-machine potentials."""
        parts = np.meshgrid(*[np.asarray(p, dtype=float) for p in potentials], indexing="ij")
        self.potential = sum(p.reshape(-1) for p in parts) / len(parts)

    def nonterminal_joint(self, picks=None) -> np.ndarray:
        """Joint indices of all-nonterminal states, enumeration order.

        ``picks`` optionally selects flat positions in that enumeration.
        """
        if picks is None:
            picks = np.arange(self.n_nonterminal)
        local = np.unravel_index(np.asarray(picks, dtype=np.int64), self.nonterminal_sizes)
        joint = np.zeros(len(np.atleast_1d(picks)), dtype=np.int64)
        for t, loc, stride in zip(self.tables, local, self.strides):
            joint += t.nonterminal[loc] * stride
        return joint

    def step_many(self, joint: np.ndarray, masks: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Successor joint indices and averaged rewards for many joint states."""
        parts = self.decode(joint)
        nxt = np.zeros(len(joint), dtype=np.int64)
        rew = np.zeros(len(joint))
        for t, idx, mask, stride in zip(self.tables, parts, masks, self.strides):
            nxt += t.next[idx, mask] * stride
            rew += t.reward[idx, mask]
        return nxt, rew / len(self.tables)
