"""Stochastic environments with labeling functions.

Every environment exposes ``initial_state()``, ``step(state, action, rng)``,
``label(state)`` and the proposition names it can emit.  Discrete-action
environments list their ``actions``; continuous ones give an ``action_box``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ConfigurationError

FIXTURE_DIR = Path(__file__).parent / "fixtures"

EMPTY = frozenset()


@dataclass(frozen=True)
class NoiseSpec:
    """Additive zero-mean Gaussian noise ``scale * w`` with ``w ~ N(0, variance)``."""

    scale: float
    variance: float
    enabled: bool = True

    def sample(self, rng, size) -> np.ndarray:
        if not self.enabled:
            return np.zeros(size)
        return self.scale * rng.normal(0.0, math.sqrt(self.variance), size)


# ---------------------------------------------------------------------------
# office gridworld
# ---------------------------------------------------------------------------

_CELL_PROPS = {
    "c": ("c",),
    "m": ("m",),
    "h": ("h",),
    "t": ("t",),
    "W": ("warm",),
    "B": ("cold",),
    ".": (),
    "o": (),
}

# (row delta, col delta); rows grow southwards
_MOVES = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}
# (left, right) of each heading
_PERP = {"N": ("W", "E"), "S": ("E", "W"), "E": ("N", "S"), "W": ("S", "N")}


class OfficeWorld:
    """Gridworld where a move succeeds w.p. 1/3 and slips sideways otherwise.

    States are integer indices into the non-wall cells (row-major).  Cells
    labelled ``h`` or ``t`` keep the agent in place under every action; a move
    into a wall leaves the agent where it is.
    """

    name = "office"
    discrete = True
    actions = ("N", "S", "E", "W")
    props = ("c", "m", "h", "t", "warm", "cold")

    def __init__(self, rows: Sequence[str]):
        rows = [r.rstrip("\n") for r in rows if r.strip()]
        if not rows:
            raise ConfigurationError("empty office map")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ConfigurationError("office map rows have different lengths")
        self.rows = tuple(rows)
        self.height, self.width = len(rows), width
        self.cells: list[tuple[int, int]] = []
        self._index: dict[tuple[int, int], int] = {}
        labels = []
        starts = []
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch == "#":
                    continue
                if ch not in _CELL_PROPS:
                    raise ConfigurationError(f"unknown map character {ch!r} at row {r}, column {c}")
                self._index[(r, c)] = len(self.cells)
                self.cells.append((r, c))
                labels.append(frozenset(_CELL_PROPS[ch]))
                if ch == "o":
                    starts.append(len(self.cells) - 1)
        if len(starts) != 1:
            raise ConfigurationError(f"office map needs exactly one start cell 'o', found {len(starts)}")
        self.start = starts[0]
        self._labels = labels
        self.stationary = np.array([rows[r][c] in "ht" for r, c in self.cells])
        # successor table: [state, action, branch] for branches (chosen, left, right)
        n = len(self.cells)
        self.next_state = np.empty((n, 4, 3), dtype=np.int64)
        for s, (r, c) in enumerate(self.cells):
            for a, name in enumerate(self.actions):
                for b, heading in enumerate((name,) + _PERP[name]):
                    if self.stationary[s]:
                        self.next_state[s, a, b] = s
                        continue
                    dr, dc = _MOVES[heading]
                    self.next_state[s, a, b] = self._index.get((r + dr, c + dc), s)
        self._next_list = self.next_state.tolist()

    @classmethod
    def from_file(cls, path) -> "OfficeWorld":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def default(cls) -> "OfficeWorld":
        return cls.from_file(FIXTURE_DIR / "office.map")

    @property
    def n_states(self) -> int:
        return len(self.cells)

    def initial_state(self) -> int:
        return self.start

    def step(self, state: int, action: int, rng) -> int:
        return self._next_list[state][action][int(rng.integers(3))]

    def label(self, state: int) -> frozenset:
        return self._labels[state]

    def transition_probs(self, state: int, action: int) -> list[tuple[int, float]]:
        """Exact successor distribution (merged over coinciding branches)."""
        out: dict[int, float] = {}
        for nxt in self._next_list[state][action]:
            out[nxt] = out.get(nxt, 0.0) + 1.0 / 3.0
        return sorted(out.items())

    def key(self, state: int) -> int:
        return state

    @property
    def n_keys(self) -> int:
        return len(self.cells)

    def cell_of(self, state: int) -> tuple[int, int]:
        return self.cells[state]

    def index_of(self, row: int, col: int) -> int:
        return self._index[(row, col)]

    def cells_with(self, prop: str) -> list[int]:
        return [i for i, lab in enumerate(self._labels) if prop in lab]


def office_step(env: OfficeWorld, state: int, action: int, rng) -> int:
    return env.step(state, action, rng)


# ---------------------------------------------------------------------------
# continuous environments
# ---------------------------------------------------------------------------


class BoxEnv:
    """Shared plumbing for environments over a real box."""

    discrete = False
    dim: int
    state_low: np.ndarray
    state_high: np.ndarray
    x0: np.ndarray

    def initial_state(self) -> np.ndarray:
        return np.array(self.x0, dtype=float)

    def features(self, state) -> np.ndarray:
        """State rescaled to [0, 1] per coordinate (unclipped)."""
        return (np.asarray(state, dtype=float) - self.state_low) / (self.state_high - self.state_low)


def _all_in(x, lo, hi, lo_closed=True, hi_closed=True):
    x = np.asarray(x)
    ok_lo = x >= lo if lo_closed else x > lo
    ok_hi = x <= hi if hi_closed else x < hi
    return bool(np.all(ok_lo & ok_hi))


class TwoTank(BoxEnv):
    """Cascade of two tanks with inflow ``u`` into the first one."""

    name = "two_tank"
    dim = 2
    actions = (0.0, 1.5, 4.5, 7.5, 9.0)  # inflow levels selectable by index
    action_box = (np.zeros(1), np.full(1, 9.0))
    props = ("a", "b")
    state_low = np.zeros(2)
    state_high = np.full(2, 100.0)

    def __init__(self, noise: NoiseSpec | None = None, tau: float = 10.0, x0=(5.0, 5.0)):
        self.noise = noise if noise is not None else NoiseSpec(0.01, 0.01)
        self.tau = tau
        self.beta = 0.5 * tau
        self.x0 = np.array(x0, dtype=float)

    def step(self, state, action, rng) -> np.ndarray:
        if isinstance(action, (int, np.integer)):
            u = self.actions[action]
        else:
            u = min(max(float(np.asarray(action, dtype=float).reshape(-1)[0]), 0.0), 9.0)
        x1, x2 = (float(v) for v in state)
        b, tau = self.beta, self.tau
        w = self.noise.sample(rng, 2)
        n1 = (math.sqrt(b * b + x1 + tau * u) - b) ** 2 + w[0]
        n1 = min(max(n1, 0.0), 100.0)
        n2 = (math.sqrt(b * b + x2 + tau * math.sqrt(n1)) - b) ** 2 + w[1]
        n2 = min(max(n2, 0.0), 100.0)
        return np.array([n1, n2])

    def label(self, state) -> frozenset:
        if _all_in(state, 20.0, 70.0):
            return frozenset({"b"})
        if _all_in(state, 0.0, 0.5) or _all_in(state, 80.0, 100.0):
            return frozenset({"a"})
        return EMPTY


class FiveRoom(BoxEnv):
    """Cyclic five-room building; rooms 1 and 3 carry heaters."""

    name = "five_room"
    dim = 5
    action_box = (np.zeros(2), np.ones(2))
    props = ("a", "b", "c", "d")
    state_low = np.full(5, 15.0)
    state_high = np.full(5, 25.0)

    def __init__(
        self,
        noise: NoiseSpec | None = None,
        x0=(19.0,) * 5,
        sigma=0.05,
        beta=0.022,
        xi=0.3,
        t_heater=50.0,
        t_ext=-1.0,
    ):
        self.noise = noise if noise is not None else NoiseSpec(0.01, 0.01)
        self.x0 = np.array(x0, dtype=float)
        self.sigma, self.beta, self.xi = sigma, beta, xi
        self.t_heater, self.t_ext = t_heater, t_ext

    def step(self, state, action, rng) -> np.ndarray:
        x = np.asarray(state, dtype=float)
        u = np.zeros(5)
        u[0], u[2] = np.clip(np.asarray(action, dtype=float), 0.0, 1.0)
        gamma = np.roll(x, -1) + np.roll(x, 1)
        coef = 1.0 - self.beta - 2.0 * self.xi - self.sigma * u
        nxt = coef * x + self.sigma * self.t_heater * u + self.xi * gamma + self.beta * self.t_ext
        nxt = nxt + self.noise.sample(rng, 5)
        return np.clip(nxt, 15.0, 25.0)

    def label(self, state) -> frozenset:
        if _all_in(state, 15.0, 18.5) or _all_in(state, 21.5, 25.0):
            return frozenset({"a"})
        if _all_in(state, 19.5, 20.5):
            return frozenset({"b"})
        if _all_in(state, 18.5, 19.5, False, False):
            return frozenset({"c"})
        if _all_in(state, 20.5, 21.5, False, False):
            return frozenset({"d"})
        return EMPTY


class FiveRoad(BoxEnv):
    """Five-cell ring road with signalled entries into cells 1 and 3.

    Densities are not clamped: leaving ``[0, 10]^5`` is what label ``a`` flags.
    """

    name = "five_road"
    dim = 5
    action_box = (np.zeros(2), np.ones(2))
    props = ("a", "b", "c", "d")
    state_low = np.zeros(5)
    state_high = np.full(5, 10.0)

    def __init__(
        self,
        noise: NoiseSpec | None = None,
        x0=(9.0,) * 5,
        tau_hours=0.0018,
        speed=100.0,
        length=0.5,
        exit_ratio=0.25,
    ):
        self.noise = noise if noise is not None else NoiseSpec(0.7, 0.7)
        self.x0 = np.array(x0, dtype=float)
        self.t_v = tau_hours * speed / length
        self.q = exit_ratio

    def step(self, state, action, rng) -> np.ndarray:
        x = np.asarray(state, dtype=float)
        u1, u3 = np.clip(np.asarray(action, dtype=float), 0.0, 1.0)
        keep = np.full(5, 1.0 - self.t_v)
        keep[[1, 3]] -= self.q
        nxt = keep * x + self.t_v * np.roll(x, 1)
        nxt[0] += 6.0 * u1
        nxt[2] += 8.0 * u3
        return nxt + self.noise.sample(rng, 5)

    def label(self, state) -> frozenset:
        x = np.asarray(state)
        if np.any((x < 0.0) | (x > 10.0)):
            return frozenset({"a"})
        if _all_in(x, 1.0, 8.0):
            return frozenset({"b"})
        if _all_in(x, 0.0, 1.0, False, False):
            return frozenset({"c"})
        if _all_in(x, 8.0, 10.0, False, False):
            return frozenset({"d"})
        return EMPTY


class LineWorld(BoxEnv):
    """One-dimensional toy: position drifts by the action, ``b`` on [4, 6]."""

    name = "line"
    dim = 1
    action_box = (np.array([-1.0]), np.array([1.0]))
    props = ("b",)

    def __init__(self, noise: NoiseSpec | None = None, x0=(0.0,), length=20.0, target=(4.0, 6.0)):
        self.noise = noise if noise is not None else NoiseSpec(0.1, 1.0)
        self.x0 = np.array(x0, dtype=float)
        self.state_low = np.zeros(1)
        self.state_high = np.array([length])
        self.target = target

    def step(self, state, action, rng) -> np.ndarray:
        u = np.clip(np.asarray(action, dtype=float).reshape(-1)[:1], -1.0, 1.0)
        nxt = np.asarray(state, dtype=float) + u + self.noise.sample(rng, 1)
        return np.clip(nxt, self.state_low, self.state_high)

    def label(self, state) -> frozenset:
        return frozenset({"b"}) if _all_in(state, *self.target) else EMPTY


def tank_step(env: TwoTank, state, action, rng):
    return env.step(state, action, rng)


def room_step(env: FiveRoom, state, action, rng):
    return env.step(state, action, rng)


def traffic_step(env: FiveRoad, state, action, rng):
    return env.step(state, action, rng)


def label_of(env, state) -> frozenset:
    return env.label(state)


ENVIRONMENTS = {
    "office": OfficeWorld,
    "two_tank": TwoTank,
    "five_room": FiveRoom,
    "five_road": FiveRoad,
    "line": LineWorld,
}


def make_env(name: str, noise: bool = True, map_path=None, **kwargs):
    """Build an environment by its harness name."""
    if name == "office":
        return OfficeWorld.from_file(map_path) if map_path else OfficeWorld.default()
    if name not in ENVIRONMENTS:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    cls = ENVIRONMENTS[name]
    env = cls(**kwargs)
    if not noise:
        env.noise = NoiseSpec(env.noise.scale, env.noise.variance, enabled=False)
    return env
