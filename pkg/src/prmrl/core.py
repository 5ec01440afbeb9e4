"""Physics-informed reward machines: definitions and hybrid step semantics.

A machine state pairs a discrete mode with a continuous vector ``psi``.  On
every step the continuous part is advanced under the mode's affine flow for
one sampling interval, then the outgoing edge whose guard holds for the
observed label (and the advanced ``psi``) is taken and its reward emitted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class PrmError(Exception):
    """Base class for machine errors."""


class DefinitionError(PrmError):
    """Malformed machine definition (dimensions, references, rewards)."""


class NumericError(PrmError):
    """Non-finite continuous state."""


class TotalityError(PrmError):
    """No edge, or more than one edge, is enabled for a label."""


class ConfigurationError(PrmError):
    """Invalid discretization or environment configuration."""


Label = frozenset  # a set of proposition names; an element of 2^props


# ---------------------------------------------------------------------------
# propositions and guards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropositionSet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DefinitionError(f"duplicate proposition in {self.symbols}")
        for s in self.symbols:
            if not isinstance(s, str) or not s:
                raise DefinitionError(f"invalid proposition name {s!r}")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, name):
        return name in self.symbols

    def mask(self, label: Iterable[str]) -> int:
        """Bitmask of ``label`` over the ordered symbols; foreign names are ignored."""
        m = 0
        for i, s in enumerate(self.symbols):
            if s in label:
                m |= 1 << i
        return m

    def label(self, mask: int) -> Label:
        return frozenset(s for i, s in enumerate(self.symbols) if mask >> i & 1)

    def restrict(self, label: Iterable[str]) -> Label:
        return frozenset(s for s in label if s in self.symbols)

    def all_labels(self) -> list[Label]:
        return [self.label(m) for m in range(1 << len(self.symbols))]


class Formula:
    """Boolean formula over proposition names."""

    def holds(self, label) -> bool:
        raise NotImplementedError

    def names(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class TrueF(Formula):
    def holds(self, label):
        return True

    def names(self):
        return set()


@dataclass(frozen=True)
class Prop(Formula):
    name: str

    def holds(self, label):
        return self.name in label

    def names(self):
        return {self.name}


@dataclass(frozen=True)
class Not(Formula):
    arg: Formula

    def holds(self, label):
        return not self.arg.holds(label)

    def names(self):
        return self.arg.names()


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula

    def holds(self, label):
        return self.left.holds(label) and self.right.holds(label)

    def names(self):
        return self.left.names() | self.right.names()


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula

    def holds(self, label):
        return self.left.holds(label) or self.right.holds(label)

    def names(self):
        return self.left.names() | self.right.names()


@dataclass(frozen=True)
class Interval:
    """Constraint ``coeffs . psi + k_coeff * k + offset`` in an interval.

    Bounds may be infinite; ``lo_closed``/``hi_closed`` select ``[``/``(``.
    """

    coeffs: tuple[float, ...]
    k_coeff: float
    offset: float
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def value(self, psi: Sequence[float], k: int = 0) -> float:
        v = self.offset + self.k_coeff * k
        for c, p in zip(self.coeffs, psi):
            if c:
                v += c * p
        return v

    def holds(self, psi: Sequence[float], k: int = 0) -> bool:
        v = self.value(psi, k)
        lo_ok = v >= self.lo if self.lo_closed else v > self.lo
        if not lo_ok:
            return False
        return v <= self.hi if self.hi_closed else v < self.hi

    def holds_many(self, psis: np.ndarray, k) -> np.ndarray:
        """Vectorized ``holds`` over rows of ``psis``; ``k`` may be an array."""
        v = psis @ np.asarray(self.coeffs, dtype=float) if psis.shape[1] else np.zeros(len(psis))
        v = v + self.offset + self.k_coeff * np.asarray(k, dtype=float)
        lo_ok = v >= self.lo if self.lo_closed else v > self.lo
        hi_ok = v <= self.hi if self.hi_closed else v < self.hi
        return lo_ok & hi_ok


@dataclass(frozen=True)
class Guard:
    formula: Formula
    predicates: tuple[Interval, ...] = ()

    def holds(self, label, psi: Sequence[float], k: int = 0) -> bool:
        if not self.formula.holds(label):
            return False
        for p in self.predicates:
            if not p.holds(psi, k):
                return False
        return True

    @property
    def uses_step(self) -> bool:
        return any(p.k_coeff != 0 for p in self.predicates)


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSpec:
    """Affine vector field ``dpsi/dt = A psi + b``."""

    matrix: tuple[tuple[float, ...], ...]
    offset: tuple[float, ...]
    _diag: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.offset)
        if len(self.matrix) != n or any(len(row) != n for row in self.matrix):
            raise DefinitionError(f"flow matrix is not {n}x{n}")
        diagonal = all(self.matrix[i][j] == 0.0 for i in range(n) for j in range(n) if i != j)
        diag = tuple(self.matrix[i][i] for i in range(n)) if diagonal else None
        object.__setattr__(self, "_diag", diag)

    @classmethod
    def zero(cls, dim: int) -> "FlowSpec":
        return cls(tuple((0.0,) * dim for _ in range(dim)), (0.0,) * dim)

    @classmethod
    def constant(cls, rates: Sequence[float]) -> "FlowSpec":
        n = len(rates)
        return cls(tuple((0.0,) * n for _ in range(n)), tuple(float(r) for r in rates))

    @property
    def dim(self) -> int:
        return len(self.offset)

    @property
    def is_diagonal(self) -> bool:
        return self._diag is not None

    def rate(self, psi: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float).reshape(self.dim, self.dim) @ psi + np.asarray(self.offset)


def rk4(f, y0: np.ndarray, dt: float, substeps: int = 100) -> np.ndarray:
    """Classical fixed-step Runge-Kutta over ``[0, dt]`` for an autonomous field."""
    h = dt / substeps
    y = np.array(y0, dtype=float)
    for _ in range(substeps):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def flow_step(
    flow: FlowSpec,
    psi: Sequence[float],
    dt: float,
    bounds: Sequence[tuple[float, float]] | None = None,
    method: str = "auto",
) -> tuple[float, ...]:
    """Advance ``psi`` by ``dt`` under ``flow`` and clamp to ``bounds``.

    ``method`` is ``"auto"`` (closed form for diagonal fields, RK4 otherwise),
    ``"exact"`` or ``"rk4"``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if len(psi) != flow.dim:
        raise DefinitionError(f"flow has dimension {flow.dim}, psi has {len(psi)}")
    for p in psi:
        if not math.isfinite(p):
            raise NumericError(f"non-finite psi {tuple(psi)}")

    if method == "auto":
        method = "exact" if flow.is_diagonal else "rk4"
    if method == "exact":
        if not flow.is_diagonal:
            raise DefinitionError("closed-form integration needs a diagonal flow matrix")
        out = []
        for a, b, p in zip(flow._diag, flow.offset, psi):
            if a == 0.0:
                out.append(p + b * dt)
            else:
                # p + (e^{a dt} - 1)/a * (a p + b), stable for small a
                out.append(p + math.expm1(a * dt) / a * (a * p + b))
    elif method == "rk4":
        A = np.asarray(flow.matrix, dtype=float).reshape(flow.dim, flow.dim)
        b = np.asarray(flow.offset, dtype=float)
        out = rk4(lambda y: A @ y + b, np.asarray(psi, dtype=float), dt).tolist()
    else:
        raise ValueError(f"unknown integration method {method!r}")

    if bounds is not None:
        out = [min(max(v, lo), hi) for v, (lo, hi) in zip(out, bounds)]
    for v in out:
        if not math.isfinite(v):
            raise NumericError(f"flow produced non-finite psi {tuple(out)}")
    return tuple(float(v) for v in out)


# ---------------------------------------------------------------------------
# machines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    guard: Guard
    target: int
    reward: float
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Mode:
    name: str
    flow: FlowSpec
    edges: tuple[Edge, ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Terminal:
    mode: int
    predicates: tuple[Interval, ...] = ()


@dataclass(frozen=True)
class HybridState:
    mode: int
    psi: tuple[float, ...]
    step: int = 0


@dataclass(frozen=True)
class PrmDefinition:
    """An immutable physics-informed reward machine."""

    name: str
    props: PropositionSet
    var_names: tuple[str, ...]
    psi_init: tuple[float, ...]
    psi_bounds: tuple[tuple[float, float], ...]
    modes: tuple[Mode, ...]
    initial_mode: int
    terminals: tuple[Terminal, ...] = ()
    params: tuple[tuple[str, float], ...] = ()
    tau: float = 1.0

    def __post_init__(self):
        n = len(self.var_names)
        if len(self.psi_init) != n or len(self.psi_bounds) != n:
            raise DefinitionError("psi_init/psi_bounds do not match the variable count")
        if not 0 <= self.initial_mode < len(self.modes):
            raise DefinitionError(f"initial mode {self.initial_mode} does not exist")
        if not self.tau > 0:
            raise DefinitionError("tau must be positive")
        for mode in self.modes:
            if mode.flow.dim != n:
                raise DefinitionError(f"mode {mode.name}: flow dimension {mode.flow.dim} != {n}")
            for e in mode.edges:
                if not 0 <= e.target < len(self.modes):
                    raise DefinitionError(f"mode {mode.name}: edge target {e.target} does not exist")
                if not math.isfinite(e.reward):
                    raise DefinitionError(f"mode {mode.name}: non-finite edge reward")
                for p in e.guard.predicates:
                    if len(p.coeffs) != n:
                        raise DefinitionError(f"mode {mode.name}: predicate dimension mismatch")
        for t in self.terminals:
            if not 0 <= t.mode < len(self.modes):
                raise DefinitionError(f"terminal mode {t.mode} does not exist")

    @property
    def psi_dim(self) -> int:
        return len(self.var_names)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def uses_step(self) -> bool:
        return any(e.guard.uses_step for m in self.modes for e in m.edges) or any(
            p.k_coeff != 0 for t in self.terminals for p in t.predicates
        )

    def mode_index(self, name: str) -> int:
        for i, m in enumerate(self.modes):
            if m.name == name:
                return i
        raise KeyError(name)

    def initial_state(self) -> HybridState:
        return HybridState(self.initial_mode, tuple(self.psi_init), 0)


def is_terminal(prm: PrmDefinition, state: HybridState) -> bool:
    for t in prm.terminals:
        if t.mode == state.mode and all(p.holds(state.psi, state.step) for p in t.predicates):
            return True
    return False


def enabled_edges(prm: PrmDefinition, mode: int, label, psi, k: int) -> list[Edge]:
    return [e for e in prm.modes[mode].edges if e.guard.holds(label, psi, k)]


def prm_step(prm: PrmDefinition, state: HybridState, label) -> tuple[HybridState, float]:
    """One machine transition on ``label``; terminal states are absorbing."""
    if is_terminal(prm, state):
        return state, 0.0
    mode = prm.modes[state.mode]
    psi = flow_step(mode.flow, state.psi, prm.tau, prm.psi_bounds) if prm.psi_dim else ()
    k = state.step + 1
    chosen = None
    for e in mode.edges:
        if e.guard.holds(label, psi, k):
            if chosen is not None:
                raise TotalityError(
                    f"mode {mode.name}: several edges enabled for label {sorted(label)} at psi={psi}"
                )
            chosen = e
    if chosen is None:
        raise TotalityError(f"mode {mode.name}: no edge enabled for label {sorted(label)} at psi={psi}")
    return HybridState(chosen.target, psi, k), chosen.reward


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


class Discretization:
    """Uniform grid over ``psi_bounds`` crossed with the machine's modes.

    Cells are half-open ``[lo + i*w, lo + (i+1)*w)`` except the last one,
    which also contains the upper bound.  States are ordered mode-major,
    cells in row-major order within a mode.
    """

    def __init__(self, prm: PrmDefinition, widths: Sequence[float] | None = None):
        if widths is None:
            widths = default_widths(prm)
        widths = tuple(float(w) for w in widths)
        if len(widths) != prm.psi_dim:
            raise ConfigurationError(f"expected {prm.psi_dim} cell widths, got {len(widths)}")
        lows, counts = [], []
        for name, (lo, hi), w in zip(prm.var_names, prm.psi_bounds, widths):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ConfigurationError(f"variable {name} is unbounded; cannot discretize")
            if not w > 0:
                raise ConfigurationError(f"cell width for {name} must be positive")
            lows.append(lo)
            counts.append(max(1, math.ceil((hi - lo) / w - 1e-12)))
        self.prm = prm
        self.widths = widths
        self.lows = tuple(lows)
        self.highs = tuple(hi for _, hi in prm.psi_bounds)
        self.counts = tuple(counts)
        self.n_cells = int(np.prod(counts)) if counts else 1
        self.cells = list(itertools.product(*(range(c) for c in counts)))
        self.centers = [self.center(c) for c in self.cells]
        self.states = [HybridState(m, ctr, 0) for m in range(prm.n_modes) for ctr in self.centers]
        self.terminal = np.array([is_terminal(prm, s) for s in self.states], dtype=bool)
        self.nonterminal_indices = np.flatnonzero(~self.terminal)

    def __len__(self):
        return len(self.states)

    @property
    def nonterminal_states(self) -> list[HybridState]:
        return [self.states[i] for i in self.nonterminal_indices]

    @property
    def terminal_states(self) -> list[HybridState]:
        return [self.states[i] for i in np.flatnonzero(self.terminal)]

    def center(self, cell: Sequence[int]) -> tuple[float, ...]:
        return tuple(lo + (i + 0.5) * w for lo, i, w in zip(self.lows, cell, self.widths))

    def cell(self, psi: Sequence[float]) -> tuple[int, ...]:
        out = []
        for v, lo, hi, w, n, name in zip(psi, self.lows, self.highs, self.widths, self.counts, self.prm.var_names):
            if not lo <= v <= hi:
                raise ConfigurationError(f"{name}={v} lies outside [{lo}, {hi}]")
            out.append(min(int((v - lo) // w), n - 1))
        return tuple(out)

    def lookup(self, psi: Sequence[float]) -> tuple[float, ...]:
        return self.center(self.cell(psi))

    def cell_index(self, psi: Sequence[float]) -> int:
        idx = 0
        for i, n in zip(self.cell(psi), self.counts):
            idx = idx * n + i
        return idx

    def index(self, state: HybridState) -> int:
        return state.mode * self.n_cells + self.cell_index(state.psi)

    def mode_of(self, index: int) -> int:
        return index // self.n_cells


def default_widths(prm: PrmDefinition, cells: int = 10) -> tuple[float, ...]:
    """Widths giving ``min(cells, ceil(range))`` cells per dimension."""
    out = []
    for lo, hi in prm.psi_bounds:
        span = hi - lo
        if not math.isfinite(span):
            raise ConfigurationError("cannot pick a default grid for an unbounded variable")
        n = max(1, min(cells, math.ceil(span)))
        out.append(span / n if span > 0 else 1.0)
    return tuple(out)


def discretize_prm(prm: PrmDefinition, widths: Sequence[float] | None = None) -> Discretization:
    return Discretization(prm, widths)
