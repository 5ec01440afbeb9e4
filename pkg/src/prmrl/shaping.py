"""Potential-based reward shaping over a discretized machine."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, HybridState, NumericError
from .product import MachineTable


@dataclass(frozen=True)
class PotentialTable:
    """Shaping potential ``phi = -V*`` over the cells of a discretization."""

    values: np.ndarray
    v_star: np.ndarray
    lam: float
    residual: float
    iterations: int
    table: MachineTable | None = None

    def index(self, state) -> int:
        if isinstance(state, HybridState):
            if self.table is None:
                raise ConfigurationError("potential table has no discretization for state lookup")
            return self.table.disc.index(state)
        return int(state)

    def __getitem__(self, state) -> float:
        return float(self.values[self.index(state)])

    def to_csv(self, path) -> None:
        """Write ``state_id, mode, cell, psi, value`` rows."""
        disc = self.table.disc if self.table is not None else None
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_id", "mode", "cell", "psi", "value"])
            for i, v in enumerate(self.values):
                if disc is None:
                    w.writerow([i, "", "", "", repr(float(v))])
                    continue
                hs = disc.states[i]
                cell = disc.cells[i % disc.n_cells]
                w.writerow(
                    [
                        i,
                        disc.prm.modes[hs.mode].name,
                        " ".join(str(c) for c in cell),
                        " ".join(repr(p) for p in hs.psi),
                        repr(float(v)),
                    ]
                )


def bellman_residual(table: MachineTable, v: np.ndarray, lam: float) -> float:
    """max over non-terminal cells of ``|max_phi (r + lam v(next)) - v|``."""
    nt = table.nonterminal
    if len(nt) == 0:
        return 0.0
    backup = (table.reward[nt] + lam * v[table.next[nt]]).max(axis=1)
    return float(np.max(np.abs(backup - v[nt])))


def value_iteration(table: MachineTable, lam: float = 0.9, tol: float = 1e-6, max_sweeps: int = 1_000_000) -> PotentialTable:
    """In-place value iteration over the labels as actions.

    Sweeps the non-terminal cells in order, updating each value immediately,
    until a sweep changes no value by ``(1 - lam) / lam * tol`` or more.
    Terminal cells keep value 0.
    """
    if not 0.0 < lam < 1.0:
        raise ConfigurationError(f"discount must lie in (0, 1), got {lam}")
    if not 0.0 < tol < 1.0:
        raise ConfigurationError(f"tol must lie in (0, 1), got {tol}")
    if not np.all(np.isfinite(table.reward)):
        raise NumericError("machine has non-finite rewards")
    threshold = (1.0 - lam) / lam * tol
    v = np.zeros(table.n_states)
    rewards = [table.reward[s] for s in table.nonterminal]
    succ = [table.next[s] for s in table.nonterminal]
    order = table.nonterminal.tolist()
    err, sweeps = tol, 0
    while err >= threshold:
        if sweeps >= max_sweeps:
            raise NumericError(f"value iteration did not converge in {max_sweeps} sweeps")
        err = 0.0
        for s, r, nx in zip(order, rewards, succ):
            new = float(np.max(r + lam * v[nx]))
            d = abs(new - v[s])
            if d > err:
                err = d
            v[s] = new
        sweeps += 1
    residual = bellman_residual(table, v, lam)
    return PotentialTable(-v, v.copy(), lam, residual, sweeps, table)


def zero_potential(table: MachineTable, lam: float) -> PotentialTable:
    z = np.zeros(table.n_states)
    return PotentialTable(z, z.copy(), lam, 0.0, 0, table)


def shaped_reward(r: float, rho, rho_next, phi: PotentialTable, lam: float) -> float:
    """``r - lam * phi(rho') + phi(rho)``."""
    return r - lam * phi[rho_next] + phi[rho]


def reward_bound(table: MachineTable, lam: float) -> float:
    m = table.max_abs_reward()
    return m / (1.0 - lam) if math.isfinite(m) else math.inf
