import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prm_strategies import CHAIN, TWO_STATE, ZERO
from prmrl.core import ConfigurationError, HybridState, discretize_prm, prm_step
from prmrl.dsl import load_prm, parse_prm
from prmrl.product import JointMachine, MachineTable
from prmrl.shaping import bellman_residual, reward_bound, shaped_reward, value_iteration, zero_potential

LAM = 0.9


def table_of(src_or_name, widths=None):
    prm = parse_prm(src_or_name) if "\n" in src_or_name else load_prm(src_or_name)
    return MachineTable(discretize_prm(prm, widths))


def jacobi_oracle(table, lam, sweeps=2000):
    """Plain synchronous value iteration, run far past convergence."""
    v = np.zeros(table.n_states)
    nt = table.nonterminal
    for _ in range(sweeps):
        v_new = np.zeros_like(v)
        v_new[nt] = (table.reward[nt] + lam * v[table.next[nt]]).max(axis=1)
        v = v_new
    return v


def test_two_state_potential():
    table = table_of(TWO_STATE)
    phi = value_iteration(table, LAM)
    q0, q1 = HybridState(0, ()), HybridState(1, ())
    assert phi.v_star[0] == pytest.approx(1.0, abs=1e-6)
    assert phi[q0] == pytest.approx(-1.0, abs=1e-6)
    assert phi[q1] == 0.0
    assert shaped_reward(1.0, q0, q1, phi, LAM) == pytest.approx(0.0, abs=1e-6)
    assert shaped_reward(0.0, q0, q0, phi, LAM) == pytest.approx(-0.1, abs=1e-6)


def test_zero_reward_machine_has_zero_potential():
    phi = value_iteration(table_of(ZERO), LAM)
    assert np.all(phi.values == 0.0)


def test_chain_values():
    phi = value_iteration(table_of(CHAIN), LAM)
    assert phi.v_star[1] == pytest.approx(1.0, abs=1e-6)
    assert phi.v_star[0] == pytest.approx(LAM, abs=1e-6)
    assert phi.v_star[2] == 0.0


@pytest.mark.parametrize("name", ["a_r1", "a_r2", "a_r3"])
def test_fixture_potentials_are_accurate_and_bounded(name):
    table = table_of(name, (10.0,) * 4 if name == "a_r3" else None)
    tol = 1e-6
    phi = value_iteration(table, LAM, tol)
    assert phi.residual <= tol
    assert phi.residual == pytest.approx(bellman_residual(table, phi.v_star, LAM))
    np.testing.assert_allclose(phi.v_star, jacobi_oracle(table, LAM), atol=tol)
    assert np.all(np.abs(phi.values) <= reward_bound(table, LAM) + 1e-12)
    assert np.all(phi.values[table.terminal] == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_shaping_telescopes_along_paths(seed, length):
    prm = load_prm("a_r2")
    table = MachineTable(discretize_prm(prm))
    phi = value_iteration(table, LAM)
    rng = np.random.default_rng(seed)
    labels = prm.props.all_labels()
    s = table.disc.states[int(rng.choice(table.nonterminal))]
    path = [s]
    raw = shaped = 0.0
    for t in range(length):
        nxt, r = prm_step(prm, path[-1], labels[int(rng.integers(len(labels)))])
        raw += LAM**t * r
        shaped += LAM**t * shaped_reward(r, path[-1], nxt, phi, LAM)
        path.append(nxt)
    want = raw + phi[path[0]] - LAM**length * phi[path[-1]]
    assert shaped == pytest.approx(want, abs=1e-9)


def test_zero_potential_is_neutral():
    table = table_of("a_r2")
    z = zero_potential(table, LAM)
    s = table.disc.states[0]
    assert shaped_reward(0.7, s, s, z, LAM) == 0.7


def test_joint_potential_is_the_mean():
    t1, t2 = table_of(TWO_STATE), table_of(CHAIN)
    p1, p2 = value_iteration(t1, LAM), value_iteration(t2, LAM)
    joint = JointMachine([t1, t2])
    joint.set_potentials([p1.values, p2.values])
    for i in range(t1.n_states):
        for j in range(t2.n_states):
            assert joint.potential[joint.encode([i, j])] == pytest.approx((p1.values[i] + p2.values[j]) / 2)


def test_bad_parameters():
    table = table_of(TWO_STATE)
    for lam in (0.0, 1.0, -0.5):
        with pytest.raises(ConfigurationError):
            value_iteration(table, lam)
    with pytest.raises(ConfigurationError):
        value_iteration(table, LAM, tol=0.0)


def test_csv_export(tmp_path):
    table = table_of("a_r2")
    phi = value_iteration(table, LAM)
    path = tmp_path / "phi.csv"
    phi.to_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == table.n_states
    assert set(rows[0]) == {"state_id", "mode", "cell", "psi", "value"}
    for row in rows[:50]:
        assert float(row["value"]) == phi.values[int(row["state_id"])]
