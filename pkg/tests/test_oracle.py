import numpy as np
import pytest

from prm_strategies import TWO_STATE
from prmrl.core import ConfigurationError, discretize_prm
from prmrl.dsl import load_prm, parse_prm
from prmrl.envs import OfficeWorld
from prmrl.oracle import ProductModel, greedy_policy
from prmrl.product import JointMachine, MachineTable, make_labeler
from prmrl.shaping import value_iteration

N, S, E, W = range(4)
TWO_CELL = ["####", "#oc#", "####"]


def model_of(rows, prm, aliases=None):
    joint = JointMachine([MachineTable(discretize_prm(prm))], [make_labeler(prm, aliases)])
    return ProductModel(OfficeWorld(rows), joint), joint


def test_two_cell_office_by_hand():
    lam = 0.9
    model, _ = model_of(TWO_CELL, parse_prm(TWO_STATE), {"b": "c"})
    res = model.value_iteration(lam)
    # N, S and E each reach the coffee cell w.p. 1/3, otherwise stay put
    v = (1 / 3) / (1 - 2 * lam / 3)
    assert res.v[0, 0] == pytest.approx(v, abs=1e-10)
    assert res.q[0, 0, W] == pytest.approx(lam * v, abs=1e-10)
    assert res.greedy_sets()[0, 0].tolist() == [True, True, True, False]
    assert np.all(res.v[:, 1] == 0.0)  # terminal machine state


def test_one_cell_office_has_zero_value():
    model, _ = model_of(["###", "#o#", "###"], parse_prm(TWO_STATE), {"b": "c"})
    res = model.value_iteration(0.9)
    assert np.all(res.v == 0.0)


def test_myopic_limit_is_expected_immediate_reward():
    lam = 1e-9
    model, _ = model_of(TWO_CELL, parse_prm(TWO_STATE), {"b": "c"})
    res = model.value_iteration(lam)
    assert res.q[0, 0].tolist() == pytest.approx([1 / 3, 1 / 3, 1 / 3, 0.0], abs=1e-8)


def test_policy_value_of_greedy_policy_is_optimal():
    model, _ = model_of(["######", "#oc.m#", "#.#..#", "#h.t.#", "######"], load_prm("a_r2"))
    res = model.value_iteration(0.9)
    v_pi = model.policy_value(greedy_policy(res.q), 0.9)
    np.testing.assert_allclose(v_pi, res.v, atol=1e-8)
    uniform = np.full_like(res.q, 0.25)
    assert np.all(model.policy_value(uniform, 0.9) <= res.v + 1e-9)


def test_average_reward_two_cell():
    model, joint = model_of(TWO_CELL, parse_prm(TWO_STATE), {"b": "c"})
    res = model.value_iteration(0.9)
    start = model.index(model.env.initial_state(), 0)
    rate, ep_r, ep_len = model.average_reward(greedy_policy(res.q), start, 10_000)
    # geometric episode: success w.p. 1/3 per step, reward 1 on success
    assert ep_len == pytest.approx(3.0, rel=1e-9)
    assert ep_r == pytest.approx(1.0, rel=1e-9)
    assert rate == pytest.approx(1 / 3, rel=1e-9)


def test_shaping_preserves_optimal_actions():
    lam = 0.9
    prm = load_prm("a_r2")
    model, joint = model_of(OfficeWorld.default().rows, prm)
    phi = value_iteration(joint.tables[0], lam).values
    plain = model.value_iteration(lam)
    shaped = model.value_iteration(lam, potential=phi)
    live = ~joint.terminal
    # Q'(x, m, u) = Q(x, m, u) + phi(m) on every non-terminal product state
    np.testing.assert_allclose(shaped.q[:, live], plain.q[:, live] + phi[live][None, :, None], atol=1e-8)
    np.testing.assert_array_equal(plain.greedy_sets(1e-6)[:, live], shaped.greedy_sets(1e-6)[:, live])


def test_state_limit_and_continuous_env():
    prm = parse_prm(TWO_STATE)
    joint = JointMachine([MachineTable(discretize_prm(prm))])
    with pytest.raises(ConfigurationError):
        ProductModel(OfficeWorld(TWO_CELL), joint, max_states=1)
    from prmrl.envs import TwoTank

    with pytest.raises(ConfigurationError):
        ProductModel(TwoTank(), joint)


def test_greedy_policy_rows_sum_to_one():
    q = np.array([[[1.0, 1.0, 0.0], [0.0, 2.0, 2.0 - 1e-12]]])
    pi = greedy_policy(q)
    assert pi[0, 0].tolist() == [0.5, 0.5, 0.0]
    assert pi[0, 1].tolist() == [0.0, 0.5, 0.5]
