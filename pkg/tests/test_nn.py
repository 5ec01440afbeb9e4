import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prmrl.nn import Adam, Mlp, actor_gradients, load_weights, mlp_gradients, save_weights, soft_update


def mse(net, x, y):
    return float(np.mean((net.forward(x) - y) ** 2))


def numeric_grads(loss, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = loss()
            p[i] = old - h
            down = loss()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def close(analytic, numeric):
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-6)


def test_zero_network_outputs_zero():
    net = Mlp([3, 4, 2])
    for p in net.params:
        p[...] = 0.0
    np.testing.assert_array_equal(net.forward(np.ones((5, 3))), np.zeros((5, 2)))
    box = Mlp([3, 4, 2], output="tanh", box=([0.0, -2.0], [4.0, 2.0]))
    for p in box.params:
        p[...] = 0.0
    np.testing.assert_array_equal(box.forward(np.ones(3)), [2.0, 0.0])  # box centre


def test_identity_layer():
    net = Mlp([3, 3])
    net.W[0][...] = np.eye(3)
    net.b[0][...] = 0.0
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(net.forward(x), x)


def test_two_three_one_by_hand():
    net = Mlp([2, 3, 1])
    net.W[0][...] = [[1.0, -1.0, 0.5], [2.0, 1.0, -1.0]]
    net.b[0][...] = [0.0, 0.5, -1.0]
    net.W[1][...] = [[1.0], [2.0], [3.0]]
    net.b[1][...] = [0.25]
    x = np.array([1.0, 1.0])
    # hidden pre-activations 3, 0.5, -1.5 -> relu 3, 0.5, 0
    assert net.forward(x)[0] == pytest.approx(3.0 + 1.0 + 0.0 + 0.25)


def test_linear_neuron_gradient():
    net = Mlp([1, 1])
    net.W[0][...] = 2.0
    net.b[0][...] = 0.5
    gW, gb = mlp_gradients(net, [[3.0]], [[1.0]])
    err = 2.0 * 3.0 + 0.5 - 1.0
    assert gW[0][0, 0] == pytest.approx(2 * err * 3.0)
    assert gb[0][0] == pytest.approx(2 * err)


def test_input_width_is_checked():
    with pytest.raises(ValueError):
        Mlp([2, 1]).forward(np.ones(3))
    with pytest.raises(ValueError):
        Mlp([2])
    with pytest.raises(ValueError):
        Mlp([2, 1], output="softmax")


@pytest.mark.parametrize("sizes", [(2, 8, 1), (3, 16, 16, 1), (4, 32, 2)])
def test_gradients_match_finite_differences(sizes):
    for k in range(50):
        rng = np.random.default_rng([k, len(sizes)])
        net = Mlp(sizes, rng, final_scale=1.0)
        x = rng.normal(size=(4, sizes[0]))
        y = rng.normal(size=(4, sizes[-1]))
        gW, gb = mlp_gradients(net, x, y)
        analytic = [g for pair in zip(gW, gb) for g in pair]
        close(analytic, numeric_grads(lambda: mse(net, x, y), net.params))


def test_actor_gradients_match_finite_differences():
    for k in range(20):
        rng = np.random.default_rng(k)
        actor = Mlp([3, 8, 2], rng, output="tanh", box=([-1.0, 0.0], [1.0, 9.0]), final_scale=1.0)
        critic = Mlp([5, 8, 1], rng, final_scale=1.0)
        s = rng.normal(size=(6, 3))

        def loss():
            a = actor.forward(s)
            return -float(np.mean(critic.forward(np.concatenate([s, a], axis=1))))

        gW, gb = actor_gradients(actor, critic, s)
        close([g for pair in zip(gW, gb) for g in pair], numeric_grads(loss, actor.params))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 1000))
def test_actor_output_stays_in_box(x, seed):
    lo, hi = np.array([-1.0, 0.0]), np.array([1.0, 9.0])
    net = Mlp([3, 16, 2], np.random.default_rng(seed), output="tanh", box=(lo, hi), final_scale=1.0)
    out = net.forward(np.array(x))
    assert np.all(out >= lo) and np.all(out <= hi)


def test_soft_update_extremes():
    rng = np.random.default_rng(0)
    target, online = Mlp([2, 4, 1], rng), Mlp([2, 4, 1], rng)
    before = [p.copy() for p in target.params]
    soft_update(target, online, 0.0)
    for p, q in zip(target.params, before):
        np.testing.assert_array_equal(p, q)
    soft_update(target, online, 0.5)
    for p, q, o in zip(target.params, before, online.params):
        np.testing.assert_allclose(p, (q + o) / 2)
    soft_update(target, online, 1.0)
    for p, o in zip(target.params, online.params):
        np.testing.assert_array_equal(p, o)


def test_copy_is_deep():
    net = Mlp([2, 3, 1])
    other = net.copy()
    other.W[0][0, 0] += 1.0
    assert net.W[0][0, 0] != other.W[0][0, 0]


def test_adam_minimises_a_quadratic():
    p = np.array([3.0, -2.0])
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2 * p])
    np.testing.assert_allclose(p, 0.0, atol=1e-2)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp([4, 32, 2], np.random.default_rng(1), output="tanh", box=([-1, -1], [1, 1]))
    path = tmp_path / "actor.prmw"
    save_weights(net, path)
    assert path.read_bytes()[:4] == b"PRMW"
    fresh = load_weights(Mlp([4, 32, 2], np.random.default_rng(2), output="tanh", box=([-1, -1], [1, 1])), path)
    x = np.random.default_rng(3).normal(size=(7, 4))
    np.testing.assert_array_equal(fresh.forward(x), net.forward(x))


def test_checkpoint_errors(tmp_path):
    net = Mlp([2, 3, 1])
    path = tmp_path / "w.prmw"
    save_weights(net, path)
    with pytest.raises(ValueError):
        load_weights(Mlp([2, 4, 1]), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_weights(Mlp([2, 3, 1]), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_weights(Mlp([2, 3, 1]), path)


def test_zero_loss_has_zero_gradients():
    net = Mlp([3, 5, 2], np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(6, 3))
    gW, gb = mlp_gradients(net, x, net.forward(x))
    for g in gW + gb:
        assert np.all(g == 0.0)
