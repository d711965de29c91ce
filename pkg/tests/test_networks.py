import numpy as np
import pytest

from edmddl.networks import (AdamState, DictionaryNetwork, StaleRecordError, adam_step, count_parameters,
                             init_mlp, init_node, mlp_parameter_count, node_parameter_count)
from edmddl.odeint import IntegratorConfig

from conftest import central_difference

TIGHT = IntegratorConfig(abs_tol=1e-12, rel_tol=1e-12)


def max_rel_error(analytic, numeric):
    # per-parameter relative error, floored at 1e-3 of the largest component so
    # that near-zero entries are compared on the gradient's own scale
    floor = 1e-3 * max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def gradient_check(net, x, seed):
    w = np.random.default_rng(seed).normal(size=(x.shape[0], net.n_outputs))
    out, rec = net.forward(x)
    grads = net.backward(rec, w)
    analytic = np.concatenate([grads[k].ravel() for k in net.params])
    flat = net.get_flat()

    def loss(p):
        net.set_flat(p)
        return float(np.sum(net(x) * w))

    numeric = central_difference(loss, flat)
    net.set_flat(flat)
    return max_rel_error(analytic, numeric)


def test_mlp_paper_count():
    net = init_mlp(2, 170, 3, 22, seed=0)
    assert count_parameters(net) == 62_412
    assert mlp_parameter_count(2, 170, 3, 22) == 510 + 2 * 29_070 + 3_762


def test_mlp_smallest_count():
    assert count_parameters(init_mlp(1, 1, 1, 1, seed=0)) == 4


def test_mlp_ks_count_golden():
    # the closed form gives 229,999 where the KS table lists 191,821
    assert count_parameters(init_mlp(128, 303, 3, 22, seed=0)) == 229_999


def test_node_counts():
    net = init_node(2, 120, 68, 22, seed=0)
    assert net.params["field.W1"].size + net.params["field.W2"].size + net.params["field.W3"].size == 20_944
    assert count_parameters(net) == node_parameter_count(2, 120, 68, 22)
    with pytest.raises(ValueError):
        node_parameter_count(2, 120, 0, 22)
    with pytest.raises(ValueError):
        init_node(2, 120, 0, 22, seed=0)


@pytest.mark.parametrize("bad", [(0, 5, 3, 2), (2, 0, 3, 2), (2, 5, 0, 2), (2, 5, 3, 0)])
def test_mlp_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        init_mlp(*bad, seed=0)


def test_init_deterministic():
    a, b = init_mlp(2, 8, 3, 4, seed=11), init_mlp(2, 8, 3, 4, seed=11)
    assert np.array_equal(a.get_flat(), b.get_flat())
    c, e = init_node(2, 8, 3, 4, seed=11), init_node(2, 8, 3, 4, seed=11)
    assert np.array_equal(c.get_flat(), e.get_flat())
    assert not np.array_equal(a.get_flat(), init_mlp(2, 8, 3, 4, seed=12).get_flat())


def test_node_field_distribution():
    w2 = init_node(2, 8, 200, 3, seed=3).params["field.W2"]
    assert abs(w2.mean()) < 0.01
    assert 0.09 <= w2.std() <= 0.11


def test_init_scales():
    inv = init_mlp(2, 100, 2, 3, seed=0)
    assert np.max(np.abs(inv.params["block0.W"])) <= 0.1
    assert np.max(np.abs(inv.params["input.W"])) <= 1 / np.sqrt(2)
    lit = init_mlp(2, 100, 2, 3, seed=0, init_scale="literal")
    assert np.max(np.abs(lit.params["output.b"])) <= 10.0
    assert np.max(np.abs(lit.params["output.b"])) > 1.0
    with pytest.raises(ValueError):
        init_mlp(2, 4, 2, 3, seed=0, init_scale="huge")


def test_mlp_zero_params_output_zero():
    net = init_mlp(3, 6, 3, 4, seed=0)
    net.set_flat(np.zeros(net.n_params))
    assert np.all(net(np.random.default_rng(0).normal(size=(5, 3))) == 0)


def test_mlp_scalar_chain():
    net = init_mlp(1, 1, 2, 1, seed=0)
    net.set_params({"input.W": [[1.0]], "input.b": [0.0], "block0.W": [[1.0]], "block0.b": [0.0],
                    "output.W": [[1.0]], "output.b": [0.0]})
    assert abs(net(np.array([[0.5]]))[0, 0] - 0.9621172) < 1e-7
    assert abs(net(np.array([[0.5]]))[0, 0] - (0.5 + np.tanh(0.5))) < 1e-15


def test_mlp_residual_identity():
    net = init_mlp(2, 5, 3, 3, seed=1)
    zeroed = {k: np.zeros_like(v) for k, v in net.params.items() if k.startswith("block")}
    net.set_params(zeroed)
    x = np.random.default_rng(2).normal(size=(4, 2))
    p = net.params
    expected = (x @ p["input.W"] + p["input.b"]) @ p["output.W"] + p["output.b"]
    np.testing.assert_allclose(net(x), expected, atol=1e-14)


def test_node_zero_field():
    net = init_node(2, 5, 3, 3, seed=1)
    net.set_params({k: np.zeros_like(v) for k, v in net.params.items() if k.startswith("field")})
    x = np.random.default_rng(2).normal(size=(4, 2))
    p = net.params
    expected = (x @ p["input.W"] + p["input.b"]) @ p["output.W"] + p["output.b"]
    np.testing.assert_allclose(net(x), expected, atol=1e-14)


def test_forward_reproducible():
    x = np.random.default_rng(0).normal(size=(6, 2))
    for net in (init_mlp(2, 8, 3, 3, seed=0), init_node(2, 8, 4, 3, seed=0)):
        assert np.array_equal(net(x), net(x))


def test_single_affine_gradient():
    net = init_mlp(3, 2, 1, 2, seed=0)
    x = np.array([[0.2, -1.0, 3.0]])
    out, rec = net.forward(x)
    g = net.backward(rec, np.array([[1.0, 0.0]]))
    # y = h W_out + b_out with h = x W_in + b_in; the gradient of y_1 w.r.t. b_out is e_1
    np.testing.assert_allclose(g["output.b"], [1.0, 0.0])
    h = x @ net.params["input.W"] + net.params["input.b"]
    np.testing.assert_allclose(g["output.W"][:, 0], h[0])
    np.testing.assert_allclose(g["output.W"][:, 1], 0.0)


def test_zero_cotangent_gives_zero_gradients():
    x = np.random.default_rng(0).normal(size=(3, 2))
    for net in (init_mlp(2, 5, 3, 3, seed=0), init_node(2, 5, 3, 3, seed=0, integrator=TIGHT)):
        out, rec = net.forward(x)
        assert all(np.all(g == 0) for g in net.backward(rec, np.zeros_like(out)).values())


def test_stale_record_rejected():
    net = init_mlp(2, 4, 2, 2, seed=0)
    _, rec = net.forward(np.ones((1, 2)))
    net.set_flat(net.get_flat())
    with pytest.raises(StaleRecordError):
        net.backward(rec, np.ones((1, 2)))
    other = init_mlp(2, 4, 2, 2, seed=0)
    _, rec = other.forward(np.ones((1, 2)))
    with pytest.raises(StaleRecordError):
        net.backward(rec, np.ones((1, 2)))


def test_input_dimension_checked():
    with pytest.raises(ValueError):
        init_mlp(2, 4, 2, 2, seed=0)(np.ones((3, 5)))


def test_mlp_gradient_paper_example():
    net = init_mlp(2, 5, 3, 3, seed=7)
    x = np.random.default_rng(7).uniform(-2, 2, size=(6, 2))
    assert gradient_check(net, x, 7) < 1e-4


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_mlp_gradient_depths(depth):
    net = init_mlp(3, 6, depth, 4, seed=depth)
    x = np.random.default_rng(depth).normal(size=(5, 3))
    assert gradient_check(net, x, depth) < 1e-4


@pytest.mark.parametrize("field_width", [2, 4, 8])
def test_node_gradient_field_widths(field_width):
    # larger field weights than the default init so that the adjoint terms matter
    net = init_node(3, 6, field_width, 4, seed=field_width, integrator=TIGHT, field_std=0.5)
    x = np.random.default_rng(field_width).normal(size=(5, 3))
    assert gradient_check(net, x, field_width) < 1e-4


def test_node_gradient_per_row():
    net = init_node(2, 4, 3, 2, seed=5, integrator=TIGHT, field_std=0.5, per_row=True)
    x = np.random.default_rng(5).normal(size=(3, 2))
    assert gradient_check(net, x, 5) < 1e-4


def test_slice_record_matches_subset_forward():
    net = init_mlp(2, 5, 3, 3, seed=0)
    x = np.random.default_rng(0).normal(size=(8, 2))
    _, rec = net.forward(x)
    rows = np.array([1, 4, 6])
    g = np.ones((3, 3))
    sub = net.backward(net.slice_record(rec, rows), g)
    _, rec2 = net.forward(x[rows])
    direct = net.backward(rec2, g)
    for k in sub:
        np.testing.assert_allclose(sub[k], direct[k], atol=1e-14)


@pytest.mark.parametrize("make", [lambda: init_mlp(2, 5, 3, 3, seed=1),
                                  lambda: init_node(2, 5, 3, 3, seed=1, time_span=(0.0, 0.5))])
def test_to_dict_round_trip(make):
    net = make()
    clone = DictionaryNetwork.from_dict(net.to_dict())
    x = np.random.default_rng(0).normal(size=(4, 2))
    assert np.array_equal(clone.get_flat(), net.get_flat())
    assert np.array_equal(clone(x), net(x))
    assert clone.architecture() == net.architecture()


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(new["w"], p["w"])
    assert state.step_count == 1


def test_adam_first_step_closed_form():
    new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(), learning_rate=1e-3)
    assert abs(-new["w"][0] - 1e-3 / (1 + 1e-8)) < 1e-18
    assert abs(-new["w"][0] - 0.000999999990) < 1e-15


def test_adam_deterministic_and_pure():
    p = {"w": np.array([0.5, 0.1])}
    g = {"w": np.array([0.3, -0.2])}
    s = AdamState()
    a = adam_step(p, g, s)
    b = adam_step(p, g, s)
    assert np.array_equal(a[0]["w"], b[0]["w"])
    assert np.array_equal(p["w"], [0.5, 0.1]) and s.step_count == 0


def test_adam_state_shapes_and_errors():
    p = {"w": np.zeros((2, 3))}
    _, s = adam_step(p, {"w": np.ones((2, 3))}, AdamState())
    assert s.first_moment["w"].shape == (2, 3) and s.second_moment["w"].shape == (2, 3)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.ones(3)}, AdamState())


def test_adam_minimizes_quadratic():
    p, s = {"w": np.array([3.0, -2.0])}, AdamState()
    for _ in range(3000):
        p, s = adam_step(p, {"w": 2 * p["w"]}, s, learning_rate=0.01)
    assert np.max(np.abs(p["w"])) < 1e-2
