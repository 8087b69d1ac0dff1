import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcse.autodiff import OPS, Module, Tensor, grad_check, ops, op_forward, parameter, precision
from mcse.autodiff.gradcheck import check_node
from mcse.autodiff.nn import Conv2d
from mcse.autodiff.tensor import ContractError, ShapeError, UnsupportedOpError
from mcse.gradsuite import OP_CASES, missing_op_cases, run_case


def test_every_registered_op_has_a_gradient_case():
    assert missing_op_cases() == []


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_central_differences(name, seed):
    rep = run_case(name, OP_CASES[name], seed)
    assert rep.passed, (name, rep.summary(), rep.per_op, rep.per_parameter)


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_ten_seeds(name):
    for seed in range(3, 10):
        rep = run_case(name, OP_CASES[name], seed)
        assert rep.passed, (name, seed, rep.summary())


def test_single_sigmoid_error_tiny():
    with precision(np.float64):
        x = parameter(np.linspace(-2, 2, 7))
        rep = grad_check(lambda: ops.sigmoid(x), {"x": x})
    assert rep.passed and rep.max_rel_error <= 1e-8


def test_corrupted_backward_is_named():
    @ops.register("bad_square")
    def bad_square(a):
        a = ops._t(a)

        def backward(g):
            return (g * 3.0 * a.data,)           # should be 2 * a
        return Tensor.from_op(a.data ** 2, (a,), backward, "bad_square")

    try:
        with precision(np.float64):
            x = parameter(np.array([0.3, -1.2, 2.0]))
            w = parameter(np.array([1.0, 2.0, 3.0]))
            rep = grad_check(lambda: ops.mul(bad_square(x), w), {"x": x, "w": w})
        assert not rep.passed
        assert rep.failing_op == "bad_square"
    finally:
        del OPS["bad_square"]


def test_unknown_op_raises():
    with pytest.raises(UnsupportedOpError):
        op_forward("no_such_op", [Tensor(np.ones(2))])


def test_op_forward_dispatch_matches_direct_call():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.full((2, 2), 3.0))
    np.testing.assert_array_equal(op_forward("add", [a, b]).data, ops.add(a, b).data)
    np.testing.assert_array_equal(op_forward("concat", [a, b], axis=1).data, ops.concat([a, b], axis=1).data)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 1, 1))))


def test_non_scalar_backward_is_contract_error():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        ops.mul(x, 2.0).backward()


def test_linear_map_gradient():
    with precision(np.float64):
        x = np.array([1.0, -2.0, 0.5])
        w = parameter(np.array([0.3, 0.1, -0.7]))
        ops.sum(ops.mul(w, x)).backward()
    np.testing.assert_array_equal(w.grad, x)


def test_mse_gradient():
    with precision(np.float64):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        w = parameter(np.array([0.0, 2.5, 1.0, 4.0]))
        ops.mean(ops.square(ops.sub(w, t))).backward()
    np.testing.assert_allclose(w.grad, 2 * (w.data - t) / 4, rtol=0, atol=1e-15)


def test_backward_twice_accumulates_exactly():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 4))
        conv = Conv2d(2, 3, (3, 3), padding=1, rng=rng)

        def loss():
            return ops.mean(ops.square(ops.silu(conv(x))))
        loss().backward()
        once = {k: p.grad.copy() for k, p in conv.named_parameters()}
        loss().backward()
    for k, p in conv.named_parameters():
        np.testing.assert_array_equal(p.grad, 2 * once[k])


def test_conv2d_identity_passthrough():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    with precision(np.float64):
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 2), dilation=(2, 1), padding=((2, 2), (0, 1))).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (0, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                acc = b[o]
                for c in range(2):
                    for u in range(3):
                        for v in range(2):
                            acc += w[o, c, u, v] * xp[0, c, i + 2 * u, 2 * j + v]
                ref[0, o, i, j] = acc
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_instance_norm_statistics():
    x = np.random.default_rng(1).normal(3.0, 5.0, (2, 3, 7, 9))
    with precision(np.float64):
        y = ops.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.abs(y.mean(axis=(2, 3))).max() <= 1e-5
    assert np.abs(y.var(axis=(2, 3)) - 1).max() <= 1e-4


def test_prelu_example():
    y = ops.prelu(Tensor(np.array([[-2.0], [3.0]]).T), Tensor(np.array([0.25])), axis=0)
    np.testing.assert_allclose(y.data, [[-0.5, 3.0]])


def test_flip_involution_and_concat_slice_identity():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(ops.flip(ops.flip(x, 1), 1).data, x.data)
    y = Tensor(np.ones((2, 5, 4)))
    cat = ops.concat([x, y], axis=1)
    np.testing.assert_array_equal(ops.slice(cat, 1, 0, 3).data, x.data)
    np.testing.assert_array_equal(ops.slice(cat, 1, 3, 8).data, y.data)


def test_module_state_dict_round_trip_and_errors():
    class Toy(Module):
        def __init__(self):
            self.a = Conv2d(2, 3, (1, 1))
            self.layers = [Conv2d(3, 3, (1, 1)), Conv2d(3, 1, (1, 1))]

    m = Toy()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["a.weight", "a.bias", "layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
    state = m.state_dict()
    state["a.weight"] = np.zeros((3, 2, 1, 2))
    with pytest.raises(ShapeError, match="a.weight"):
        m.load_state_dict(state)
    with pytest.raises(KeyError):
        m.load_state_dict({})


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_broadcast_gradients_sum_over_expanded_axes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        a = parameter(rng.standard_normal((rows, cols)))
        b = parameter(rng.standard_normal(cols))
        w = rng.standard_normal((rows, cols))
        ops.sum(ops.mul(ops.mul(a, b), w)).backward()
    np.testing.assert_allclose(a.grad, w * b.data, atol=1e-12)
    np.testing.assert_allclose(b.grad, (w * a.data).sum(0), atol=1e-12)


def test_check_node_flags_wrong_attrs_free_op():
    with precision(np.float64):
        x = parameter(np.array([0.5, 1.5]))
        node = ops.exp(x)
        assert check_node(node, np.random.default_rng(0)) < 1e-8
