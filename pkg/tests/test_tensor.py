import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcomp import tensor as T
from oracles import conv2d_loop, conv_transpose2d_loop, numeric_grad, rel_err


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# conv2d ---------------------------------------------------------------------

def test_conv2d_ones_kernel_counts_neighbours():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    expected = conv2d_loop(x, w, [0.0], 1, 1)
    # frozen from the loop oracle
    assert expected[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor([0.0]), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, expected)


def test_conv2d_identity_and_zero_kernels():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.uniform(size=(2, 1, 5, 4)))
    out = T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x.data)
    out = T.conv2d(x, T.Tensor(np.zeros((1, 1, 3, 3))), T.Tensor([0.37]), padding=1)
    assert np.all(out.data == np.float32(0.37))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 1, 4), (1, 1, 4), (3, 2, 5)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x, w, b = rng.normal(size=(2, 3, 9, 8)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    out = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad)
    assert rel_err(out.data, conv2d_loop(x, w, b, stride, pad)) < 1e-12


def test_conv2d_shape_errors_name_dimensions():
    with pytest.raises(T.ShapeError, match="input channels 3 != weight input channels 2"):
        T.conv2d(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(T.ShapeError, match="kernel 5 larger"):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))), padding=1)


# conv_transpose2d -------------------------------------------------------------

def test_conv_transpose_disjoint_blocks():
    x, w = np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2))
    expected = conv_transpose2d_loop(x, w, [0.0], 2, 0)
    assert expected.shape == (1, 1, 4, 4) and np.all(expected == 1.0)
    out = T.conv_transpose2d(T.Tensor(x), T.Tensor(w), T.Tensor([0.0]), stride=2)
    np.testing.assert_array_equal(out.data, expected)


def test_conv_transpose_zero_input_gives_bias():
    out = T.conv_transpose2d(T.Tensor(np.zeros((2, 3, 4, 4))), T.Tensor(np.ones((3, 2, 4, 4))),
                             T.Tensor([0.5, -1.5]), stride=2, padding=1)
    assert out.shape == (2, 2, 8, 8)
    assert np.all(out.data[:, 0] == 0.5) and np.all(out.data[:, 1] == -1.5)


@pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 0, 3), (2, 0, 2), (3, 1, 5)])
def test_conv_transpose_matches_scatter_oracle(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=2)
    out = T.conv_transpose2d(t64(x), t64(w), t64(b), stride=stride, padding=pad)
    assert rel_err(out.data, conv_transpose2d_loop(x, w, b, stride, pad)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_conv_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    # (8 + 2p - k) divisible by stride, so the adjoint needs no output padding
    stride, pad, k = [(1, 1, 3), (2, 1, 4), (3, 1, 4), (2, 0, 2), (1, 0, 3)][seed]
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    ho = T.conv_output_size(8, k, stride, pad)
    y = rng.normal(size=(2, 4, ho, ho))
    # the oracles agree with each other ...
    lhs_o = np.sum(conv2d_loop(x, w, None, stride, pad) * y)
    # a conv weight (Cout, Cin, k, k) is read by the transpose as (Cin', Cout', k, k)
    back = conv_transpose2d_loop(y, w, None, stride, pad)
    assert back.shape == x.shape
    rhs_o = np.sum(x * back)
    assert abs(lhs_o - rhs_o) / abs(lhs_o) < 1e-5
    # ... and so does the engine
    lhs = np.sum(T.conv2d(t64(x), t64(w), stride=stride, padding=pad).data * y)
    rhs = np.sum(x * T.conv_transpose2d(t64(y), t64(w), stride=stride, padding=pad).data)
    assert abs(lhs - rhs) / abs(lhs) < 1e-5


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 12), k=st.sampled_from([2, 3, 4]), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_then_transpose_restores_size(h, k, stride, pad):
    if k > h + 2 * pad or (h + 2 * pad - k) % stride:
        return
    x = T.Tensor(np.zeros((1, 1, h, h)))
    y = T.conv2d(x, T.Tensor(np.zeros((2, 1, k, k))), stride=stride, padding=pad)
    z = T.conv_transpose2d(y, T.Tensor(np.zeros((2, 1, k, k))), stride=stride, padding=pad)
    assert z.shape[2:] == (h, h)


# elementwise -------------------------------------------------------------------

def test_leaky_relu_examples():
    out = T.leaky_relu(T.Tensor([1.0, -1.0, 0.0]), 0.2)
    np.testing.assert_allclose(out.data, [1.0, -0.2, 0.0], rtol=1e-7)
    with pytest.raises(ValueError):
        T.leaky_relu(T.Tensor([1.0]), 1.5)


def test_sigmoid_examples():
    with T.precision(np.float64):
        out = T.sigmoid(T.Tensor([0.0, 20.0, -math.log(3.0), -800.0, 800.0]))
    assert out.data[0] == 0.5
    assert abs(out.data[1] - 1.0) < 1e-8
    assert abs(out.data[2] - 0.25) < 1e-15
    assert np.all(np.isfinite(out.data))


# batch norm --------------------------------------------------------------------

def test_batch_norm_constant_input():
    x = T.Tensor(np.full((2, 3, 4, 4), 0.3))
    out = T.batch_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.full(3, 0.7)), np.zeros(3), np.ones(3))
    assert np.max(np.abs(out.data - 0.7)) < 1e-5


def test_batch_norm_normalizes_per_channel():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)))
    out = T.batch_norm(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), np.zeros(2), np.ones(2)).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-3)


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 3, 3))
    gamma, beta, eps = rng.normal(size=3), rng.normal(size=3), 1e-5
    out = T.batch_norm(t64(x), t64(gamma), t64(beta), np.zeros(3), np.ones(3), eps=eps, training=False)
    expected = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        c = idx[1]
        expected[idx] = gamma[c] * x[idx] / math.sqrt(1 + eps) + beta[c]
    assert rel_err(out.data, expected) < 1e-12


def test_batch_norm_updates_running_stats():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm(t64(x), t64([1.0]), t64([0.0]), rm, rv, momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))


def test_batch_norm_single_value_is_finite():
    out = T.batch_norm(T.Tensor(np.ones((1, 2, 1, 1))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2))
    assert np.all(np.isfinite(out.data))


# concat ------------------------------------------------------------------------

def test_concat_channels():
    a = T.Tensor(np.zeros((1, 2, 4, 4)), requires_grad=True)
    b = T.Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    out = T.concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    assert np.all(out.data[:, :2] == 0) and np.all(out.data[:, 2:] == 1)
    T.backward(T.sum_all(out))
    np.testing.assert_array_equal(a.grad, np.ones((1, 2, 4, 4)))
    empty = T.Tensor(np.zeros((1, 0, 4, 4)))
    np.testing.assert_array_equal(T.concat_channels(b, empty).data, b.data)
    with pytest.raises(T.ShapeError):
        T.concat_channels(a, T.Tensor(np.zeros((1, 2, 3, 4))))


def test_concat_gradient_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 1, 3, 3))
    wts = rng.normal(size=(2, 3, 3, 3))

    def f():
        return float(np.sum(np.concatenate([a, b], axis=1) * wts))

    ta, tb = t64(a, True), t64(b, True)
    T.backward(T.sum_all(T.concat_channels(ta, tb) * t64(wts)))
    assert rel_err(ta.grad, numeric_grad(f, a)) < 1e-6


# losses ------------------------------------------------------------------------

def test_mean_abs_and_mean_sq():
    a = T.Tensor(np.full((2, 3), 0.6), dtype=np.float64)
    b = T.Tensor(np.full((2, 3), 0.5), dtype=np.float64)
    assert T.mean_abs(a, a).item() == 0.0 and T.mean_sq(a, a).item() == 0.0
    assert T.mean_abs(a, b).item() == pytest.approx(0.1, abs=1e-12)
    assert T.mean_sq(a, b).item() == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(T.ShapeError):
        T.mean_abs(a, T.Tensor(np.zeros(3)))


def test_mean_losses_vs_loop():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    l1 = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    l2 = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert rel_err(T.mean_abs(t64(a), t64(b)).item(), l1) < 1e-6
    assert rel_err(T.mean_sq(t64(a), t64(b)).item(), l2) < 1e-6


def test_bce_with_logits_closed_forms():
    with T.precision(np.float64):
        assert abs(T.bce_with_logits(T.Tensor([0.0]), 1.0).item() - math.log(2)) < 1e-12
        assert T.bce_with_logits(T.Tensor([30.0]), 1.0).item() < 1e-9
        assert abs(T.bce_with_logits(T.Tensor([-2.0]), 0.0).item() - math.log1p(math.exp(-2))) < 1e-12
        assert abs(math.log1p(math.exp(-2)) - 0.126928) < 1e-6
        assert np.isfinite(T.bce_with_logits(T.Tensor([-1e4, 1e4]), [1.0, 0.0]).item())


# backward ----------------------------------------------------------------------

def test_backward_square():
    x = t64([3.0, -1.0], True)
    T.backward(T.sum_all(x * x))
    np.testing.assert_array_equal(x.grad, [6.0, -2.0])


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], True)
    with pytest.raises(T.UsageError):
        T.backward(x * 2.0)


def test_independent_leaf_gets_zero_gradient():
    x, unused = t64([1.0, 2.0], True), t64([5.0], True)
    T.backward(T.sum_all(x * x), inputs=[x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_graph_is_topological_and_visits_once():
    x = t64([1.0, 2.0], True)
    y = x * x
    z = T.sum_all(y + y)
    order = T.graph(z)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    T.backward(z)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    x = t64([1.0], True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# adam --------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": T.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2, dtype=np.float32)
    state = T.OptimizerState(lr=0.1)
    T.adam_step(p, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    g = np.array([1e-3, -0.5, 3.0, -20.0])
    lr = 1e-2
    p = {"w": T.Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)}
    p["w"].grad = g
    state = T.OptimizerState(lr=lr)
    T.adam_step(p, state)
    # bias-corrected first step: lr * g / (|g| + eps)
    np.testing.assert_allclose(-p["w"].data, lr * np.sign(g), atol=1e-3 * lr)
    assert state.m["w"].shape == (4,) and state.v["w"].shape == (4,)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = {"w": T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)}
        state = T.OptimizerState(lr=1e-3)
        for _ in range(5):
            p["w"].grad = rng.normal(size=(5, 5)).astype(np.float32)
            T.adam_step(p, state)
        return p["w"].data.tobytes(), state.m["w"].tobytes(), state.step

    assert run() == run()


def test_dump_tensor(tmp_path):
    path = tmp_path / "t.txt"
    T.dump_tensor(T.Tensor(np.array([[1.0, 1 / 3], [2.5, -4.0]]), dtype=np.float64), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "2 2"
    assert lines[1:] == ["1", "0.333333333", "2.5", "-4"]
