import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ufm import numerics as nx

try:  # gradient oracle for the primitive tests; everything else runs without it
    import torch
    torch.set_default_dtype(torch.float64)
except ImportError:
    torch = None
needs_torch = pytest.mark.skipif(torch is None, reason="torch not installed")

finite = st.floats(-3, 3, allow_nan=False, width=64)


def vec(n):
    return arrays(np.float64, n, elements=finite)


def test_matmul_identity():
    out = nx.matmul(np.eye(2), [[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_softmax_symmetric_and_saturated():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0], 0).data, [0.5, 0.5])
    # oracle: direct evaluation of e^10 / (e^10 + 1)
    p = math.exp(10) / (math.exp(10) + 1)
    np.testing.assert_allclose(nx.softmax([10.0, 0.0], 0).data, [p, 1 - p], rtol=1e-6)
    np.testing.assert_allclose(nx.softmax([10.0, 0.0], 0).data, [0.9999546, 0.0000454], atol=1e-7)


def test_backward_linear_and_square():
    x = nx.tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = nx.tensor([2.0], requires_grad=True)
    nx.sum(y * y).backward()
    np.testing.assert_allclose(y.grad, [4.0])


@given(vec(5))
def test_mean_of_softmax_has_zero_gradient(x):
    with nx.precision(np.float64):
        t = nx.tensor(x, requires_grad=True)
        nx.mean(nx.softmax(t, 0)).backward()
    np.testing.assert_allclose(t.grad, 0.0, atol=1e-12)


def test_backward_errors():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nx.ShapeError):
        (x * 2.0).backward()
    with pytest.raises(ValueError, match="detached"):
        nx.sum(nx.tensor([1.0])).backward()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 1)))


def test_non_finite_result_is_an_error():
    with pytest.raises(nx.NonFiniteError, match="log"):
        nx.log([0.0])


def test_gradcheck_sum_of_squares(rng):
    assert nx.gradcheck(lambda x: nx.sum(x * x), rng.normal(size=8), h=1e-5) < 1e-6


# ---------------------------------------------------------- every primitive vs torch autograd

def _torch_grad(fn, *xs):
    ts = [torch.tensor(x, requires_grad=True) for x in xs]
    fn(*ts).backward()
    return [t.grad.numpy() for t in ts]


def _ours_grad(fn, *xs):
    with nx.precision(np.float64):
        ts = [nx.tensor(x, requires_grad=True) for x in xs]
        fn(*ts).backward()
    return [t.grad for t in ts]


def _w(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


CASES = {
    "matmul": ((3, 4), (4, 2), lambda a, b: nx.sum(nx.matmul(a, b) * _w((3, 2))),
               lambda a, b: ((a @ b) * torch.tensor(_w((3, 2)))).sum()),
    "add": ((3, 4), (3, 4), lambda a, b: nx.sum((a + b) * _w((3, 4))), lambda a, b: ((a + b) * torch.tensor(_w((3, 4)))).sum()),
    "mul": ((3, 4), (3, 4), lambda a, b: nx.sum(a * b), lambda a, b: (a * b).sum()),
    "sub": ((3, 4), (3, 4), lambda a, b: nx.sum((a - b) * _w((3, 4))), lambda a, b: ((a - b) * torch.tensor(_w((3, 4)))).sum()),
}
UNARY = {
    "scale": (lambda a: nx.scale(a, 2.5), lambda a: a * 2.5),
    "exp": (nx.exp, lambda a: torch.exp(a)),
    "log": (lambda a: nx.log(nx.exp(a) + 1.0), lambda a: torch.log(torch.exp(a) + 1.0)),
    "relu": (nx.relu, lambda a: torch.relu(a)),
    "gelu": (nx.gelu, lambda a: torch.nn.functional.gelu(a, approximate="tanh")),
    "softmax": (lambda a: nx.softmax(a, -1), lambda a: torch.softmax(a, -1)),
    "softmax0": (lambda a: nx.softmax(a, 0), lambda a: torch.softmax(a, 0)),
    "layernorm": (lambda a: nx.layernorm(a, -1), lambda a: torch.nn.functional.layer_norm(a, (a.shape[-1],), eps=1e-5)),
    "transpose": (nx.transpose, lambda a: a.T),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), lambda a: a.reshape(6, 2)),
    "gather": (lambda a: nx.gather(a, np.array([2, 0, 2]), 0), lambda a: a[[2, 0, 2]]),
    "sum_axis": (lambda a: nx.sum(a, 1, keepdims=True), lambda a: a.sum(1, keepdim=True)),
    "mean_axis": (lambda a: nx.mean(a, 0), lambda a: a.mean(0)),
    "sqrt": (lambda a: nx.sqrt(a * a + 1.0), lambda a: torch.sqrt(a * a + 1.0)),
    "clampmin": (lambda a: nx.clampmin(a, 0.1), lambda a: torch.clamp(a, min=0.1)),
}


@needs_torch
@pytest.mark.parametrize("name", sorted(CASES))
def test_binary_grads_match_torch(name):
    sa, sb, ours, ref = CASES[name]
    a, b = _w(sa, 1), _w(sb, 2)
    for g, t in zip(_ours_grad(ours, a, b), _torch_grad(ref, a, b)):
        np.testing.assert_allclose(g, t, rtol=1e-9, atol=1e-12)


@needs_torch
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads_match_torch(name):
    ours, ref = UNARY[name]
    x = _w((3, 4), 3)
    shape = {"transpose": (4, 3), "reshape": (6, 2), "gather": (3, 4), "sum_axis": (3, 1), "mean_axis": (4,)}.get(name, (3, 4))
    wt = _w(shape, 4)
    (g,) = _ours_grad(lambda a: nx.sum(ours(a) * wt), x)
    (t,) = _torch_grad(lambda a: (ref(a) * torch.tensor(wt)).sum(), x)
    np.testing.assert_allclose(g, t, rtol=1e-8, atol=1e-10)


@needs_torch
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_torch(stride, pad):
    x, w, b = _w((2, 3, 7, 6), 5), _w((4, 3, 3, 3), 6), _w((4,), 7)
    with nx.precision(np.float64):
        out = nx.conv2d(x, w, b, stride, pad)
    ref = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, ref.numpy(), rtol=1e-10, atol=1e-10)
    wt = _w(out.shape, 8)
    ours = _ours_grad(lambda a, k, c: nx.sum(nx.conv2d(a, k, c, stride, pad) * wt), x, w, b)
    theirs = _torch_grad(lambda a, k, c: (torch.nn.functional.conv2d(a, k, c, stride, pad) * torch.tensor(wt)).sum(), x, w, b)
    for g, t in zip(ours, theirs):
        np.testing.assert_allclose(g, t, rtol=1e-9, atol=1e-10)


def test_conv2d_rejects_other_strides():
    with pytest.raises(ValueError):
        nx.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=3)


# ---------------------------------------------------------- properties

@given(st.integers(0, 10_000), st.sampled_from(sorted(UNARY)))
def test_primitive_gradcheck(seed, name):
    ours, _ = UNARY[name]
    x = np.random.default_rng(seed).normal(size=(3, 4))
    if name in ("relu", "clampmin"):  # keep clear of the kink
        x = np.where(np.abs(x - 0.1) < 0.05, x + 0.2, x)
        x = np.where(np.abs(x) < 0.05, x + 0.2, x)
    shape = {"transpose": (4, 3), "reshape": (6, 2), "gather": (3, 4), "sum_axis": (3, 1), "mean_axis": (4,)}.get(name, (3, 4))
    wt = np.random.default_rng(seed + 1).normal(size=shape)
    assert nx.gradcheck(lambda a: nx.sum(ours(a) * wt), x) < 1e-4


@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20, width=64)))
def test_softmax_rows_are_distributions(x):
    p = nx.softmax(x, -1).data
    assert p.min() >= 0 and p.max() <= 1
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


@given(arrays(np.float64, (5, 8), elements=st.floats(-50, 50, width=64)))
def test_layernorm_standardizes(x):
    x = x + np.linspace(0, 1, 8)  # avoid constant rows
    with nx.precision(np.float64):
        y = nx.layernorm(x, -1).data
    assert np.abs(y.mean(-1)).max() < 1e-5
    v = x.var(-1)
    np.testing.assert_allclose(y.var(-1), v / (v + 1e-5), atol=1e-9)
    assert np.abs(y.var(-1) - 1)[v > 0.1].max(initial=0) < 1e-4


def test_frozen_leaf_gets_no_grad_and_forward_unchanged(rng):
    a = nx.tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = nx.tensor(rng.normal(size=(3, 3)), requires_grad=False)
    y = nx.sum(nx.matmul(a, b))
    y.backward()
    assert a.grad is not None and b.grad is None
    b.requires_grad = True
    y2 = nx.sum(nx.matmul(a, b))
    assert y2.item() == y.item()
    y2.backward()
    assert b.grad is not None


def test_tape_visits_each_node_once():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = nx.sum(y + y)  # y reused: grads must accumulate, not double-visit
    tape = nx.ComputationTape.record(z)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    assert [n._id for n in tape.nodes] == sorted(n._id for n in tape.nodes)
    nx.backward(z, tape)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    x = nx.tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_float32_default_and_float64_mode():
    assert nx.tensor([1.0]).dtype == np.float32
    with nx.precision(np.float64):
        assert nx.tensor([1.0]).dtype == np.float64


def test_gradcheck_zero_gradient_on_large_loss_is_not_noise():
    # output does not depend on x[1]; its difference quotient is pure rounding
    f = lambda x: nx.sum(x * np.array([2.0, 0.0])) + 1e3  # noqa: E731
    assert nx.gradcheck(f, np.array([0.3, 0.7])) < 1e-6


def test_gradcheck_flags_a_wrong_gradient():
    x = np.array([0.4, -1.1, 2.0])
    ok = nx.gradcheck(lambda t: nx.sum(t * t), x)
    assert ok < 1e-6
    # scale the analytic gradient by detaching half the product
    wrong = nx.gradcheck(lambda t: nx.sum(t * t.detach()), x)
    assert wrong > 0.3
