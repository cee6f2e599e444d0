import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechchain import autograd as ag
from speechchain.autograd import GraphError, ShapeError, Tensor, no_grad
from speechchain.gradcheck import NonFiniteError, gradient_check

TOL = 1e-4
SHAPES = [(1,), (3,), (2, 3), (4, 1), (2, 3, 2)]


def away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def assert_passes(f, x):
    rep = gradient_check(f, x, TOL)
    assert rep.passed, rep.max_rel_err


# -- forward examples ---------------------------------------------------------

def test_softmax_uniform():
    out = ag.softmax(Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, [0.25] * 4)


def test_leaky_relu_example():
    out = ag.leaky_relu(Tensor([-1.0, 2.0]), 0.01)
    np.testing.assert_allclose(out.data, [-0.01, 2.0])


def test_matmul_shape_and_grad():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    assert ag.matmul(Tensor(a), Tensor(b)).shape == (2, 4)
    assert_passes(lambda x: ag.sum(ag.tanh(ag.matmul(x, Tensor(b)))), a)
    assert_passes(lambda x: ag.sum(ag.tanh(ag.matmul(Tensor(a), x))), b)
    assert gradient_check(lambda x: ag.sum(ag.square(ag.matmul(x, Tensor(b)))), a, 1e-6).passed


# -- every primitive, several shapes -----------------------------------------

UNARY = {
    "tanh": ag.tanh,
    "sigmoid": ag.sigmoid,
    "exp": ag.exp,
    "square": ag.square,
    "neg": ag.neg,
    "leaky_relu": lambda x: ag.leaky_relu(x, 0.01),
    "softmax": lambda x: ag.softmax(x, axis=-1),
    "log_softmax": lambda x: ag.log_softmax(x, axis=-1),
    "sum_axis0": lambda x: ag.sum(x, axis=0),
    "mean": ag.mean,
    "mean_last": lambda x: ag.mean(x, axis=-1, keepdims=True),
    "slice": lambda x: x[..., :1],
    "reshape": lambda x: ag.reshape(x, (-1,)),
    "transpose": lambda x: ag.transpose(x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_gradients(name, shape):
    rng = np.random.default_rng(len(shape) * 31 + sum(shape))
    op = UNARY[name]
    # weighted sum so that e.g. a softmax does not sum to a constant
    w = weights_for(op, shape)
    assert_passes(lambda x: ag.sum(ag.mul(op(x), Tensor(w))), away_from_zero(rng, shape))


def weights_for(op, shape, seed=0):
    out_shape = op(Tensor(np.ones(shape))).shape
    return np.random.default_rng(seed).standard_normal(out_shape)


@pytest.mark.parametrize("shape", SHAPES)
def test_log_gradient(shape):
    rng = np.random.default_rng(1)
    assert_passes(lambda x: ag.sum(ag.log(x)), rng.uniform(0.5, 2.0, shape))


BINARY = {"add": ag.add, "sub": ag.sub, "mul": ag.mul, "div": ag.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shapes", [((3,), (3,)), ((2, 3), (3,)), ((2, 3), (2, 1)),
                                    ((4, 1), (1, 5)), ((2, 3, 2), (2,))])
def test_binary_broadcast_gradients(name, shapes):
    rng = np.random.default_rng(2)
    a = rng.uniform(0.5, 1.5, shapes[0])
    b = rng.uniform(0.5, 1.5, shapes[1])
    op = BINARY[name]
    out_w = rng.standard_normal(np.broadcast_shapes(*shapes))
    assert_passes(lambda x: ag.sum(ag.mul(op(x, Tensor(b)), Tensor(out_w))), a)
    assert_passes(lambda x: ag.sum(ag.mul(op(Tensor(a), x), Tensor(out_w))), b)


@pytest.mark.parametrize("axis", [0, -1])
def test_concat_and_stack(axis):
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    w = rng.standard_normal((4, 3) if axis == 0 else (2, 6))
    assert_passes(lambda x: ag.sum(ag.mul(ag.concat([x, Tensor(b)], axis), Tensor(w))), a)
    ws = rng.standard_normal((2, 2, 3))
    assert_passes(lambda x: ag.sum(ag.mul(ag.stack([Tensor(b), x]), Tensor(ws))), a)


def test_embedding_lookup_repeated_ids_accumulate():
    rng = np.random.default_rng(4)
    table = rng.standard_normal((5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    w = rng.standard_normal((2, 3, 3))
    assert_passes(lambda t: ag.sum(ag.mul(ag.embedding_lookup(t, ids), Tensor(w))), table)
    t = Tensor(table, requires_grad=True)
    ag.sum(ag.embedding_lookup(t, ids)).backward()
    np.testing.assert_array_equal(t.grad[:, 0], [2, 1, 2, 0, 1])


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_conv1d_gradients(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((k, 3, 2))
    b = rng.standard_normal(2)
    assert ag.conv1d(Tensor(x), Tensor(w)).shape == (2, 5, 2)
    f = lambda x_, w_, b_: ag.sum(ag.tanh(ag.conv1d(x_, w_, b_)))
    assert_passes(lambda t: f(t, Tensor(w), Tensor(b)), x)
    assert_passes(lambda t: f(Tensor(x), t, Tensor(b)), w)
    assert_passes(lambda t: f(Tensor(x), Tensor(w), t), b)


def test_conv1d_same_padding_matches_numpy():
    x = np.arange(6.0).reshape(1, 6, 1)
    w = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    out = ag.conv1d(Tensor(x), Tensor(w)).data[0, :, 0]
    np.testing.assert_allclose(out, np.correlate(np.pad(x[0, :, 0], 1), w[:, 0, 0], "valid"))


@pytest.mark.parametrize("shape", [(1, 4, 2), (2, 5, 3), (3, 2, 1), (1, 1, 4), (2, 7, 2)])
def test_max_pool_gradients(shape):
    rng = np.random.default_rng(5)
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.1 - 1.0  # no ties
    w = weights_for(ag.max_pool1d, shape)
    assert_passes(lambda t: ag.sum(ag.mul(ag.max_pool1d(t), Tensor(w))), x)


def test_max_pool_values():
    x = np.array([1.0, 3.0, 2.0, -1.0]).reshape(1, 4, 1)
    np.testing.assert_array_equal(ag.max_pool1d(Tensor(x)).data[0, :, 0], [3, 3, 2, 0])


def test_lstm_cell_gradients():
    rng = np.random.default_rng(6)
    B, D, H = 2, 3, 2
    args = [rng.standard_normal(s) * 0.5 for s in [(B, D), (B, H), (B, H), (D, 4 * H),
                                                   (H, 4 * H), (4 * H,)]]
    w = rng.standard_normal((B, 2 * H))
    for i in range(len(args)):
        def f(t, i=i):
            ins = [Tensor(a) for a in args]
            ins[i] = t
            return ag.sum(ag.mul(ag.lstm_cell(*ins), Tensor(w)))
        assert_passes(f, args[i])


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_layer_gradients_with_mask(reverse):
    rng = np.random.default_rng(7)
    B, S, D, H = 2, 4, 3, 2
    x = rng.standard_normal((B, S, D))
    w_in, w_rec, b = (rng.standard_normal(s) * 0.5 for s in [(D, 4 * H), (H, 4 * H), (4 * H,)])
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    w = rng.standard_normal((B, S, H))

    def run(x_, wi, wr, b_):
        return ag.sum(ag.mul(ag.lstm_layer(x_, wi, wr, b_, mask, reverse), Tensor(w)))

    params = [x, w_in, w_rec, b]
    for i in range(4):
        def f(t, i=i):
            ins = [Tensor(a) for a in params]
            ins[i] = t
            return run(*ins)
        assert_passes(f, params[i])


def test_lstm_layer_padding_matches_unpadded():
    rng = np.random.default_rng(8)
    D, H = 3, 2
    w_in, w_rec, b = (rng.standard_normal(s) for s in [(D, 4 * H), (H, 4 * H), (4 * H,)])
    short = rng.standard_normal((1, 3, D))
    padded = np.concatenate([short, rng.standard_normal((1, 2, D))], axis=1)
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    for rev in (False, True):
        a = ag.lstm_layer(short, w_in, w_rec, b, reverse=rev).data
        p = ag.lstm_layer(padded, w_in, w_rec, b, mask, reverse=rev).data
        np.testing.assert_allclose(p[:, :3], a, atol=1e-12)
        assert np.all(p[:, 3:] == 0)


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(9)
    W = [rng.standard_normal(s) * 0.7 for s in [(4, 5), (5, 5), (5, 3)]]
    x = rng.standard_normal((6, 4))

    def loss(ws):
        h = Tensor(x)
        for i, w in enumerate(ws):
            h = ag.matmul(h, w)
            if i < 2:
                h = ag.tanh(h)
        return ag.mean(ag.square(h))

    for i in range(3):
        def f(t, i=i):
            ws = [Tensor(w) for w in W]
            ws[i] = t
            return loss(ws)
        assert_passes(f, W[i])


def test_softmax_cross_entropy():
    rng = np.random.default_rng(10)
    logits = rng.standard_normal((4, 6))
    onehot = np.eye(6)[rng.integers(0, 6, 4)]
    assert_passes(lambda z: ag.neg(ag.sum(ag.mul(ag.log_softmax(z), Tensor(onehot)))), logits)


# -- backward semantics --------------------------------------------------------

@pytest.mark.parametrize("shape", SHAPES)
def test_sum_grad_is_ones(shape):
    x = Tensor(np.random.default_rng(0).standard_normal(shape), requires_grad=True)
    ag.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_square_grad():
    x = Tensor([3.0], requires_grad=True)
    ag.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    ag.sum(x * x + x * 3.0 + x).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_unreachable_untouched():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([1.0], requires_grad=True)
    ag.sum(x * 2.0).backward()
    assert y.grad is None


def test_non_scalar_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_second_backward_raises():
    x = Tensor([1.0], requires_grad=True)
    loss = ag.sum(x * x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = ag.sum(x * 2.0)
    assert not y.requires_grad
    with pytest.raises(GraphError):
        y.backward()


@pytest.mark.parametrize("op,a,b", [
    ("matmul", (2, 3), (4, 2)),
    ("add", (2, 3), (4,)),
    ("mul", (3,), (2,)),
    ("concat", (2, 3), (3, 3)),
])
def test_shape_errors_name_primitive(op, a, b):
    x, y = Tensor(np.ones(a)), Tensor(np.ones(b))
    with pytest.raises(ShapeError) as exc:
        if op == "concat":
            ag.concat([x, y], axis=-1)
        else:
            getattr(ag, op)(x, y)
    msg = str(exc.value)
    assert op in msg and str(a) in msg and str(b) in msg


def test_conv_and_lstm_shape_errors():
    with pytest.raises(ShapeError, match="conv1d"):
        ag.conv1d(np.ones((1, 4, 3)), np.ones((2, 2, 1)))
    with pytest.raises(ShapeError, match="lstm_layer"):
        ag.lstm_layer(np.ones((1, 4, 3)), np.ones((2, 8)), np.ones((2, 8)), np.ones(8))


# -- gradient checker -----------------------------------------------------------

def test_gradcheck_sum_is_exact():
    # dyadic point and power-of-two step: the differences are exact
    x0 = np.arange(-3, 3, dtype=float).reshape(3, 2) / 4
    rep = gradient_check(lambda x: ag.sum(x), x0, step=2.0 ** -16)
    assert rep.max_rel_err == 0.0 and rep.passed
    rep = gradient_check(lambda x: ag.sum(x), np.random.default_rng(0).standard_normal((3, 2)))
    assert rep.max_rel_err < 1e-9


def test_gradcheck_detects_negated_gradient():
    x0 = np.random.default_rng(1).standard_normal(4)
    rep = gradient_check(lambda x: ag.sum(ag.square(x)), x0, grad_fn=lambda x: -2 * x)
    assert not rep.passed


def test_gradcheck_rejects_non_finite():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        gradient_check(lambda x: ag.sum(ag.log(x)), np.array([-1.0, 1.0]))


# -- properties -------------------------------------------------------------------

floats = st.floats(-3, 3, allow_nan=False)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000),
       st.floats(-5, 5), st.floats(-5, 5))
def test_backward_is_linear(rows, cols, seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((rows, cols))
    w = rng.standard_normal((rows, cols))

    def grad(build):
        x = Tensor(x0, requires_grad=True)
        build(x).backward()
        return x.grad

    f = lambda x: ag.sum(ag.mul(ag.tanh(x), Tensor(w)))
    g = lambda x: ag.mean(ag.square(x))
    combined = grad(lambda x: ag.add(ag.mul(f(x), a), ag.mul(g(x), b)))
    np.testing.assert_allclose(combined, a * grad(f) + b * grad(g), rtol=1e-10, atol=1e-12)


@given(st.lists(st.lists(floats, min_size=3, max_size=3), min_size=1, max_size=5),
       st.sampled_from([0, -1]))
def test_softmax_is_distribution(rows, axis):
    p = ag.softmax(Tensor(np.array(rows) * 10), axis=axis).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)
