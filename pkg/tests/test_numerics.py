import numpy as np
import pytest

from core import numerics as nx
from core.errors import ConfigurationError, NumericFault, TapeError, UsageError

TOL = 1e-6


def leaf(rng, *shape):
    return nx.Tensor(rng.normal(size=shape), requires_grad=True)


def positive(rng, *shape):
    return nx.Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)


def unary(op, *shape, domain=leaf):
    return lambda rng: (op, [domain(rng, *shape)])


def masked_ce_case(rng):
    targets = rng.integers(0, 5, size=(2, 3))
    mask = rng.random((2, 3)) < 0.5
    mask[0, 0] = True
    return (lambda x: nx.masked_cross_entropy(x, targets, mask)), [leaf(rng, 2, 3, 5)]


def embedding_case(rng):
    ids = rng.integers(0, 6, size=(2, 4))
    return (lambda t: nx.embedding(t, ids)), [leaf(rng, 6, 3)]


PRIMITIVE_CASES = {
    "add": lambda rng: (nx.add, [leaf(rng, 3, 4), leaf(rng, 4)]),
    "sub": lambda rng: (nx.sub, [leaf(rng, 3, 4), leaf(rng, 3, 1)]),
    "mul": lambda rng: (nx.mul, [leaf(rng, 3, 4), leaf(rng, 4)]),
    "div": lambda rng: (nx.div, [leaf(rng, 3, 4), positive(rng, 4)]),
    "neg": unary(nx.neg, 5),
    "exp": unary(nx.exp, 5),
    "log": unary(nx.log, 5, domain=positive),
    "sqrt": unary(nx.sqrt, 5, domain=positive),
    "tanh": unary(nx.tanh, 5),
    "sigmoid": unary(nx.sigmoid, 5),
    "softplus": unary(nx.softplus, 5),
    "gelu": unary(nx.gelu, 5),
    "tsum": unary(lambda a: nx.tsum(a, axis=0), 3, 4),
    "mean": unary(lambda a: nx.mean(a, axis=1), 3, 4),
    "reshape": unary(lambda a: nx.reshape(a, (2, 6)), 3, 4),
    "transpose": unary(lambda a: nx.transpose(a, (2, 0, 1)), 2, 3, 4),
    "matmul": lambda rng: (nx.matmul, [leaf(rng, 2, 3, 4), leaf(rng, 4, 2)]),
    "softmax": unary(lambda a: nx.softmax(a, axis=-1), 3, 5),
    "layer_norm": lambda rng: (nx.layer_norm, [leaf(rng, 2, 6), leaf(rng, 6), leaf(rng, 6)]),
    "embedding": embedding_case,
    "masked_cross_entropy": masked_ce_case,
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("primitive", sorted(PRIMITIVE_CASES))
def test_primitive_gradient_matches_finite_differences(primitive, seed):
    rng = np.random.default_rng(seed)
    op, inputs = PRIMITIVE_CASES[primitive](rng)
    with nx.no_grad():
        weights = rng.normal(size=op(*inputs).shape)
    assert nx.gradcheck(lambda *xs: nx.tsum(op(*xs) * weights), inputs) < 1e-4


def test_elementwise_broadcast_gradients(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    w = rng.normal(size=(3, 4))
    assert nx.gradcheck(lambda a, b: nx.tsum((a * b + a / (b * b + 2.0) - b) * w), [a, b]) < TOL


def test_matmul_gradient(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    assert nx.gradcheck(lambda a, b: nx.tsum(nx.tanh(a @ b)), [a, b]) < TOL


def test_softmax_layer_norm_gelu_gradients(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.normal(size=(2, 3, 6))

    def fn(x, g, b):
        return nx.tsum(nx.softmax(nx.gelu(nx.layer_norm(x, g, b)), axis=-1) * w)

    assert nx.gradcheck(fn, [x, g, b]) < TOL


def test_sigmoid_softplus_exp_log_sqrt_gradients(rng):
    x = nx.Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
    assert nx.gradcheck(lambda x: nx.tsum(nx.sigmoid(x) * nx.softplus(x) + nx.log(x) * nx.sqrt(x) - nx.exp(-x)),
                        [x]) < TOL


def test_reshape_transpose_mean_gradients(rng):
    x = leaf(rng, 2, 6)
    w = rng.normal(size=(3, 2, 2))
    assert nx.gradcheck(lambda x: nx.tsum(x.reshape(2, 3, 2).transpose(1, 0, 2) * w)
                        + x.mean(axis=1).sum(), [x]) < TOL


def test_embedding_and_cross_entropy_gradients(rng):
    table = leaf(rng, 7, 4)
    proj = leaf(rng, 4, 7)
    ids = np.array([[1, 3, 3], [6, 0, 2]])
    targets = np.array([[3, 3, 6], [0, 2, 5]])
    mask = np.array([[True, False, True], [True, True, False]])

    def fn(table, proj):
        return nx.masked_cross_entropy(nx.embedding(table, ids) @ proj, targets, mask)

    assert nx.gradcheck(fn, [table, proj]) < TOL


def test_cross_entropy_value_matches_uniform():
    logits = nx.Tensor(np.zeros((1, 2, 5)))
    loss = nx.masked_cross_entropy(logits, np.array([[1, 2]]), np.array([[True, True]]))
    assert loss.item() == pytest.approx(np.log(5))


def test_cross_entropy_matches_scalar_loop(rng):
    logits = rng.normal(size=(2, 4, 6))
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[True, False, False, True], [False, True, True, True]])
    total, count = 0.0, 0
    for b in range(2):
        for t in range(4):
            if not mask[b, t]:
                continue
            row = logits[b, t]
            top = max(row)
            total += top + np.log(sum(np.exp(z - top) for z in row)) - row[targets[b, t]]
            count += 1
    loss = nx.masked_cross_entropy(nx.Tensor(logits), targets, mask)
    assert loss.item() == pytest.approx(total / count, rel=1e-12)


def test_cross_entropy_empty_mask_is_usage_error():
    with pytest.raises(UsageError):
        nx.masked_cross_entropy(nx.Tensor(np.zeros((1, 2, 3))), np.array([[0, 1]]), np.array([[False, False]]))


def test_backward_accumulates_shared_inputs():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.recording():
        nx.backward(nx.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_second_backward_on_consumed_tape_raises():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.recording():
        loss = nx.tsum(x * x)
        nx.backward(loss)
    with pytest.raises(TapeError):
        nx.backward(loss)


def test_non_finite_value_raises():
    with pytest.raises(NumericFault):
        nx.log(nx.Tensor([-1.0]))


def test_shape_errors_are_configuration_errors():
    with pytest.raises(ConfigurationError):
        nx.add(nx.Tensor(np.zeros(3)), nx.Tensor(np.zeros(4)))
    with pytest.raises(ConfigurationError):
        nx.matmul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((4, 2))))
    with pytest.raises(ConfigurationError):
        nx.embedding(nx.Tensor(np.zeros((3, 2))), np.array([3]))


def test_no_grad_records_nothing():
    x = nx.Tensor([1.0], requires_grad=True)
    with nx.recording() as tape:
        with nx.no_grad():
            y = x * 2.0
        assert len(tape) == 0
    assert not y.requires_grad


def test_backward_requires_scalar():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.recording():
        with pytest.raises(UsageError):
            nx.backward(x * 2.0)


def test_ndarray_on_the_left_defers_to_tensor():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.recording():
        y = np.array([3.0, 4.0]) * x
        assert isinstance(y, nx.Tensor)
        nx.backward(nx.tsum(y))
    np.testing.assert_allclose(x.grad, [3.0, 4.0])
