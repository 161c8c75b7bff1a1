import numpy as np
import pytest
from hypothesis import given, strategies as st

from radlab import tensor as T
from radlab.tensor import ContractError, ShapeError

from helpers import grad_check, project
from oracles import softmax_ce, triple_loop_matmul

SEEDS = range(5)


# -- forward examples ---------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(T.tensor(np.eye(2)), T.tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.numpy(), [[3, 4], [5, 6]])


def test_matmul_zero():
    b = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(T.matmul(T.zeros((2, 3)), T.tensor(b)).numpy(), np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    assert (T.tensor(a) @ T.tensor(b)).numpy().tolist() == triple_loop_matmul(a, b) == [[19, 22], [43, 50]]


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_random_against_oracle(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(-5, 5, (n, k)), rng.integers(-5, 5, (k, m))
    assert (T.tensor(a) @ T.tensor(b)).numpy().tolist() == triple_loop_matmul(a.tolist(), b.tolist())


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(T.zeros((2, 3)), T.zeros((3, 1)))
    with pytest.raises(ShapeError):
        T.mul(T.zeros((2, 3)), T.zeros((1, 3)))


def test_storage_is_float32_by_default():
    assert T.tensor([1.0]).numpy().dtype == np.float32
    with T.precision(np.float64):
        assert T.tensor([1.0]).numpy().dtype == np.float64
    assert T.get_dtype() == np.float32


def test_tensor_data_is_read_only():
    t = T.tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5


# -- backward examples ----------------------------------------------------------


def test_grad_of_sum_is_ones():
    w = T.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(w)
    np.testing.assert_array_equal(T.backward(tape, loss)[w], np.ones((2, 3)))


def test_grad_of_sum_of_squares():
    w = T.tensor([2.0, -3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(w * w)
    np.testing.assert_array_equal(T.backward(tape, loss)[w], [4.0, -6.0])


def test_fan_out_sums_both_paths():
    # loss = sum(x*x + 3x) through a shared variable; oracle: duplicate x into two leaves.
    x0 = np.array([0.5, -1.5, 2.0])
    x = T.tensor(x0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.add(T.mul(x, x), T.scale(x, 3.0)))
    shared = T.backward(tape, loss)[x]
    a, b, c = (T.tensor(x0, requires_grad=True) for _ in range(3))
    with T.Tape() as tape:
        loss = T.sum_all(T.add(T.mul(a, b), T.scale(c, 3.0)))
    g = T.backward(tape, loss)
    np.testing.assert_allclose(shared, g[a] + g[b] + g[c])


def test_backward_rejects_non_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_no_grad_records_nothing():
    x = T.tensor([1.0], requires_grad=True)
    with T.Tape() as tape, T.no_grad():
        T.scale(x, 2.0)
    assert len(tape) == 0


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        T.tensor([1.0, 2.0]).item()


# -- finite-difference checks, five seeds per primitive -----------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a, b: project(T.matmul(a, b), seed), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_batched_matmul(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a, b: project(T.matmul(a, b), seed), [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_and_bias(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a, b: project(T.add(a, b), seed), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])
    grad_check(lambda a, b: project(T.add(a, b), seed), [rng.standard_normal((2, 3, 4)), rng.standard_normal(4)])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mul_scale_relu(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a, b: project(T.mul(a, b), seed), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])
    grad_check(lambda a: project(T.scale(a, -1.7), seed), [rng.standard_normal((5,))])
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    grad_check(lambda a: project(T.relu(a), seed), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_shape_ops(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a: project(T.reshape(a, (6, 2)), seed), [rng.standard_normal((3, 4))])
    grad_check(lambda a: project(T.transpose(a, (2, 0, 1)), seed), [rng.standard_normal((2, 3, 4))])
    grad_check(lambda a: project(T.expand(a, (2, 3, 4)), seed), [rng.standard_normal((2, 1, 4))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    grad_check(lambda a: project(T.softmax(a), seed), [rng.standard_normal((3, 5))])
    grad_check(lambda a: project(T.softmax(a, mask), seed), [rng.standard_normal((3, 5))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_rms_norm(seed):
    rng = np.random.default_rng(seed)
    grad_check(lambda a, w: project(T.rms_norm(a, w), seed), [rng.standard_normal((3, 6)), rng.standard_normal(6)])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_embedding(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, (2, 4))  # repeats exercise scatter-add
    grad_check(lambda t: project(T.embedding(t, ids), seed), [rng.standard_normal((5, 3))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 6, 5)
    targets[1] = 0
    grad_check(lambda z: T.cross_entropy(z, targets, ignore_id=0), [rng.standard_normal((5, 6))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_two_layer_network(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3))
    targets = rng.integers(0, 5, 4)

    def net(w1, b1, w2):
        h = T.relu(T.add(T.matmul(T.tensor(x), w1), b1))
        return T.cross_entropy(T.matmul(h, w2), targets, ignore_id=-1)

    grad_check(net, [rng.standard_normal((3, 6)), rng.standard_normal(6) + 0.3, rng.standard_normal((6, 5))])


# -- cross-entropy examples and properties ---------------------------------------


def test_cross_entropy_uniform():
    loss = T.cross_entropy(T.zeros((3, 4)), [0, 1, 3], ignore_id=-1).item()
    assert loss == pytest.approx(np.log(4), abs=1e-6)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000
    assert T.cross_entropy(T.tensor(logits), [2], ignore_id=-1).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_direct_softmax():
    expected = softmax_ce([1.0, 2.0, 3.0], 2)
    assert expected == pytest.approx(0.40761, abs=1e-5)
    assert T.cross_entropy(T.tensor([[1.0, 2.0, 3.0]]), [2], ignore_id=-1).item() == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_ignores_positions():
    logits = np.random.default_rng(0).standard_normal((3, 4))
    full = T.cross_entropy(T.tensor(logits[:2]), [1, 2], ignore_id=0).item()
    masked = T.cross_entropy(T.tensor(logits), [1, 2, 0], ignore_id=0).item()
    assert masked == pytest.approx(full, abs=1e-6)
    with pytest.raises(ContractError):
        T.cross_entropy(T.tensor(logits), [0, 0, 0], ignore_id=0)


@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 7)) * 3
    targets = rng.integers(0, 7, 4)
    perm = rng.permutation(7)
    inv = np.argsort(perm)
    a = T.cross_entropy(T.tensor(logits), targets, ignore_id=-1).item()
    b = T.cross_entropy(T.tensor(logits[:, perm]), inv[targets], ignore_id=-1).item()
    assert abs(a - b) < 1e-6


def test_softmax_fully_masked_row_is_zero():
    out = T.softmax(T.tensor(np.ones((2, 3))), np.array([[True, False, True], [False, False, False]])).numpy()
    np.testing.assert_allclose(out[0], [0.5, 0, 0.5])
    np.testing.assert_array_equal(out[1], 0)


@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((3, 6)) * 20
    np.testing.assert_allclose(T.softmax(T.tensor(x)).numpy().sum(axis=-1), 1.0, atol=1e-6)
