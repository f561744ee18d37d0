import math

import numpy as np
import pytest

from vubert import tensor as T
from vubert.checkpoint import load_tensors, save_tensors
from vubert.errors import ContractError, ShapeError
from vubert.optim import AdamState, adam_step
from vubert.tensor import Tensor, grad_check

SEEDS = range(10)
TOL = 1e-4


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


# ---------------------------------------------------------------- matmul

def test_matmul_identity_cases():
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, eye).data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, eye).data, a.data)


def test_matmul_matches_elementwise_sum_oracle(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    oracle = np.array([[sum(a.data[i, k] * b.data[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(T.matmul(a, b).data, oracle, rtol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    assert grad_check(lambda x: T.sum_(T.mul(T.matmul(x, b), Tensor(w))), a) < 1e-6
    assert grad_check(lambda x: T.sum_(T.mul(T.matmul(a, x), Tensor(w))), b) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_broadcast_gradient(rng):
    a, w = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert grad_check(lambda x: T.sum_(T.matmul(a, x) * T.matmul(a, x)), w) < TOL


# ---------------------------------------------------------------- softmax / gelu / layer norm / cross entropy

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0) and y[1] < 1e-300


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_and_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 6)
    y = T.softmax(x, axis=-1).data
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12
    w = Tensor(rng.normal(size=(4, 6)))
    assert grad_check(lambda t: T.sum_(T.mul(T.softmax(t), w)), x) < TOL


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_within_band_of_tanh_approximation(rng):
    x = np.linspace(-6, 6, 401)
    approx = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.max(np.abs(T.gelu(Tensor(x)).data - approx)) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_gradient(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=7))
    assert grad_check(lambda t: T.sum_(T.mul(T.gelu(t), w)), rand(rng, 7)) < TOL


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, np.zeros((1, 4)))
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_allclose(T.layer_norm(Tensor(row), g, b).data, row, atol=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand(rng, 3, 5), rand(rng, 5), rand(rng, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    f = lambda: T.sum_(T.mul(T.layer_norm(x, g, b), w))  # noqa: E731
    for leaf in (x, g, b):
        assert grad_check(lambda _: f(), leaf) < TOL


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-12)
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 2] = 1000.0
    assert T.cross_entropy(Tensor(logits), [1, 2]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 6, size=4)
    assert grad_check(lambda t: T.cross_entropy(t, targets), rand(rng, 4, 6)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_log_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(2, 5)))
    assert grad_check(lambda t: T.sum_(T.mul(T.log_softmax(t), w)), rand(rng, 2, 5)) < TOL


# ---------------------------------------------------------------- dropout

def test_dropout_identities(rng):
    x = rand(rng, 50)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.9, False, rng) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        T.dropout(x, -0.1, True, rng)


def test_dropout_rate_and_scaling():
    rng = np.random.default_rng(0)
    y = T.dropout(Tensor(np.ones(100_000)), 0.1, True, rng).data
    zero_frac = np.mean(y == 0.0)
    # binomial(1e5, 0.1): sd ~ 0.00095, so [0.09, 0.11] is over 10 sd wide
    assert 0.09 <= zero_frac <= 0.11
    np.testing.assert_allclose(y[y != 0], 1 / 0.9)


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(3)
    x = Tensor(np.random.default_rng(4).normal(size=20), requires_grad=True)
    y = T.dropout(x, 0.5, True, rng)
    T.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, (y.data != 0) / 0.5)


# ---------------------------------------------------------------- layout ops

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_layout_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    row = rand(rng, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    checks = {
        "add": lambda t: T.sum_(T.mul(T.add(t, b), w)),
        "add_broadcast": lambda t: T.sum_(T.mul(T.add(a, t), w)),
        "sub": lambda t: T.sum_(T.mul(T.sub(b, t), w)),
        "mul": lambda t: T.sum_(T.mul(T.mul(t, b), w)),
        "scale": lambda t: T.sum_(T.mul(T.scale(t, -2.5), w)),
        "transpose": lambda t: T.sum_(T.mul(T.transpose(t), T.transpose(w))),
        "reshape": lambda t: T.sum_(T.mul(T.reshape(t, (2, 6)), Tensor(w.data.reshape(2, 6)))),
        "concat": lambda t: T.sum_(T.mul(T.concat([t, b], axis=0), Tensor(np.vstack([w.data, w.data])))),
        "slice": lambda t: T.sum_(T.mul(t[1:, 2:], Tensor(w.data[1:, 2:]))),
        "gather": lambda t: T.sum_(T.mul(t[np.array([0, 2, 0])], Tensor(w.data))),
        "mean": lambda t: T.mean(T.mul(t, t)),
        "exp": lambda t: T.sum_(T.exp(t)),
    }
    for name, f in checks.items():
        x = row if name == "add_broadcast" else a
        assert grad_check(f, Tensor(x.data.copy())) < TOL, name


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_lookup_scatter_adds(seed):
    rng = np.random.default_rng(seed)
    table = rand(rng, 5, 3)
    ids = np.array([0, 3, 3, 1, 3])
    w = Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda t: T.sum_(T.mul(T.embedding_lookup(t, ids), w)), table) < TOL
    table.requires_grad = True
    table.grad = None
    T.sum_(T.embedding_lookup(table, ids)).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [1, 1, 0, 3, 0])


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        T.embedding_lookup(Tensor(np.zeros((3, 2))), [3])


def test_shared_subexpression_accumulates(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = T.mul(x, x)
    shared = T.add(y, y)
    T.sum_(shared).backward()
    shared_grad = x.grad.copy()
    # duplicated construction: build y twice independently
    x2 = Tensor(x.data.copy(), requires_grad=True)
    T.sum_(T.add(T.mul(x2, x2), T.mul(x2, x2))).backward()
    np.testing.assert_allclose(shared_grad, x2.grad, rtol=1e-15)
    np.testing.assert_allclose(shared_grad, 4 * x.data, rtol=1e-15)


def test_topological_order_parents_first(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    z = T.sum_(T.add(T.mul(x, x), T.exp(x)))
    order = T.topological_order(z)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_no_grad_skips_graph(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_examples():
    assert grad_check(lambda t: T.sum_(t), Tensor(np.random.default_rng(0).normal(size=5))) < 1e-9
    assert grad_check(lambda t: T.sum_(T.mul(t, t)), Tensor([1.0, 2.0, 3.0]), h=1e-5) < 1e-7
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ContractError):
        grad_check(lambda t: T.mul(t, t), Tensor([1.0, 2.0]))


def test_grad_check_detects_wrong_gradient():
    def broken(t):
        out = T.scale(t, 2.0)
        out._backward = lambda g: T._accum(t, g * 3.0)
        return T.sum_(out)

    assert grad_check(broken, Tensor([1.0, 2.0])) > 0.1


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    before = p["w"].data.copy()
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"].data, before) and state.step == 1


def test_adam_descends_and_converges():
    w = Tensor(np.array([1.0]))
    state = AdamState(lr=0.1)
    adam_step({"w": w}, {"w": 2 * w.data}, state)
    assert w.data[0] < 1.0
    w = Tensor(np.array([0.0]))
    state = AdamState(lr=0.1)
    for _ in range(200):
        adam_step({"w": w}, {"w": 2 * (w.data - 3.0)}, state)
    assert abs(w.data[0] - 3.0) < 1e-2
    assert state.step == 200


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState())


def test_adam_is_deterministic(rng):
    g = rng.normal(size=(3, 3))
    results = []
    for _ in range(2):
        p = {"w": Tensor(np.ones((3, 3)))}
        s = AdamState(lr=0.01)
        for _ in range(5):
            adam_step(p, {"w": g}, s)
        results.append(p["w"].data.tobytes())
    assert results[0] == results[1]


# ---------------------------------------------------------------- checkpoint container

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "scalar": np.array(2.5),
               "weird/name": rng.normal(size=(2, 1, 3))}
    meta = {"config_hash": "abc", "step": 7}
    save_tensors(tmp_path / "x.ckpt", tensors, meta)
    back, meta2 = load_tensors(tmp_path / "x.ckpt")
    assert meta2 == meta
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    save_tensors(tmp_path / "y.ckpt", back, meta2)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
