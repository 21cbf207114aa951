import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clsgen import tensor as T
from clsgen.tensor import HIGH, Parameter, Tape, Tensor

SEEDS = range(20)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_grads(build, shapes, seed, tol=1e-4, positive=False):
    """Compare backprop with central differences for a scalar projection of ``build``."""
    rng = np.random.default_rng(seed)
    values = [rng.normal(size=s) for s in shapes]
    if positive:
        values = [np.abs(v) + 0.5 for v in values]
    out_probe = build(*[Tensor(v) for v in values])
    weights = rng.normal(size=out_probe.shape)

    def scalar(*vals):
        return float((build(*[Tensor(v) for v in vals]).data * weights).sum())

    params = [Parameter(v.astype(HIGH)) for v in values]
    with Tape() as tape:
        out = build(*params)
        loss = T.sum_(T.mul(out, Tensor(weights)))
    grads = T.backprop(loss, tape, params)
    for i, v in enumerate(values):
        def f(x, i=i):
            vals = list(values)
            vals[i] = x
            return scalar(*vals)

        numeric = T.finite_diff_grad(f, v)
        assert rel_err(grads[i], numeric) < tol, f"input {i}"


# worked values --------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [-1.0, 1.0])


@pytest.mark.parametrize("logits,target,expected", [
    ([0.0, 0.0], 0, math.log(2.0)),
    ([100.0, -100.0], 0, 0.0),
    ([1.0, 2.0], 1, math.log(1.0 + math.exp(-1.0))),
])
def test_softmax_cross_entropy_values(logits, target, expected):
    loss = T.softmax_cross_entropy(Tensor(logits), target).item()
    assert loss == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_frozen_value():
    assert T.softmax_cross_entropy(Tensor([1.0, 2.0]), 1).item() == pytest.approx(0.31326168751822286, abs=1e-12)


def test_softmax_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)


def test_square_grad():
    x = Parameter(np.array(3.0))
    with Tape() as tape:
        y = T.mul(x, x)
    (g,) = T.backprop(y, tape, [x])
    assert g == pytest.approx(6.0)


def test_unused_parameter_zero_grad():
    x = Parameter(np.array([1.0, 2.0]))
    unused = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = T.sum_(T.mul(x, x))
    gx, gu = T.backprop(y, tape, [x, unused])
    np.testing.assert_allclose(gx, [2.0, 4.0])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_detached_loss_raises():
    x = Parameter(np.array([1.0]))
    y = T.sum_(T.mul(x, x))  # no tape active
    with pytest.raises(T.DetachedError):
        T.backprop(y, Tape(), [x])


def test_fan_out_accumulates():
    x = Parameter(np.array([2.0]))
    with Tape() as tape:
        y = T.sum_(T.add(T.mul(x, x), T.scale(x, 3.0)))
    (g,) = T.backprop(y, tape, [x])
    assert g[0] == pytest.approx(2 * 2.0 + 3.0)


def test_finite_diff_sum_is_ones():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_allclose(T.finite_diff_grad(lambda v: float(v.sum()), x), np.ones((3, 4)), atol=1e-9)


def test_finite_diff_square():
    g = T.finite_diff_grad(lambda v: float(v[0] * v[0]), np.array([3.0]), eps=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_shape_errors_name_op():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(T.ShapeError, match="concat"):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=-1)


def test_non_finite_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError):
        T.mul(Tensor([1e200]), Tensor([1e200]))


def test_dropout_train_only():
    x = Tensor(np.ones((50, 50)))
    assert T.dropout(x, 0.5, None, training=False) is x
    out = T.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.1


def test_masked_fill_blocks_gradient():
    x = Parameter(np.array([1.0, 2.0, 3.0]))
    mask = np.array([False, True, False])
    with Tape() as tape:
        y = T.sum_(T.masked_fill(x, mask, 0.0))
    (g,) = T.backprop(y, tape, [x])
    np.testing.assert_array_equal(g, [1.0, 0.0, 1.0])


# per-op gradient checks ------------------------------------------------------

OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "softmax": (lambda a: T.softmax(a), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a), [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "gelu": (lambda a: T.gelu(a), [(4, 5)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "slice": (lambda a: T.take(a, (slice(None), slice(1, 3))), [(3, 4)]),
    "gather": (lambda a: T.take(a, (np.array([0, 2, 2]), np.array([1, 0, 1]))), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=1), [(3, 4)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [0, 2, 1]), [(3, 4)]),
    "masked_fill": (lambda a: T.masked_fill(a, np.triu(np.ones((4, 4), bool), 1), -3.0), [(2, 4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradient_matches_finite_differences(name, seed):
    build, shapes = OPS[name]
    check_grads(build, shapes, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_gradient(seed):
    ids = np.random.default_rng(seed + 100).integers(0, 5, size=(2, 3))
    check_grads(lambda w: T.embedding(w, ids), [(5, 4)], seed)


# properties -------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert (p >= 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=finite), st.data())
def test_cross_entropy_non_negative(logits, data):
    target = data.draw(st.integers(0, logits.size - 1))
    assert T.softmax_cross_entropy(Tensor(logits), target).item() >= 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_tracking_does_not_change_values(a, b):
    untracked = T.gelu(T.matmul(Tensor(a), Tensor(b))).data
    with Tape():
        tracked = T.gelu(T.matmul(Parameter(a), Parameter(b))).data
    np.testing.assert_array_equal(untracked, tracked)


def test_parameter_assign_checks_shape():
    p = Parameter(np.zeros(3))
    with pytest.raises(T.ShapeError):
        p.assign(np.zeros(4))
