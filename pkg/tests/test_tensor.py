import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradcheck
from diffpolicy.tensor import (
    AdamState,
    Checkpoint,
    CheckpointError,
    ContractError,
    DimensionError,
    EmaState,
    Linear,
    Parameter,
    Tensor,
    adam_step,
    ema_update,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from diffpolicy.tensor import core as T

TOL = 1e-4


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def proj(rng, shape):
    # random projection so every output element enters the loss with its own weight
    return rng.standard_normal(shape)


UNARY = [
    ("exp", T.exp, False),
    ("log", T.log, True),
    ("sqrt", T.sqrt, True),
    ("tanh", T.tanh, False),
    ("gelu", T.gelu, False),
    ("pow3", lambda x: x ** 3, False),
    ("neg", lambda x: -x, False),
    ("softmax", lambda x: T.softmax(x, axis=-1), False),
    ("mean", lambda x: x.mean(axis=0), False),
    ("sum_keep", lambda x: x.sum(axis=1, keepdims=True), False),
    ("transpose", lambda x: x.transpose(1, 0), False),
    ("getitem", lambda x: x[1:, ::2], False),
    ("reshape", lambda x: x.reshape(-1), False),
]


@pytest.mark.parametrize("name,fn,positive", UNARY, ids=[u[0] for u in UNARY])
def test_unary_gradients(name, fn, positive, rng):
    x = leaf(rng, 3, 4, positive=positive)
    w = proj(rng, fn(x).shape)
    assert gradcheck(lambda: (fn(x) * w).sum(), [x]) < TOL


def test_relu_gradient_away_from_kink(rng):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    w = proj(rng, (3, 4))
    assert gradcheck(lambda: (T.relu(x) * w).sum(), [x]) < TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op, rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 3, 1, positive=(op == "div"))
    fn = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
    w = proj(rng, (2, 3, 4))
    assert gradcheck(lambda: (fn() * w).sum(), [a, b]) < TOL


@pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
def test_matmul_gradients(shapes, rng):
    a, b = leaf(rng, *shapes[0]), leaf(rng, *shapes[1])
    w = proj(rng, (a @ b).shape)
    assert gradcheck(lambda: ((a @ b) * w).sum(), [a, b]) < TOL


def test_concat_stack_where_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    cond = np.array([[True, False, True], [False, True, False]])
    w1 = proj(rng, (2, 5))
    w2 = proj(rng, (2, 2, 3))
    loss = lambda: (T.concat([a, b], axis=1) * w1).sum() + (T.stack([a, a * 2.0], axis=1) * w2).sum() \
        + T.where(cond, a, a * a).sum()
    assert gradcheck(loss, [a, b]) < TOL


def test_layer_norm_gradients(rng):
    x = leaf(rng, 3, 6)
    g = leaf(rng, 6)
    b = leaf(rng, 6)
    w = proj(rng, (3, 6))
    assert gradcheck(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < TOL


def test_masked_softmax_zeroes_masked_entries(rng):
    x = leaf(rng, 4, 4)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = T.softmax(x, mask=mask)
    assert np.all(out.data[~mask] == 0)
    np.testing.assert_allclose(out.data.sum(-1), 1.0)
    w = proj(rng, (4, 4))
    assert gradcheck(lambda: (T.softmax(x, mask=mask) * w).sum(), [x]) < TOL


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 5)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_non_finite_forward_raises():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.log(x)


def test_matmul_shape_errors(rng):
    with pytest.raises(DimensionError):
        leaf(rng, 2, 3) @ leaf(rng, 4, 2)
    with pytest.raises(DimensionError):
        leaf(rng, 4) @ leaf(rng, 4, 2)


def test_ndarray_on_left_defers_to_tensor(rng):
    x = leaf(rng, 3)
    y = np.ones(3) + x
    assert isinstance(y, Tensor)
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 1.0)


def test_no_grad_is_thread_local():
    seen = {}

    def other():
        x = Tensor(np.ones(2), requires_grad=True)
        seen["requires"] = (x * 2).requires_grad

    with no_grad():
        x = Tensor(np.ones(2), requires_grad=True)
        assert not (x * 2).requires_grad
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert seen["requires"]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
              elements=st.floats(-5, 5, allow_nan=False)),
       st.integers(0, 3), st.lists(st.booleans(), min_size=3, max_size=3))
def test_broadcast_add_gradient_shapes(a, keep, ones):
    # b's shape is a suffix of a's with some axes collapsed to 1
    bshape = tuple(1 if o else n for n, o in zip(a.shape[3 - keep:], ones[3 - keep:]))
    x = Tensor(a, requires_grad=True)
    b = Tensor(np.ones(bshape), requires_grad=True)
    (x + b).sum().backward()
    assert x.grad.shape == x.shape and b.grad.shape == b.shape
    # every output element carries exactly one copy of b
    assert b.grad.sum() == pytest.approx(a.size)


# -- optimiser and EMA --------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.array([0.3, -5.0])
    st_ = AdamState(lr=0.01)
    adam_step([p], st_)
    # bias correction makes the first step exactly lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-9)


def test_adam_minimises_quadratic():
    p = Parameter(np.array([3.0, -1.0]), "p")
    st_ = AdamState(lr=0.05)
    for _ in range(500):
        p.zero_grad()
        loss = ((p - np.array([1.0, 2.0])) ** 2).sum()
        loss.backward()
        adam_step([p], st_)
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-2)


def test_ema_tracks_and_is_bounded(rng):
    p = Parameter(np.zeros(3), "p")
    ema = EmaState.from_params([p], decay=0.9)
    values = []
    for _ in range(50):
        p.data = rng.uniform(-1, 1, size=3)
        values.append(p.data.copy())
        ema_update([p], ema)
        lo = np.minimum(np.min(values, axis=0), 0.0)
        hi = np.maximum(np.max(values, axis=0), 0.0)
        # a convex combination of the initial value and everything seen so far
        assert np.all(ema.shadow["p"] >= lo - 1e-12) and np.all(ema.shadow["p"] <= hi + 1e-12)


def test_ema_constant_input_is_fixed_point():
    p = Parameter(np.full(2, 0.7), "p")
    ema = EmaState.from_params([p], decay=0.99)
    for _ in range(10):
        ema_update([p], ema)
    np.testing.assert_allclose(ema.shadow["p"], 0.7)


@pytest.mark.parametrize("decay", [-0.1, 1.0, 1.5])
def test_ema_rejects_bad_decay(decay):
    with pytest.raises(ValueError):
        EmaState.from_params([Parameter(np.zeros(1), "p")], decay)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    ck = Checkpoint({"raw/w": rng.standard_normal((3, 2)), "raw/b": np.arange(2.0), "scalar": np.array(1.5)},
                    "abc", True, {"seed": 3})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.config_digest == "abc" and back.ema and back.metadata == {"seed": 3}
    for k, v in ck.arrays.items():
        np.testing.assert_array_equal(back.arrays[k], v)
    assert set(back.group("raw")) == {"w", "b"}
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_module_state_dict_roundtrip(rng):
    a = Linear(3, 2, rng)
    b = Linear(3, 2, np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({"weight": np.zeros((3, 2))})
