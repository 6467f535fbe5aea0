import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moee import tensor as T
from moee.checkpoint import CheckpointError, dumps, loads
from moee.gradcheck import check_gradients, relative_error
from moee.nn import MLP, LayerNorm, Linear
from moee.optim import AdamW, OptimizerState, adamw_step
from moee.tensor import DimensionError, NonFiniteError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _proj(out, r):
    return T.sum(T.mul(out, Tensor(r)))


# every differentiable op, each reduced to a scalar through a random projection
OPS = {
    "add_broadcast": lambda a, b, r: _proj(T.add(a, T.reshape(b[0, 0], (1, 4))), r),
    "sub": lambda a, b, r: _proj(T.sub(a, b), r),
    "mul": lambda a, b, r: _proj(T.mul(a, b), r),
    "neg_scale": lambda a, b, r: _proj(T.scale(T.neg(a), 2.5), r),
    "exp": lambda a, b, r: _proj(T.exp(a), r),
    "cos": lambda a, b, r: _proj(T.cos(a), r),
    "tanh": lambda a, b, r: _proj(T.tanh(a), r),
    "sigmoid": lambda a, b, r: _proj(T.sigmoid(a), r),
    "silu": lambda a, b, r: _proj(T.silu(a), r),
    "softmax": lambda a, b, r: _proj(T.softmax(a, axis=-1), r),
    "softmax_axis1": lambda a, b, r: _proj(T.softmax(a, axis=1), r),
    "matmul": lambda a, b, r: _proj(T.matmul(a, T.swap_last(b)), r[..., :3]),
    "layer_norm": lambda a, b, r: _proj(T.layer_norm(a, T.reshape(b[0, 0], (4,)), T.reshape(b[1, 1], (4,))), r),
    "sum_mean": lambda a, b, r: T.add(T.sum(T.mul(a, b)), T.mean(T.sum(a, axis=1))),
    "mean_pool": lambda a, b, r: _proj(T.mean_pool(a), r[:, 0]),
    "transpose_reshape": lambda a, b, r: _proj(T.reshape(T.transpose(a, (1, 0, 2)), (2, 12)), r.reshape(2, 12)),
    "concat": lambda a, b, r: _proj(T.concat([a, b], axis=1)[:, :3], r),
    "getitem": lambda a, b, r: _proj(a[:, 1:], r[:, 1:]),
    "abs": lambda a, b, r: _proj(T.abs(a), r),
    "mse": lambda a, b, r: T.mse_loss(a, b),
    "l1_weighted": lambda a, b, r: T.l1_loss(a, b, (r > 0).astype(float)),
    "div_scalar": lambda a, b, r: _proj(a / 4.0, r),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_central_differences(op):
    # [DERIVED] oracle: central finite differences, eps 1e-5, float64, 10 seeds
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))
        r = rng.normal(size=(2, 3, 4))
        res = check_gradients(lambda: OPS[op](a, b, r), {"a": a, "b": b})
        worst = max(worst, max(x.max_rel_error for x in res))
    assert worst < 1e-4


def test_diamond_graph_accumulates_both_paths():
    # y = sum(tanh(x) * exp(x)) shares x; analytic d/dx = sech^2 e^x + tanh e^x
    rng = np.random.default_rng(0)
    x = _leaf(rng, (5,))
    y = T.sum(T.mul(T.tanh(x), T.exp(x)))
    y.backward()
    xv = x.data
    expected = (1 - np.tanh(xv) ** 2) * np.exp(xv) + np.tanh(xv) * np.exp(xv)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)
    res = check_gradients(lambda: T.sum(T.mul(T.tanh(x), T.exp(x))), [x])
    assert res[0].ok


def test_reused_node_in_sum():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.add(x, x)
    T.sum(T.mul(y, y)).backward()
    np.testing.assert_array_equal(x.grad, 8 * x.data)


def test_softmax_matches_closed_form_jacobian():
    # [DERIVED] oracle: J = diag(p) - p p^T applied to an upstream vector
    rng = np.random.default_rng(1)
    x = _leaf(rng, (1, 5))
    r = rng.normal(size=(1, 5))
    _proj(T.softmax(x), r).backward()
    p = np.exp(x.data - x.data.max()) / np.exp(x.data - x.data.max()).sum()
    jac = np.diag(p[0]) - np.outer(p[0], p[0])
    np.testing.assert_allclose(x.grad[0], jac @ r[0], atol=1e-14)


def test_layer_norm_forward_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 7))
    out = T.layer_norm(Tensor(x), eps=1e-5).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x * 20), axis=-1).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_sigmoid_strictly_inside_unit_interval(x):
    s = T.sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(s))
    # in float64 the open interval holds up to |x| ~ 36; beyond it the value saturates
    inner = np.abs(x) < 36
    assert np.all((s[inner] > 0) & (s[inner] < 1))
    assert np.all((s >= 0) & (s <= 1))


def test_sigmoid_extremes_stay_finite():
    s = T.sigmoid(Tensor(np.array([-1e308, 1e308, 0.0]))).data
    assert np.all(np.isfinite(s)) and s[2] == 0.5


def test_forward_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(5)
        mlp = MLP(rng, 4, 8, 3)
        return mlp(Tensor(rng.normal(size=(6, 4)))).data.tobytes()

    assert run() == run()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_finite_checks():
    T.set_finite_checks(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.exp(Tensor(np.array([1000.0])))
    finally:
        T.set_finite_checks(False)


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_gradcheck_needs_float64():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: T.sum(x), [x])


# -- layers and optimiser --------------------------------------------------

def test_linear_and_layernorm_gradients():
    rng = np.random.default_rng(3)
    lin, ln = Linear(rng, 4, 3), LayerNorm(3)
    ln.gain.data = rng.normal(size=3)
    ln.bias.data = rng.normal(size=3)
    x = rng.normal(size=(2, 5, 4))
    r = rng.normal(size=(2, 5, 3))
    params = {**dict(lin.named_parameters("lin.")), **dict(ln.named_parameters("ln."))}
    res = check_gradients(lambda: _proj(ln(lin(Tensor(x))), r), params)
    assert all(x.ok for x in res)


def test_state_dict_round_trip():
    rng = np.random.default_rng(4)
    a, b = MLP(rng, 3, 4, 2), MLP(rng, 3, 4, 2)
    b.load_state_dict(a.state_dict())
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})


def test_adamw_first_step_matches_hand_computation():
    # [DERIVED] after one step with bias correction, the update is lr * g / (|g| + eps')
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -0.25])
    st_ = OptimizerState(lr=0.1, weight_decay=0.01)
    adamw_step({"p": p}, {"p": g}, st_)
    decayed = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01)
    expected = decayed - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adamw_leaves_gradless_params_untouched():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    before = b.data.copy()
    opt = AdamW({"a": a, "b": b}, lr=0.1, weight_decay=0.1)
    T.sum(T.mul(a, a)).backward()
    opt.step()
    assert np.array_equal(b.data, before)
    assert not np.array_equal(a.data, before)


def test_adamw_minimises_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = AdamW({"x": x}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        T.sum(T.mul(x, x)).backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2


# -- checkpoint ------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.dictionaries(
    st.text(min_size=1, max_size=12),
    st.tuples(st.sampled_from([np.float32, np.float64]),
              st.lists(st.integers(0, 4), min_size=0, max_size=3)),
    max_size=5))
def test_checkpoint_round_trip_is_bit_exact(spec):
    rng = np.random.default_rng(0)
    tensors = {name: rng.normal(size=tuple(shape)).astype(dt) for name, (dt, shape) in spec.items()}
    back, meta = loads(dumps(tensors, {"k": 1}))
    assert meta == {"k": 1}
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_header_layout():
    buf = dumps({"w": np.array([1.0], np.float32)})
    assert buf[:8] == b"MOEECKPT"
    assert buf[8:10] == (1).to_bytes(2, "little")
    assert buf[10:11] == b"<"


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        loads(b"NOTACKPT" + b"\0" * 20)
    buf = dumps({"w": np.ones(4)})
    with pytest.raises(CheckpointError):
        loads(buf[:-30])
    with pytest.raises(CheckpointError):
        dumps({"i": np.ones(2, np.int32)})
