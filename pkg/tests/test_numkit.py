import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arfc.numkit import (
    AdamW,
    LayerParams,
    MissingGradError,
    NumericalError,
    Rng,
    Tensor,
    clip_grad_norm,
    concat,
    div,
    dropout,
    exp,
    gelu,
    init_block,
    layer_norm,
    linear,
    matmul,
    mhsa,
    mhsa_cached,
    no_grad,
    sgd_adamw_step,
    softmax_lastdim,
    sqrt,
    stack,
    tanh,
    transformer_block,
    tsum,
)
from conftest import gradcheck, numeric_grad, rel_err


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------- matmul


def test_matmul_identity_cases():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)
    out = matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [7.0]])


def test_matmul_grad_of_sum_is_ones_times_bT():
    a, b = rand(3, 4), rand(4, 2, seed=1)
    ta = Tensor(a, requires_grad=True)
    tsum(matmul(ta, Tensor(b))).backward()
    assert np.allclose(ta.grad, np.ones((3, 2)) @ b.T)
    fd = numeric_grad(lambda x: float(np.sum(x @ b)), [a.copy()])[0]
    assert rel_err(ta.grad, fd) < 1e-8


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_gradcheck():
    a, b = rand(2, 3, 4), rand(4, 5, seed=1)
    w = rand(2, 3, 5, seed=2)
    assert gradcheck(lambda x, y: tsum(matmul(x, y) * Tensor(w)), [a, b]) < 1e-4


# ---------------------------------------------------------------- elementwise + shape ops


@pytest.mark.parametrize(
    "fn",
    [
        lambda x, y: tsum((x + y) * (x - y)),
        lambda x, y: tsum(div(x, y * y + 1.0)),
        lambda x, y: tsum(exp(x * 0.3) * tanh(y)),
        lambda x, y: tsum(sqrt(x * x + 1.0) ** 1.5),
        lambda x, y: tsum(concat([x, y], axis=0)[1:4] * 2.0),
        lambda x, y: tsum(stack([x, y], axis=1).reshape(-1)[::3]),
        lambda x, y: tsum(x.T @ y),
        lambda x, y: (x * y).mean(axis=1).sum(),
    ],
)
def test_elementwise_and_shape_gradients(fn):
    assert gradcheck(fn, [rand(3, 3), rand(3, 3, seed=5)]) < 1e-4


def test_linear_fused_gradient():
    x, w, b = rand(2, 3, 4), rand(4, 5, seed=1), rand(5, seed=2)
    g = rand(2, 3, 5, seed=3)
    assert gradcheck(lambda x, w, b: tsum(linear(x, w, b) * Tensor(g)), [x, w, b]) < 1e-4


def test_broadcast_add_accumulates_into_small_operand():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    tsum(a + b).backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_fan_out_gradients_accumulate():
    x = Tensor(np.array([2.0]), requires_grad=True)
    tsum(x * x + x * 3.0).backward()
    assert np.allclose(x.grad, [7.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_raises():
    with pytest.raises(NumericalError):
        exp(Tensor([1000.0]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(softmax_lastdim(Tensor(np.zeros(3))).data, 1 / 3, atol=1e-15)
    y = softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert abs(y[0] - 1) < 1e-12 and abs(y[1]) < 1e-12
    x = np.array([1.0, 2.0, 3.0])
    brute = np.array([math.exp(v) for v in x]) / sum(math.exp(v) for v in x)
    assert np.allclose(softmax_lastdim(Tensor(x)).data, brute, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    y = softmax_lastdim(Tensor(np.array(vals))).data
    assert abs(y.sum() - 1) < 1e-12 and np.all(y >= 0)


def test_softmax_gradient():
    g = rand(2, 5, seed=4)
    assert gradcheck(lambda x: tsum(softmax_lastdim(x) * Tensor(g)), [rand(2, 5)]) < 1e-4


def test_softmax_masked_entries_get_zero_weight():
    mask = np.array([True, False, True])
    y = softmax_lastdim(Tensor([1.0, 5.0, 1.0]), mask).data
    assert y[1] == 0 and np.allclose(y[[0, 2]], 0.5)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(layer_norm(Tensor(np.full(4, 3.0)), one, zero).data, np.zeros(4))
    y = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(y, [1, -1], atol=1e-5)
    x = rand(1, 32)
    y = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert abs(y.mean()) < 1e-10 and abs(y.var() - 1) < 1e-4


def test_layer_norm_gradient():
    g = rand(3, 6, seed=9)
    f = lambda x, a, b: tsum(layer_norm(x, a, b) * Tensor(g))
    assert gradcheck(f, [rand(3, 6), rand(6, seed=1) + 1, rand(6, seed=2)]) < 1e-4


# ---------------------------------------------------------------- gelu


def test_gelu_values():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([20.0])).data[0] - 20.0) < 1e-9
    c = math.sqrt(2 / math.pi)
    ref = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
    assert abs(gelu(Tensor([1.0])).data[0] - ref) < 1e-15
    assert abs(ref - 0.8412) < 1e-4


def test_gelu_gradient():
    assert gradcheck(lambda x: tsum(gelu(x) * x), [rand(4, 5) * 2]) < 1e-4


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = Tensor(rand(5))
    assert dropout(x, 0.0, Rng(0), True) is x
    assert dropout(x, 0.7, Rng(0), False) is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, Rng(0), True)


def test_dropout_preserves_expectation():
    y = dropout(Tensor(np.ones(10**6)), 0.5, Rng(7), True).data
    assert abs(y.mean() - 1) < 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_replayable_from_seed():
    a = dropout(Tensor(np.ones(50)), 0.3, Rng(1).fold(4, 2), True).data
    b = dropout(Tensor(np.ones(50)), 0.3, Rng(1).fold(4, 2), True).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- attention


def _attn_params(width, seed=0):
    p = LayerParams()
    init_block(p, "blk", width, 4, Rng(seed))
    return p.scope("blk")


def test_mhsa_single_token_is_value_projection():
    p = _attn_params(8).scope("attn")
    x = rand(1, 8)
    out = mhsa(Tensor(x), p, heads=2).data
    v = x @ p["v.w"].data + p["v.b"].data
    assert np.allclose(out, v @ p["o.w"].data + p["o.b"].data, atol=1e-14)


def test_mhsa_causal_mask_blocks_future():
    p = _attn_params(8).scope("attn")
    x = rand(5, 8)
    y = x.copy()
    y[3:] += rand(2, 8, seed=3)
    a = mhsa(Tensor(x), p, heads=2, causal=True).data
    b = mhsa(Tensor(y), p, heads=2, causal=True).data
    assert np.array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_mhsa_indivisible_width():
    p = _attn_params(8).scope("attn")
    with pytest.raises(ValueError):
        mhsa(Tensor(rand(2, 8)), p, heads=3)


def test_mhsa_gradient_wrt_input_and_params():
    p = _attn_params(8, seed=2).scope("attn")
    names = sorted(p)
    g = rand(4, 8, seed=11)

    def build(x, *ws):
        q = LayerParams(dict(zip(names, ws)))
        return tsum(mhsa(x, q, heads=2, causal=True) * Tensor(g))

    arrays = [rand(4, 8)] + [p[n].data.copy() for n in names]
    assert gradcheck(build, arrays) < 1e-4


def test_mhsa_cached_matches_full_causal():
    p = _attn_params(8, seed=1).scope("attn")
    x = rand(2, 6, 8)
    full = mhsa(Tensor(x), p, 2, causal=True).data
    out, kv = mhsa_cached(Tensor(x[:, :4]), p, 2, causal=True)
    steps = [out.data]
    for i in range(4, 6):
        o, kv = mhsa_cached(Tensor(x[:, i : i + 1]), p, 2, causal=True, past=kv)
        steps.append(o.data)
    assert np.allclose(np.concatenate(steps, axis=1), full, atol=1e-13)


def test_transformer_block_gradient():
    p = _attn_params(8, seed=3)
    names = sorted(p)
    g = rand(3, 8, seed=1)

    def build(x, *ws):
        return tsum(transformer_block(x, LayerParams(dict(zip(names, ws))), 2, causal=True) * Tensor(g))

    arrays = [rand(3, 8)] + [p[n].data.copy() for n in names]
    assert gradcheck(build, arrays) < 1e-4


# ---------------------------------------------------------------- rng


def test_rng_fold_is_pure_and_streams_differ():
    r = Rng(5)
    a = r.fold(1).normal(4)
    assert r.position == 0
    assert np.array_equal(a, Rng(5).fold(1).normal(4))
    assert not np.array_equal(a, Rng(5).fold(2).normal(4))


def test_rng_position_advances():
    r = Rng(0)
    r.uniform(10)
    assert r.position > 0


# ---------------------------------------------------------------- params + optimizer


def test_layer_params_sorted_and_unique():
    p = LayerParams()
    p.add("b.x", np.zeros(1))
    p.add("a.y", np.zeros(2))
    assert list(p) == ["a.y", "b.x"]
    with pytest.raises(KeyError):
        p.add("a.y", np.zeros(1))
    assert p.count() == 3


def test_adamw_zero_grad_no_decay_is_noop():
    p = LayerParams()
    p.add("w", np.array([1.5, -2.0]))
    sgd_adamw_step(p, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p["w"].data, [1.5, -2.0])


def test_adamw_descends_on_square():
    p = LayerParams()
    p.add("w", np.array([1.0]))
    sgd_adamw_step(p, {"w": 2 * p["w"].data}, lr=1e-3)
    assert abs(p["w"].data[0]) < 1.0


def test_adamw_converges_on_quadratic_bowl():
    A = np.diag([1.0, 10.0])
    p = LayerParams()
    p.add("w", np.array([1.0, -1.0]))
    opt = AdamW(p, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        w = p["w"]
        w.grad = 2 * A @ w.data
        opt.step()
    w = p["w"].data
    assert w @ A @ w < 1e-4


def test_adamw_missing_grad():
    p = LayerParams()
    p.add("w", np.ones(1))
    with pytest.raises(MissingGradError):
        AdamW(p).step()
    with pytest.raises(MissingGradError):
        sgd_adamw_step(p, {})


def test_adamw_trajectory_deterministic():
    def run():
        p = LayerParams()
        p.add("w", Rng(3).normal(5))
        opt = AdamW(p, lr=0.01)
        for i in range(20):
            p["w"].grad = Rng(4).fold(i).normal(5)
            opt.step()
        return p["w"].data

    assert np.array_equal(run(), run())


def test_clip_grad_norm_scales_to_bound():
    p = LayerParams()
    p.add("a", np.zeros(2))
    p.add("b", np.zeros(1))
    p["a"].grad, p["b"].grad = np.array([3.0, 0.0]), np.array([4.0])
    total = clip_grad_norm(p, ["a", "b"], 1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(np.r_[p["a"].grad, p["b"].grad]) == pytest.approx(1.0)
