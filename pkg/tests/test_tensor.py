import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duett.gradcheck import check_grad
from duett.nn import Attention, dropout, multi_head_attention, scale_norm
from duett.optim import LrSchedule, OptState, adamw_step, lr_at
from duett.rng import make_rng
from duett.tensor import (
    NonDifferentiableError,
    NonFiniteError,
    Tensor,
    concat,
    grad,
    l2norm,
    precision,
    softmax,
    softplus,
    stack,
    where,
)


def leaf(rng, shape, positive=False, scale=1.0):
    a = rng.normal(size=shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


# each entry builds (loss_fn, params) from an rng; every primitive appears at least once
def _cases():
    def add(r):
        a, b = leaf(r, (3, 4)), leaf(r, (4,))
        return lambda: ((a + b) * (a + b)).sum(), [a, b]

    def sub(r):
        a, b = leaf(r, (2, 3)), leaf(r, (2, 1))
        return lambda: ((a - b) ** 2).sum(), [a, b]

    def mul(r):
        a, b = leaf(r, (3, 4)), leaf(r, (1, 4))
        return lambda: (a * b).sum(), [a, b]

    def div(r):
        a, b = leaf(r, (3,)), leaf(r, (3,), positive=True)
        return lambda: (a / b).sum(), [a, b]

    def neg(r):
        a = leaf(r, (4,))
        return lambda: (-(a * a)).sum(), [a]

    def pow_(r):
        a = leaf(r, (5,), positive=True)
        return lambda: (a**1.5).sum(), [a]

    def matmul(r):
        a, b = leaf(r, (3, 4)), leaf(r, (4, 2))
        return lambda: (a @ b).sum(), [a, b]

    def batched_matmul(r):
        a, b = leaf(r, (2, 3, 4)), leaf(r, (4, 2))
        return lambda: ((a @ b) ** 2).sum(), [a, b]

    def batched_both(r):
        a, b = leaf(r, (2, 3, 4)), leaf(r, (2, 4, 3))
        return lambda: ((a @ b).tanh()).sum(), [a, b]

    def sum_axis(r):
        a = leaf(r, (3, 4))
        return lambda: (a.sum(axis=1) ** 2).sum(), [a]

    def mean_keep(r):
        a = leaf(r, (3, 4))
        return lambda: ((a - a.mean(axis=0, keepdims=True)) ** 2).mean(), [a]

    def reshape_transpose(r):
        a, w = leaf(r, (2, 3, 4)), leaf(r, (2, 4, 3))
        return lambda: (a.transpose(0, 2, 1).reshape(2, 12) * w.reshape(2, 12)).sum(), [a, w]

    def broadcast(r):
        a, w = leaf(r, (1, 3)), leaf(r, (4, 3))
        return lambda: (a.broadcast_to((4, 3)) * w).sum(), [a, w]

    def getitem_basic(r):
        a = leaf(r, (4, 5))
        return lambda: (a[1:3, ::2] ** 2).sum(), [a]

    def getitem_fancy(r):
        a = leaf(r, (4, 5))
        idx = np.array([0, 2, 2, 3])
        return lambda: (a[idx] ** 2).sum(), [a]

    def exp_log(r):
        a, b = leaf(r, (4,)), leaf(r, (4,), positive=True)
        return lambda: (a.exp() + b.log()).sum(), [a, b]

    def sqrt(r):
        a = leaf(r, (4,), positive=True)
        return lambda: a.sqrt().sum(), [a]

    def tanh(r):
        a = leaf(r, (3, 3))
        return lambda: (a.tanh() ** 2).sum(), [a]

    def relu(r):
        a = leaf(r, (6,))
        return lambda: (a.relu() * a).sum(), [a]

    def sigmoid(r):
        a = leaf(r, (6,), scale=3.0)
        return lambda: (a.sigmoid() ** 2).sum(), [a]

    def clamp(r):
        a = leaf(r, (6,))
        return lambda: (a.clamp_min(0.1) * a).sum(), [a]

    def concat_(r):
        a, b = leaf(r, (2, 3)), leaf(r, (2, 2))
        w = r.normal(size=(2, 5))
        return lambda: (concat([a, b], axis=1) * w).sum(), [a, b]

    def stack_(r):
        a, b = leaf(r, (3,)), leaf(r, (3,))
        return lambda: (stack([a, b], axis=0) ** 3).sum(), [a, b]

    def where_(r):
        a, b = leaf(r, (4,)), leaf(r, (1,))
        cond = np.array([True, False, True, False])
        return lambda: (where(cond, a, b) ** 2).sum(), [a, b]

    def softmax_(r):
        a = leaf(r, (3, 5))
        w = r.normal(size=(3, 5))
        return lambda: (softmax(a, axis=-1) * w).sum(), [a]

    def softplus_(r):
        a = leaf(r, (6,), scale=4.0)
        return lambda: softplus(a).sum(), [a]

    def l2norm_(r):
        a = leaf(r, (3, 4))
        return lambda: l2norm(a, axis=-1).sum(), [a]

    def scale_norm_(r):
        a, g = leaf(r, (3, 4)), Tensor(2.0, requires_grad=True)
        w = r.normal(size=(3, 4))
        return lambda: (scale_norm(a, g) * w).sum(), [a, g]

    return [add, sub, mul, div, neg, pow_, matmul, batched_matmul, batched_both, sum_axis, mean_keep,
            reshape_transpose, broadcast, getitem_basic, getitem_fancy, exp_log, sqrt, tanh, relu, sigmoid,
            clamp, concat_, stack_, where_, softmax_, softplus_, l2norm_, scale_norm_]


CASES = _cases()


@pytest.mark.parametrize("case", CASES, ids=[c.__name__.strip("_") for c in CASES])
def test_primitive_matches_finite_differences(case):
    with precision("float64"):
        f, params = case(make_rng(7, "gradcheck", CASES.index(case)))
        assert check_grad(f, params) < 1e-4


def test_square_gradient_is_six():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(x * x, [x])
    assert float(g) == pytest.approx(6.0)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_softmax_sum_has_zero_gradient(vals):
    with precision("float64"):
        x = Tensor(np.array(vals), requires_grad=True)
        (g,) = grad(softmax(x).sum(), [x])
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_matmul_gradient_tight_tolerance():
    with precision("float64"):
        r = make_rng(1, "matmul")
        a, b = leaf(r, (3, 4)), leaf(r, (4, 2))
        assert check_grad(lambda: (a @ b).sum(), [a, b], h=1e-5) < 1e-6


def test_default_dtype_is_float32():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * 2.0).exp().sum()
    assert y.data.dtype == np.float32
    (g,) = grad(y, [x])
    assert g.dtype == np.float32


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        Tensor([0.0]).log()


def test_gradient_through_floor_raises():
    x = Tensor([1.5], requires_grad=True)
    with pytest.raises(NonDifferentiableError):
        grad((x.floor() * x).sum(), [x])


def test_floor_forward_without_grad_is_fine():
    np.testing.assert_array_equal(Tensor([1.5, -0.5]).floor().data, [1.0, -1.0])


def test_grad_requires_scalar_and_zero_fills_unused():
    x, y = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad(x * 2.0, [x])
    gx, gy = grad((x * x).sum(), [x, y])
    np.testing.assert_allclose(gx, [2.0, 4.0])
    np.testing.assert_array_equal(gy, [0.0])


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (g,) = grad(y * y + y, [x])  # x^4 + x^2 -> 4x^3 + 2x
    assert float(g) == pytest.approx(36.0)


# -- scale norm, attention, dropout ------------------------------------------------------


@pytest.mark.parametrize("x, g, expected", [([3.0, 4.0], 1.0, [0.6, 0.8]), ([3.0, 4.0], 5.0, [3.0, 4.0]),
                                            ([0.0, 0.0], 2.0, [0.0, 0.0])])
def test_scale_norm_examples(x, g, expected):
    np.testing.assert_allclose(scale_norm(Tensor(x), Tensor(g)).data, expected, atol=1e-6)


def test_scale_norm_zero_vector_has_finite_gradient():
    x, g = Tensor([0.0, 0.0], requires_grad=True), Tensor(2.0, requires_grad=True)
    gx, gg = grad(scale_norm(x, g).sum(), [x, g])
    assert np.all(np.isfinite(gx)) and np.isfinite(gg)


def _attn(dim=8, heads=2, seed=0):
    return Attention(dim, heads, make_rng(seed, "attn-test"))


def test_single_token_attention_is_value_then_output_projection():
    attn = _attn()
    x = Tensor(make_rng(1, "x").normal(size=(1, 1, 8)))
    out = multi_head_attention(x, attn)
    np.testing.assert_allclose(out.data, attn.out(attn.v(x)).data, rtol=1e-5, atol=1e-6)


def test_identical_tokens_give_identical_outputs():
    attn = _attn()
    tok = make_rng(2, "x").normal(size=(1, 1, 8))
    out = multi_head_attention(Tensor(np.concatenate([tok, tok], axis=1)), attn).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])


@given(st.permutations(range(5)))
@settings(max_examples=20, deadline=None)
def test_attention_is_permutation_equivariant(perm):
    attn = _attn()
    x = make_rng(3, "x").normal(size=(2, 5, 8))
    perm = list(perm)
    a = multi_head_attention(Tensor(x), attn).data
    b = multi_head_attention(Tensor(x[:, perm]), attn).data
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-5, atol=1e-6)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        Attention(10, 4, make_rng(0, "a"))


def test_dropout_identities_and_mean():
    x = Tensor(np.ones(100_000))
    rng = make_rng(0, "dropout")
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.7, False, rng) is x
    assert abs(float(dropout(x, 0.5, True, rng).data.mean()) - 1.0) < 0.01
    with pytest.raises(ValueError):
        dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        dropout(x, 0.5, True, None)


# -- optimizer and schedule --------------------------------------------------------------


def _step(p0, g, lr, wd, steps=1):
    p = Tensor(np.array([p0]), requires_grad=True)
    st_ = OptState(weight_decay=wd)
    for _ in range(steps):
        adamw_step([p], [np.array([g], dtype=np.float32)], st_, lr)
    return float(p.data[0]), st_


def test_adamw_first_step_is_minus_lr():
    p, _ = _step(1.0, 1.0, 0.1, 0.0)
    assert p - 1.0 == pytest.approx(-0.1, rel=1e-5)


def test_adamw_zero_gradient_no_decay_does_nothing():
    p, st_ = _step(1.0, 0.0, 0.1, 0.0)
    assert p == 1.0 and st_.step == 1


def test_adamw_decay_only():
    p, _ = _step(2.0, 0.0, 0.1, 0.1)
    assert p == pytest.approx(2.0 * (1 - 0.01), rel=1e-6)


def test_adamw_matches_reference_over_several_steps():
    rng = make_rng(0, "adam-ref")
    grads = rng.normal(size=(6, 3))
    lr, wd, b1, b2, eps = 0.05, 0.02, 0.9, 0.999, 1e-8
    with precision("float64"):
        p = Tensor(rng.normal(size=3), requires_grad=True)
        ref = p.data.copy()
        m = v = np.zeros(3)
        st_ = OptState(weight_decay=wd)
        for t, g in enumerate(grads, start=1):
            adamw_step([p], [g], st_, lr)
            ref = ref - lr * wd * ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_lr_schedule_examples():
    s = LrSchedule(peak_rate=1e-3, warmup_steps=100)
    assert lr_at(0, s) == 0.0
    assert lr_at(50, s) == pytest.approx(5e-4)
    assert lr_at(100, s) == pytest.approx(1e-3)
    assert lr_at(400, s) == pytest.approx(5e-4)


@given(st.integers(1, 500), st.integers(1, 10_000))
def test_lr_never_exceeds_peak(w, step):
    assert 0 <= lr_at(step, LrSchedule(1.0, w)) <= 1.0 + 1e-12
