"""
Tests for the numeric kernel: forward values of every primitive, analytic
gradients against central finite differences, Adam, the schedule and the
Rng.
"""
import json
import math

import numpy as np
import pytest

from nn_core import (
    AdamState,
    ConfigurationError,
    DimensionError,
    Dropout,
    NumericError,
    Parameter,
    Rng,
    Tensor,
    UndefinedError,
    adam_step,
    attention,
    clip_global_norm,
    concat,
    cosine_warmup_lr,
    cross_entropy,
    embedding,
    feed_forward,
    finite_difference_gradient,
    gelu,
    global_norm,
    layer_norm,
    masked_fill,
    matmul,
    multi_head_attention,
    no_grad,
    relative_error,
    resolve_dtype,
    sinusoidal_encoding,
    softmax,
)

SEEDS = range(100)


def _grad_check(build, arrays, tol=1e-6):
    """Compare backward() against finite differences for every input of build(*tensors) -> scalar."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = list(tensors)
            args[i] = x
            return build(*args)

        numeric = finite_difference_gradient(f, t)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = relative_error(analytic, numeric)
        assert err < tol, f"input {i}: relative error {err:.2e}"


# ============ FORWARD VALUES ============

class TestMatmul:
    def test_identity(self):
        x = np.arange(12, dtype=np.float64).reshape(3, 4)
        out = matmul(Tensor(np.eye(3)), Tensor(x))
        assert np.array_equal(out.data, x)

    def test_scalar_case(self):
        assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self):
        g = np.random.default_rng(0)
        a, b = g.normal(size=(7, 5)), g.normal(size=(5, 4))
        expected = np.zeros((7, 4))
        for i in range(7):
            for j in range(4):
                for t in range(5):
                    expected[i, j] += a[i, t] * b[t, j]
        assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - expected)) < 1e-12

    def test_batch_broadcast(self):
        g = np.random.default_rng(1)
        a, b = g.normal(size=(2, 3, 4)), g.normal(size=(4, 5))
        out = matmul(Tensor(a), Tensor(b))
        assert out.shape == (2, 3, 5)
        assert np.allclose(out.data[1], a[1] @ b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_single_element(self):
        assert softmax(Tensor([42.0])).data.tolist() == [1.0]

    def test_log_two(self):
        assert np.allclose(softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)

    def test_large_logits_are_stable(self):
        out = softmax(Tensor([1000.0, 1001.0])).data
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize('seed', range(20))
    def test_rows_sum_to_one_and_keep_argmax(self, seed):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(4, 7))
        out = softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.array_equal(out.argmax(axis=-1), x.argmax(axis=-1))

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 0))))

    @pytest.mark.parametrize('shape, axis', [((2, 3), 2), ((2, 3), -3), ((), -1)])
    def test_axis_out_of_range(self, shape, axis):
        with pytest.raises(DimensionError, match='out of range'):
            softmax(Tensor(np.zeros(shape)), axis=axis)


class TestLayerNorm:
    def test_normalized_slices(self):
        x = np.random.default_rng(3).normal(loc=4.0, scale=3.0, size=(5, 16))
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.all(np.abs(out.mean(axis=-1)) <= 1e-6)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gamma_beta_shape_checked(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_input_is_identity(self):
        assert gelu(Tensor([10.0])).data[0] == pytest.approx(10.0, abs=1e-12)

    def test_exact_cdf_form(self):
        # Φ(1) = 0.8413447460685429; the tanh approximation gives 0.84119...
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447460685429, abs=1e-15)
        assert gelu(Tensor([-1.0])).data[0] == pytest.approx(-0.15865525393145707, abs=1e-15)


class TestAttention:
    def test_fully_masked_row_outputs_zero(self):
        g = np.random.default_rng(4)
        q, k, v = (Tensor(g.normal(size=s)) for s in ((2, 4), (3, 4), (3, 2)))
        mask = np.array([[True, False, True], [False, False, False]])
        out = attention(q, k, v, mask).data
        assert np.array_equal(out[1], np.zeros(2))
        assert np.any(out[0] != 0)

    def test_per_head_loop_oracle(self):
        g = np.random.default_rng(5)
        n, hidden, heads = 4, 6, 2
        x = g.normal(size=(1, n, hidden))
        w = [g.normal(size=(hidden, hidden)) for _ in range(4)]
        b = [g.normal(size=hidden) for _ in range(4)]
        y, probs = multi_head_attention(Tensor(x), Tensor(x), *(Tensor(m) for m in w), heads,
                                        b_q=Tensor(b[0]), b_k=Tensor(b[1]), b_v=Tensor(b[2]), b_o=Tensor(b[3]),
                                        trace=True)
        q, k, v = (x[0] @ w[i] + b[i] for i in range(3))
        d = hidden // heads
        parts = []
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            scores = q[:, cols] @ k[:, cols].T / math.sqrt(d)
            p = np.exp(scores - scores.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            assert np.allclose(probs[0, h], p, atol=1e-12)
            parts.append(p @ v[:, cols])
        expected = np.concatenate(parts, axis=1) @ w[3] + b[3]
        assert np.max(np.abs(y.data[0] - expected)) < 1e-10

    def test_heads_must_divide_hidden(self):
        x = Tensor(np.zeros((2, 6)))
        w = Tensor(np.zeros((6, 6)))
        with pytest.raises(ConfigurationError):
            multi_head_attention(x, x, w, w, w, w, heads=4)


class TestFeedForward:
    def test_zero_weights(self):
        z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
        out = feed_forward(Tensor(np.ones((3, 2))), z(2, 5), z(5), z(5, 2), z(2))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_identity_regime(self):
        x = np.array([[20.0, 30.0]])
        eye = Tensor(np.eye(2))
        out = feed_forward(Tensor(x), eye, Tensor(np.zeros(2)), eye, Tensor(np.zeros(2)))
        assert np.allclose(out.data, x)

    def test_scalar_loop_oracle(self):
        g = np.random.default_rng(6)
        x, w_up, b_up = g.normal(size=(2, 2)), g.normal(size=(2, 3)), g.normal(size=3)
        w_down, b_down = g.normal(size=(3, 2)), g.normal(size=2)
        out = feed_forward(Tensor(x), Tensor(w_up), Tensor(b_up), Tensor(w_down), Tensor(b_down)).data
        for row in range(2):
            hidden = []
            for j in range(3):
                pre = b_up[j] + sum(x[row, i] * w_up[i, j] for i in range(2))
                hidden.append(pre * 0.5 * (1.0 + math.erf(pre / math.sqrt(2.0))))
            for o in range(2):
                expected = b_down[o] + sum(hidden[j] * w_down[j, o] for j in range(3))
                assert abs(out[row, o] - expected) < 1e-12


class TestSinusoidal:
    def test_index_zero(self):
        assert sinusoidal_encoding(0, 6).data.tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_index_one(self):
        expected = [math.sin(1.0), math.cos(1.0), math.sin(10000 ** -0.5), math.cos(10000 ** -0.5)]
        assert np.allclose(sinusoidal_encoding(1, 4).data, expected, atol=1e-15)

    def test_range(self):
        table = sinusoidal_encoding(np.arange(500), 32).data
        assert table.min() >= -1.0 and table.max() <= 1.0

    def test_odd_width(self):
        with pytest.raises(ConfigurationError):
            sinusoidal_encoding(3, 5)


class TestCrossEntropy:
    def test_confident_correct(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 1e6
        assert cross_entropy(Tensor(logits), [1, 2]).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform(self):
        assert cross_entropy(Tensor(np.zeros((4, 7))), [0, 1, 2, 3]).item() == pytest.approx(math.log(7))

    def test_hand_value(self):
        loss = cross_entropy(Tensor([[0.0, math.log(3.0)]]), [0]).item()
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_ignored_positions(self):
        logits = Tensor([[0.0, math.log(3.0)], [5.0, -5.0]])
        assert cross_entropy(logits, [0, -1], ignore_index=-1).item() == pytest.approx(math.log(4.0))

    def test_all_ignored(self):
        with pytest.raises(UndefinedError):
            cross_entropy(Tensor(np.zeros((2, 3))), [-1, -1], ignore_index=-1)


# ============ GRADIENTS ============

def _case(name, g):
    """(build, arrays) for one randomized gradient case."""
    n, m, d = (int(v) for v in g.integers(2, 5, size=3))
    if name == 'matmul':
        w = g.normal(size=(n, d))
        return (lambda a, b: (matmul(a, b) * Tensor(w)).sum()), [g.normal(size=(n, m)), g.normal(size=(m, d))]
    if name == 'softmax':
        w = g.normal(size=(n, m))
        return (lambda x: (softmax(x) * Tensor(w)).sum()), [g.normal(size=(n, m))]
    if name == 'layer_norm':
        w = g.normal(size=(n, m))
        return (lambda x, gm, bt: (layer_norm(x, gm, bt) * Tensor(w)).sum()), \
            [g.normal(size=(n, m)), g.normal(size=m), g.normal(size=m)]
    if name == 'gelu':
        w = g.normal(size=(n, m))
        return (lambda x: (gelu(x) * Tensor(w)).sum()), [g.normal(size=(n, m)) * 2]
    if name == 'attention':
        mask = g.random((n, m)) < 0.7
        w = g.normal(size=(n, d))
        return (lambda q, k, v: (attention(q, k, v, mask) * Tensor(w)).sum()), \
            [g.normal(size=(n, d)), g.normal(size=(m, d)), g.normal(size=(m, d))]
    if name == 'multi_head_attention':
        hidden, heads = 4, 2
        w = g.normal(size=(2, n, hidden))

        def build(xq, xkv, wq, wk, wv, wo, bq, sig):
            y, _ = multi_head_attention(xq, xkv, wq, wk, wv, wo, heads, b_q=bq, q_signal=sig)
            return (y * Tensor(w)).sum()
        shapes = [(2, n, hidden), (2, m, hidden)] + [(hidden, hidden)] * 4 + [(hidden,), (2, n, hidden)]
        return build, [g.normal(size=s) for s in shapes]
    if name == 'feed_forward':
        w = g.normal(size=(n, d))
        return (lambda x, wu, bu, wd, bd, sig: (feed_forward(x, wu, bu, wd, bd, signal=sig, signal_site='inter')
                                                * Tensor(w)).sum()), \
            [g.normal(size=(n, d)), g.normal(size=(d, m)), g.normal(size=m), g.normal(size=(m, d)),
             g.normal(size=d), g.normal(size=(n, m))]
    if name == 'cross_entropy':
        targets = g.integers(0, m, size=n)
        targets[0] = -1
        return (lambda logits: cross_entropy(logits, targets, ignore_index=-1)), [g.normal(size=(n, m))]
    if name == 'cross_entropy_softmax':
        targets = g.integers(0, m, size=n)
        return (lambda x: cross_entropy(softmax(x) * 3.0, targets)), [g.normal(size=(n, m))]
    if name == 'embedding':
        ids = g.integers(0, n, size=(2, m))
        w = g.normal(size=(2, m, d))
        return (lambda table: (embedding(table, ids) * Tensor(w)).sum()), [g.normal(size=(n, d))]
    if name == 'concat_reshape':
        w = g.normal(size=(2 * m, n))
        return (lambda a, b: (concat([a, b], axis=0).reshape(n, 2 * m).swapaxes(0, 1) * Tensor(w)).sum()), \
            [g.normal(size=(n, m)), g.normal(size=(n, m))]
    if name == 'elementwise':
        return (lambda a, b: ((a * b - a / b).exp().mean() + (b * b).log().sum() - (-a)[0].sum())), \
            [g.normal(size=(n, m)) * 0.5, g.uniform(0.5, 2.0, size=(n, m))]
    if name == 'masked_fill':
        mask = g.random((n, m)) < 0.5
        w = g.normal(size=(n, m))
        return (lambda x: (masked_fill(x, mask, 0.0) * Tensor(w)).sum()), [g.normal(size=(n, m))]
    raise KeyError(name)


OPS = ['matmul', 'softmax', 'layer_norm', 'gelu', 'attention', 'multi_head_attention', 'feed_forward',
       'cross_entropy', 'cross_entropy_softmax', 'embedding', 'concat_reshape', 'elementwise', 'masked_fill']


@pytest.mark.parametrize('seed', SEEDS)
@pytest.mark.parametrize('op', OPS)
def test_gradient_matches_finite_differences(op, seed):
    build, arrays = _case(op, np.random.default_rng(seed))
    _grad_check(build, arrays, tol=1e-6)


def test_gradient_float32_tolerance():
    g = np.random.default_rng(11)
    x = Tensor(g.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(g.normal(size=(3, 4)).astype(np.float32))
    (gelu(x) * w).sum().backward()
    w64 = Tensor(w.data.astype(np.float64))
    numeric = finite_difference_gradient(lambda t: (gelu(t) * w64).sum(), Tensor(x.data.astype(np.float64)))
    assert relative_error(x.grad, numeric) < 1e-3


def test_reused_tensor_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert np.allclose(x.grad, [4.0, -3.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


class TestFiniteDifference:
    def test_quadratic(self):
        numeric = finite_difference_gradient(lambda t: (t * t).sum(), Tensor([1.0, 2.0]))
        assert np.allclose(numeric.data, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        numeric = finite_difference_gradient(lambda t: Tensor(3.0), Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(numeric.data, np.zeros(3))

    def test_non_finite_value(self):
        with pytest.raises(NumericError):
            finite_difference_gradient(lambda t: t.log().sum(), Tensor([0.0]))

    def test_step_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            finite_difference_gradient(lambda t: t.sum(), Tensor([1.0]), h=0)


# ============ OPTIMIZATION ============

def _param(value):
    return Parameter('w', np.array([value], dtype=np.float64), dtype=np.float64)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = _param(0.7)
        adam_step([p], [np.zeros(1)], AdamState(), lr=0.1)
        assert p.data[0] == 0.7

    @pytest.mark.parametrize('g', [1e-3, -0.5, 42.0])
    def test_first_step_is_lr_times_sign(self, g):
        p = _param(0.0)
        adam_step([p], [np.array([g])], AdamState(), lr=0.01)
        assert -p.data[0] == pytest.approx(0.01 * math.copysign(1.0, g), rel=1e-4)

    def test_two_step_manual_trace(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p, state = _param(1.0), AdamState()
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate((0.5, -0.2), start=1):
            adam_step([p], [np.array([g])], state, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(p.data[0] - w) < 1e-12
        assert state.step == 2

    def test_non_finite_gradient_rejected(self):
        p, state = _param(1.0), AdamState()
        with pytest.raises(NumericError, match="'w'"):
            adam_step([p], [np.array([np.nan])], state, lr=0.1)
        assert p.data[0] == 1.0 and state.step == 0

    def test_deterministic(self):
        results = []
        for _ in range(2):
            p, state = _param(0.3), AdamState()
            for g in (0.1, 0.2, -0.3):
                adam_step([p], [np.array([g])], state, lr=0.05)
            results.append(p.data.copy())
        assert np.array_equal(results[0], results[1])


class TestSchedule:
    def test_peak_at_warmup(self):
        assert cosine_warmup_lr(10, 10, 110, 2.0) == 2.0

    def test_zero_at_end(self):
        assert cosine_warmup_lr(110, 10, 110, 2.0) == pytest.approx(0.0, abs=1e-15)

    def test_half_at_midpoint(self):
        assert cosine_warmup_lr(60, 10, 110, 2.0) == pytest.approx(1.0, abs=1e-12)

    def test_linear_ramp(self):
        assert cosine_warmup_lr(0, 10, 110, 2.0) == 0.0
        assert cosine_warmup_lr(5, 10, 110, 2.0) == pytest.approx(1.0)


class TestClipping:
    def test_below_threshold_is_identity(self):
        grads = [np.array([0.1, 0.2])]
        assert np.array_equal(clip_global_norm(grads, 1.0)[0], grads[0])

    def test_pythagoras(self):
        clipped = clip_global_norm([np.array([3.0, 4.0])], 1.0)
        assert np.allclose(clipped[0], [0.6, 0.8])

    @pytest.mark.parametrize('seed', range(10))
    def test_post_clip_norm_bounded(self, seed):
        g = np.random.default_rng(seed)
        grads = [g.normal(scale=10, size=(3, 4)), None, g.normal(scale=10, size=5)]
        clipped = clip_global_norm(grads, 1.0)
        assert clipped[1] is None
        assert global_norm(clipped) <= 1.0 + 1e-9

    def test_max_norm_positive(self):
        with pytest.raises(ConfigurationError):
            clip_global_norm([np.ones(2)], 0.0)


# ============ RNG & MISC ============

class TestRng:
    def test_same_seed_same_draws(self):
        assert np.array_equal(Rng(5).normal((4, 3)), Rng(5).normal((4, 3)))
        assert not np.array_equal(Rng(5).normal((4, 3)), Rng(6).normal((4, 3)))

    def test_state_round_trips_through_json(self):
        rng = Rng(9)
        rng.normal((10,))
        state = json.loads(json.dumps(rng.get_state()))
        restored = Rng.from_state(state)
        assert np.array_equal(rng.integers(0, 1000, (20,)), restored.integers(0, 1000, (20,)))

    def test_f32_and_f64_share_draws(self):
        a = Rng(3).normal((5,), 0.5, np.float32)
        b = Rng(3).normal((5,), 0.5, np.float64)
        assert np.array_equal(a, b.astype(np.float32))


def test_dropout_inactive_is_identity():
    x = Tensor(np.ones((2, 3)))
    assert Dropout(0.5, Rng(0), active=False)(x) is x


def test_dropout_keeps_expectation():
    out = Dropout(0.25, Rng(0), active=True)(Tensor(np.ones(20000))).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_resolve_dtype():
    assert resolve_dtype('f32') is np.float32
    assert resolve_dtype(np.float64) is np.float64
    with pytest.raises(ConfigurationError):
        resolve_dtype('f16')
