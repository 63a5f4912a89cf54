import math

import numpy as np
import pytest

from neuromoco.errors import CorruptionError, FormatError, ShapeError, UsageError, ValidationError
from neuromoco.tensor import (
    LIFConfig,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    cross_entropy_from_logits,
    l2_normalize,
    lif_multistep,
    lif_step,
    linear,
    matmul,
    mean_over,
    mul,
    no_grad,
    precision,
    read_checkpoint,
    scale,
    spike,
    split,
    stack,
    sum_over,
    surrogate_grad,
    write_checkpoint,
)
from neuromoco.tensor.gradcheck import CASES, check_gradients, run_suite, spike_surrogate_error


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- elementwise / backward -------------------------------------------------------


def test_add_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(add(Tensor(x), 0.0).data, x)


def test_scale_gradient_is_constant():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(sum_over(scale(x, 2.0)))
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_product_rule():
    with precision(np.float64):
        x, y = t64([1.5, -2.0]), t64([3.0, 0.5])
        backward(sum_over(mul(x, y)))
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)


def test_reused_subexpression_accumulates():
    # f = p + p*x with p = x*y feeding two consumers
    with precision(np.float64):
        x, y = t64(2.0), t64(3.0)
        p = mul(x, y)
        f = add(p, mul(p, x))
        backward(f)
        # df/dx = y + (y*x + p) = y + 2xy ; df/dy = x + x^2
        assert x.grad == pytest.approx(3.0 + 2 * 2.0 * 3.0)
        assert y.grad == pytest.approx(2.0 + 4.0)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(sum_over(scale(x, 1.0)))
    backward(sum_over(scale(x, 2.0)))
    np.testing.assert_allclose(x.grad, 3.0)


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(scale(x, 2.0))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        mean_over(Tensor(np.ones((2, 3))), axis=2)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = scale(x, 3.0)
    assert not y.requires_grad


# -- matmul / conv -----------------------------------------------------------------


def test_matmul_hand_case():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)


def naive_conv(x, w, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, o, i, j] += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_reference(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    with precision(np.float64):
        out = conv2d(t64(x, False), t64(w, False), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad), atol=1e-12)


def test_conv_1x1_is_channel_mix_and_delta_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(5, 3, 1, 1))
    with precision(np.float64):
        out = conv2d(t64(x, False), t64(w, False)).data
        np.testing.assert_allclose(out, np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x), atol=1e-12)
        delta = np.zeros((3, 3, 3, 3))
        for c in range(3):
            delta[c, c, 1, 1] = 1.0
        np.testing.assert_allclose(conv2d(t64(x, False), t64(delta, False), padding=1).data, x, atol=1e-12)


# -- reductions / normalisation / CE --------------------------------------------------


def test_mean_of_constant():
    assert np.all(mean_over(Tensor(np.full((3, 4), 2.5)), axis=1).data == 2.5)


def test_l2_normalize_unit_rows():
    v = Tensor(np.random.default_rng(2).normal(size=(6, 9)))
    n = l2_normalize(v, axis=1).data
    np.testing.assert_allclose((n * n).sum(axis=1), 1.0, rtol=1e-6)


def test_concat_split_round_trip():
    rng = np.random.default_rng(3)
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 5)))
    x, y = split(concat([a, b], axis=1), [3, 5], axis=1)
    np.testing.assert_array_equal(x.data, a.data)
    np.testing.assert_array_equal(y.data, b.data)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_cross_entropy_uniform_is_log_k(k):
    with precision(np.float64):
        loss = cross_entropy_from_logits(t64(np.full((3, k), 0.7)), 0)
    assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_matches_direct_oracle_and_is_shift_invariant():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(7, 6)) * 3
    target = rng.integers(0, 6, size=7)
    with precision(np.float64):
        got = cross_entropy_from_logits(t64(logits, False), target).item()
        shifted = cross_entropy_from_logits(t64(logits + 123.4, False), target).item()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expect = -np.mean(np.log(p[np.arange(7), target]))
    assert got == pytest.approx(expect, abs=1e-12)
    assert abs(got - shifted) < 1e-9


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 4))
    with precision(np.float64):
        x = t64(logits)
        backward(cross_entropy_from_logits(x, 2))
    p = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(x.grad, p - np.eye(4)[2], atol=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValidationError):
        cross_entropy_from_logits(Tensor(np.zeros((2, 3))), 3)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# -- spike / surrogate ----------------------------------------------------------------


def test_spike_forward_values():
    out = spike(Tensor(np.array([2.0, 0.0, 1.0])), threshold=1.0).data
    assert list(out) == [1.0, 0.0, 1.0]


def test_surrogate_peak_and_closed_form():
    assert surrogate_grad(np.array(0.0)) == pytest.approx(1.0)  # a / 2 with a = 2
    u = np.random.default_rng(6).normal(size=50)
    np.testing.assert_allclose(surrogate_grad(u), 2.0 / (2 * (1 + (math.pi * 2.0 * u / 2) ** 2)), rtol=1e-15)
    assert spike_surrogate_error(0) <= 1e-10


# -- gradient suite -----------------------------------------------------------------------


@pytest.mark.parametrize("case", CASES, ids=[c.name for c in CASES])
def test_gradcheck_case(case):
    for seed in range(3):
        fn, arrays = case.build(np.random.default_rng(seed))
        assert check_gradients(fn, arrays, seed) < 1e-4


def test_gradcheck_covers_required_ops():
    names = {c.name for c in CASES}
    required = {"add", "sub", "mul_elementwise", "scale", "matmul", "batched_matmul", "conv2d", "max_pool2d",
                "avg_pool2d", "batch_norm", "linear", "mean_over", "concat", "l2_normalize", "cross_entropy"}
    assert required <= names


def test_run_suite_reports_every_case():
    report = run_suite(seeds=1)
    assert set(report) == {c.name for c in CASES} | {"spike_surrogate"}


# -- LIF primitives ---------------------------------------------------------------------------


def test_lif_resting_and_hand_case():
    cfg = LIFConfig()
    s, v = lif_step(Tensor(np.zeros(1)), Tensor(np.zeros(1)), cfg)
    assert s.data[0] == 0 and v.data[0] == 0
    s, v = lif_step(Tensor(np.zeros(1)), Tensor(np.array([2.0])), cfg)
    assert s.data[0] == 1 and v.data[0] == 0


def test_fused_lif_matches_composed_forward_and_backward():
    rng = np.random.default_rng(7)
    x = rng.normal(loc=0.8, size=(6, 3, 4))
    for mode in ("hard", "soft"):
        cfg = LIFConfig(reset_mode=mode)
        with precision(np.float64):
            xa = t64(x)
            fused = lif_multistep(xa, cfg)
            proj = rng.normal(size=x.shape)
            backward(sum_over(mul(fused, t64(proj, False))))
            xb = t64(x)
            v = t64(np.zeros(x.shape[1:]), False)
            outs = []
            for t in range(x.shape[0]):
                s, v = lif_step(v, xb[t], cfg)
                outs.append(s)
            composed = stack(outs, axis=0)
            backward(sum_over(mul(composed, t64(proj, False))))
        np.testing.assert_array_equal(fused.data, composed.data)
        np.testing.assert_allclose(xa.grad, xb.grad, atol=1e-12)


# -- checkpoint I/O -----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    params = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(0, np.float32),
              "scalar": np.array(1.5, dtype=np.float32), "ünï": rng.normal(size=(2, 1, 2)).astype(np.float32)}
    write_checkpoint(params, tmp_path / "c.nmcw")
    back = read_checkpoint(tmp_path / "c.nmcw")
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_errors(tmp_path):
    write_checkpoint({"w": np.ones((2, 2), np.float32)}, tmp_path / "c.nmcw")
    raw = (tmp_path / "c.nmcw").read_bytes()
    (tmp_path / "bad.nmcw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "bad.nmcw")
    (tmp_path / "short.nmcw").write_bytes(raw[:-3])
    with pytest.raises(CorruptionError):
        read_checkpoint(tmp_path / "short.nmcw")
    (tmp_path / "long.nmcw").write_bytes(raw + b"\0")
    with pytest.raises(CorruptionError):
        read_checkpoint(tmp_path / "long.nmcw")
