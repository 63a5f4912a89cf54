import numpy as np
import pytest

from neuromoco.errors import ShapeError, ValidationError
from neuromoco.snn import (
    Backbone,
    BackboneConfig,
    ClassificationHead,
    Classifier,
    Encoder,
    LIFState,
    SEWBlock,
    backbone_forward,
    classification_head,
    sew_block_forward,
)
from neuromoco.tensor import (
    LIFConfig,
    Tensor,
    add,
    backward,
    batch_norm,
    conv2d,
    cross_entropy_from_logits,
    lif_multistep,
    lif_step,
    max_pool2d,
    no_grad,
    precision,
    reshape,
    sum_over,
)
from neuromoco.tensor.gradcheck import check_gradients

SMALL = BackboneConfig(widths=(4, 8), blocks=(1, 1), embed_dim=6, resolution=(8, 8))


def spikes(rng, shape, p=0.3):
    return (rng.random(shape) < p).astype(np.float32)


# -- LIF ------------------------------------------------------------------------


def scalar_lif(xs, cfg):
    v, out, trace = cfg.v_reset, [], []
    for x in xs:
        h = v + (x - (v - cfg.v_reset)) / cfg.tau_mem
        s = 1.0 if h >= cfg.v_threshold else 0.0
        v = s * cfg.v_reset + (1 - s) * h if cfg.reset_mode == "hard" else h - s * cfg.v_threshold
        out.append(s)
        trace.append(v)
    return out, trace


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_lif_matches_scalar_reference(mode):
    cfg = LIFConfig(tau_mem=2.5, v_threshold=1.0, v_reset=-0.2, reset_mode=mode)
    xs = np.random.default_rng(0).normal(loc=1.0, scale=1.0, size=(50, 5))
    with precision(np.float64):
        v = LIFState.resting((5,), cfg, np.float64).v
        for t in range(50):
            s, v = lif_step(v, Tensor(xs[t]), cfg)
            for j in range(5):
                ref_s, ref_v = scalar_lif(xs[: t + 1, j], cfg)
                assert s.data[j] == ref_s[-1]
                assert abs(v.data[j] - ref_v[-1]) < 1e-6


def test_lif_hand_case_and_rest():
    cfg = LIFConfig()
    s, v = lif_step(Tensor(np.zeros(1)), Tensor(np.array([2.0 * cfg.v_threshold])), cfg)
    assert s.data[0] == 1 and v.data[0] == 0
    s, v = lif_step(Tensor(np.zeros(1)), Tensor(np.zeros(1)), cfg)
    assert s.data[0] == 0 and v.data[0] == 0


def test_lif_subthreshold_constant_never_fires():
    # fixed point V* = v_reset + X stays below threshold for X < v_threshold
    cfg = LIFConfig()
    v = Tensor(np.zeros(3))
    for _ in range(100):
        s, v = lif_step(v, Tensor(np.array([0.5, 0.9, 0.999])), cfg)
        assert not s.data.any()


def test_lif_config_validation():
    with pytest.raises(ValidationError):
        LIFConfig(tau_mem=0.5)
    with pytest.raises(ValidationError):
        LIFConfig(v_threshold=0.0, v_reset=0.0)
    with pytest.raises(ShapeError):
        lif_step(Tensor(np.zeros(2)), Tensor(np.zeros(3)), LIFConfig())


# -- SEW block --------------------------------------------------------------------


def test_sew_outputs_in_0_1_2():
    rng = np.random.default_rng(1)
    blk = SEWBlock(4, rng, LIFConfig())
    out = sew_block_forward(Tensor(spikes(rng, (3 * 2, 4, 5, 5))), blk, steps=3).data
    assert set(np.unique(out)) <= {0.0, 1.0, 2.0}


def test_sew_zero_branch_is_identity():
    rng = np.random.default_rng(2)
    blk = SEWBlock(3, rng, LIFConfig())
    blk.branch2.conv.weight.data[...] = 0.0  # BN of a zero map is beta = 0, so the branch never fires
    x = spikes(rng, (4, 3, 4, 4))
    np.testing.assert_array_equal(sew_block_forward(Tensor(x), blk, steps=2).data, x)


def test_sew_zero_input_zero_conv_is_zero():
    rng = np.random.default_rng(3)
    blk = SEWBlock(3, rng, LIFConfig())
    for b in (blk.branch1, blk.branch2):
        b.conv.weight.data[...] = 0.0
    out = sew_block_forward(Tensor(np.zeros((4, 3, 4, 4), np.float32)), blk, steps=2).data
    assert not out.any()


def test_sew_matches_straight_line_composition():
    rng = np.random.default_rng(4)
    blk = SEWBlock(3, rng, LIFConfig())
    x = Tensor(spikes(rng, (2 * 3, 3, 4, 4)))
    got = sew_block_forward(x, blk, steps=2).data

    def branch(h, b):
        y = conv2d(h, b.conv.weight, padding=1)
        y = batch_norm(y, b.bn.gamma, b.bn.beta, np.zeros(3, np.float32), np.ones(3, np.float32), True)
        return reshape(lif_multistep(reshape(y, (2, 3) + y.shape[1:]), LIFConfig()), y.shape)

    np.testing.assert_array_equal(got, add(branch(branch(x, blk.branch1), blk.branch2), x).data)


def test_sew_channel_mismatch():
    blk = SEWBlock(4, np.random.default_rng(0), LIFConfig())
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((2, 3, 4, 4))), 1)


# -- backbone ----------------------------------------------------------------------


def test_backbone_shape_contract_default_widths():
    cfg = BackboneConfig(embed_dim=64)
    bb = Backbone(cfg, np.random.default_rng(0))
    with no_grad():
        out = backbone_forward(spikes(np.random.default_rng(1), (16, 4, 2, 32, 32), 0.05), bb)
    assert out.shape == (16, 4, 64)


def test_backbone_resolution_mismatch():
    bb = Backbone(SMALL, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        bb(np.zeros((2, 1, 2, 16, 16), np.float32))


def test_backbone_config_validation():
    with pytest.raises(ValidationError):
        BackboneConfig(in_channels=3)
    with pytest.raises(ValidationError):
        BackboneConfig(resolution=(20, 20))


def test_spike_activations_are_binary():
    """Every LIF output inside the backbone is exactly 0 or 1; SEW sums are 0, 1 or 2."""
    rng = np.random.default_rng(5)
    bb = Backbone(SMALL, rng)
    x = Tensor(spikes(rng, (3 * 2, 2, 8, 8)))
    h = bb.stem(x, 3)
    assert set(np.unique(h.data)) <= {0.0, 1.0}
    h = max_pool2d(h, 2)
    h = bb.stage0_block0(h, 3)
    assert set(np.unique(h.data)) <= {0.0, 1.0, 2.0}


def test_state_hygiene_same_batch_twice():
    rng = np.random.default_rng(6)
    bb = Backbone(SMALL, rng).eval()
    x = spikes(rng, (4, 3, 2, 8, 8))
    with no_grad():
        np.testing.assert_array_equal(bb(x).data, bb(x).data)


def test_batch_independence_and_permutation_in_eval_mode():
    rng = np.random.default_rng(7)
    bb = Backbone(SMALL, rng).eval()
    x = spikes(rng, (4, 3, 2, 8, 8))
    with no_grad():
        base = bb(x).data
        doubled = bb(np.concatenate([x, x], axis=1)).data
        perm = [2, 0, 1]
        permuted = bb(x[:, perm]).data
    np.testing.assert_allclose(doubled[:, :3], base, atol=1e-6)
    np.testing.assert_allclose(doubled[:, 3:], base, atol=1e-6)
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-6)


def test_identical_samples_identical_embeddings():
    rng = np.random.default_rng(8)
    bb = Backbone(SMALL, rng)
    one = spikes(rng, (3, 1, 2, 8, 8))
    with no_grad():
        out = bb(np.concatenate([one, one], axis=1)).data
    np.testing.assert_array_equal(out[:, 0], out[:, 1])


def test_backbone_gradients_reach_every_parameter():
    rng = np.random.default_rng(9)
    enc = Encoder(SMALL, rng)
    x = spikes(rng, (3, 2, 2, 8, 8), 0.5)
    backward(sum_over(enc(x)))
    missing = [n for n, p in enc.named_parameters().items() if p.grad is None]
    assert not missing


# -- heads ---------------------------------------------------------------------------


def test_zero_head_gives_log_k():
    head = ClassificationHead(6, 10, np.random.default_rng(0), zero=True)
    emb = Tensor(np.random.default_rng(1).normal(size=(16, 4, 6)))
    logits = classification_head(emb, head)
    assert logits.shape == (16, 4, 10)
    loss = cross_entropy_from_logits(logits, np.zeros((16, 4), dtype=np.int64)).item()
    assert loss == pytest.approx(np.log(10), rel=1e-6)


def test_head_shape_error():
    head = ClassificationHead(6, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((2, 2, 5))))


def test_head_gradient_finite_differences():
    rng = np.random.default_rng(2)
    head = ClassificationHead(4, 3, rng)
    w, b = head.fc.weight.data.astype(np.float64), head.fc.bias.data.astype(np.float64)

    def fn(e, wt, bt):
        head.fc.weight, head.fc.bias = wt, bt
        return classification_head(e, head)

    assert check_gradients(fn, [rng.normal(size=(2, 3, 4)), w, b]) < 1e-4


# -- module plumbing ---------------------------------------------------------------------


def test_state_dict_round_trip_and_strictness():
    a = Classifier(SMALL, 3, np.random.default_rng(0))
    b = Classifier(SMALL, 3, np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
    with pytest.raises(ShapeError):
        b.load_state_dict({"nonsense": np.zeros(1)})


def test_requires_grad_toggle_keeps_names():
    enc = Encoder(SMALL, np.random.default_rng(0))
    names = list(enc.named_parameters())
    enc.requires_grad_(False)
    assert list(enc.named_parameters()) == names and enc.trainable() == []
