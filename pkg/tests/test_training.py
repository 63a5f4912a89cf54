import json
import math

import numpy as np
import pytest

from neuromoco.augment import AugmentPolicy
from neuromoco.contrastive import ContrastiveConfig, QueueState, time_loss
from neuromoco.data import FrameDataset
from neuromoco.errors import ConfigError, UsageError
from neuromoco.snn import BackboneConfig
from neuromoco.tensor import backward, no_grad
from neuromoco.training import (
    SGD,
    AdamW,
    FinetuneConfig,
    Metrics,
    PretrainConfig,
    adamw_step,
    build_classifier,
    default_milestones,
    encoder_checkpoint,
    evaluate,
    finetune,
    load_classifier,
    lr_multistep,
    lr_warmup_cosine,
    make_views,
    new_encoder_pair,
    predict,
    pretrain,
    pretrain_step,
    sgd_step,
    time_major,
)

BB = BackboneConfig(widths=(4, 8), blocks=(1, 1), embed_dim=8, resolution=(8, 8))


def toy_dataset(n=12, T=3, classes=3, seed=0):
    """Class c lights up a vertical band of columns so the task is learnable."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    frames = (rng.random((n, T, 2, 8, 8)) < 0.05).astype(np.float32)
    for i, c in enumerate(labels):
        frames[i, :, c % 2, :, 2 * c:2 * c + 3] += (rng.random((T, 8, 3)) < 0.7)
    return FrameDataset(frames, labels)


def pcfg(**kw):
    base = dict(steps=3, batch_size=4, epochs=2, lr=0.03, momentum_m=0.99, seed=0, backbone=BB,
                contrastive=ContrastiveConfig(queue_len=8))
    base.update(kw)
    return PretrainConfig(**base)


def fcfg(**kw):
    base = dict(batch_size=4, epochs=2, lr=0.01, warmup_epochs=1, num_classes=3, backbone=BB, seed=0)
    base.update(kw)
    return FinetuneConfig(**base)


# -- optimisers ---------------------------------------------------------------------


def test_sgd_two_step_hand_trace():
    p, v = np.array([1.0]), np.array([0.0])
    sgd_step([p], [np.array([0.5])], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p[0] == pytest.approx(0.95) and v[0] == pytest.approx(0.5)
    sgd_step([p], [np.array([0.5])], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert v[0] == pytest.approx(0.95) and p[0] == pytest.approx(0.855)


def test_sgd_zero_grad_and_weight_decay():
    p, v = np.array([2.0, -2.0]), np.zeros(2)
    sgd_step([p], [np.zeros(2)], [v], lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p, [2.0, -2.0])
    sgd_step([p], [np.zeros(2)], [v], lr=0.1, weight_decay=0.1)
    assert np.all(np.abs(p) < 2.0)


def test_sgd_missing_grad():
    with pytest.raises(UsageError):
        sgd_step([np.ones(1)], [None], [np.zeros(1)], lr=0.1)


def test_adamw_first_step_is_lr_times_sign():
    p = np.array([1.0, 1.0])
    adamw_step([p], [np.array([0.3, -4.0])], [np.zeros(2)], [np.zeros(2)], step=1, lr=0.01, weight_decay=0.0)
    np.testing.assert_allclose(p, [0.99, 1.01], atol=1e-7)


def test_adamw_decay_is_decoupled():
    # with zero gradient the only change is the multiplicative shrink
    p = np.array([3.0])
    adamw_step([p], [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], step=1, lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(3.0 * (1 - 0.05))


# -- schedules ------------------------------------------------------------------------


def test_multistep_schedule():
    ms = default_milestones(200)
    assert ms == (120, 160)
    assert lr_multistep(0, 0.03, ms) == 0.03
    assert lr_multistep(119, 0.03, ms) == 0.03
    assert lr_multistep(120, 0.03, ms) == pytest.approx(0.003)
    assert lr_multistep(199, 0.03, ms) == pytest.approx(0.0003)


def test_warmup_cosine_schedule():
    lrs = [lr_warmup_cosine(e, 1e-3, 30, 100) for e in range(100)]
    assert lrs[0] == pytest.approx(1e-3 / 30)
    assert lrs[29] == pytest.approx(1e-3)
    assert lrs[30] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs[30:], lrs[31:]))
    assert lr_warmup_cosine(100, 1e-3, 30, 100) == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        lr_warmup_cosine(0, 1e-3, 10, 5)


# -- configs / metrics ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        pcfg(batch_size=16)  # larger than queue
    with pytest.raises(ConfigError):
        pcfg(momentum_m=1.5)
    with pytest.raises(ConfigError):
        fcfg(warmup_epochs=5)
    with pytest.raises(ConfigError):
        fcfg(init_from="both")


def test_metrics_epochs_must_increase(tmp_path):
    m = Metrics()
    m.add({"phase": "x", "epoch": 0, "loss": 1.0}, 0.1)
    with pytest.raises(UsageError):
        m.add({"phase": "x", "epoch": 0, "loss": 1.0}, 0.1)
    m.write(tmp_path / "m.jsonl", tmp_path / "t.jsonl")
    assert json.loads((tmp_path / "m.jsonl").read_text()) == {"epoch": 0, "loss": 1.0, "phase": "x"}
    assert "wall_time" in (tmp_path / "t.jsonl").read_text()


def test_views_are_time_major_and_differ():
    ds = toy_dataset()
    rng = np.random.default_rng(0)
    a = make_views(ds.frames[:4], AugmentPolicy(), rng)
    b = make_views(ds.frames[:4], AugmentPolicy(), rng)
    assert a.shape == (3, 4, 2, 8, 8)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(make_views(ds.frames[:4], AugmentPolicy.identity(), rng), time_major(ds.frames[:4]))


# -- pretraining ------------------------------------------------------------------------------


def one_batch(cfg, ds):
    rng = np.random.default_rng(1)
    frames = ds.frames[:cfg.batch_size]
    return make_views(frames, cfg.augment, rng), make_views(frames, cfg.augment, rng)


def test_first_batch_loss_bounded_by_log_of_logit_count():
    cfg = pcfg()
    pair = new_encoder_pair(cfg)
    queue = QueueState.random(3, 8, 8, np.random.default_rng(0))
    x_q, x_k = one_batch(cfg, toy_dataset())
    loss = pretrain_step(pair, queue, SGD(pair.query.trainable()), x_q, x_k, cfg, lr=0.0)
    # aligned random encoders score the positive at least as high as a typical negative
    assert loss <= math.log(1 + 8) + 1.0


def test_zero_lr_step_changes_nothing_but_queue():
    cfg = pcfg(weight_decay=0.0)
    pair = new_encoder_pair(cfg)
    before_q = {k: v.copy() for k, v in pair.query.state_dict().items() if "running" not in k}
    before_k = {k: v.copy() for k, v in pair.key.state_dict().items() if "running" not in k}
    queue = QueueState(3, 8, 8)
    x_q, x_k = one_batch(cfg, toy_dataset())
    pretrain_step(pair, queue, SGD(pair.query.trainable(), weight_decay=0.0), x_q, x_k, cfg, lr=0.0)
    for k, v in before_q.items():
        np.testing.assert_array_equal(pair.query.state_dict()[k], v)
    for k, v in before_k.items():
        np.testing.assert_allclose(pair.key.state_dict()[k], v, atol=1e-7)
    assert queue.filled == 4


def test_key_moves_only_by_momentum():
    cfg = pcfg()
    pair = new_encoder_pair(cfg)
    key0 = {n: p.data.astype(np.float64) for n, p in pair.key.named_parameters().items()}
    x_q, x_k = one_batch(cfg, toy_dataset())
    pretrain_step(pair, QueueState(3, 8, 8), SGD(pair.query.trainable()), x_q, x_k, cfg, lr=0.1)
    moved = False
    for n, p in pair.key.named_parameters().items():
        q1 = pair.query.named_parameters()[n].data
        np.testing.assert_allclose(p.data, 0.99 * key0[n] + 0.01 * q1, atol=1e-6)
        moved |= not np.array_equal(p.data, key0[n].astype(np.float32))
        assert p.grad is None
    assert moved


def test_queue_fill_invariant():
    ds = toy_dataset(n=12)
    cc = ContrastiveConfig(queue_len=8, prefill_random=False)
    res = pretrain(pcfg(epochs=3, contrastive=cc), ds)
    fills = [r["queue_filled"] for r in res.metrics.records]
    steps = [r["steps"] for r in res.metrics.records]
    assert steps == [3, 6, 9]
    assert fills == [min(s * 4, 8) for s in steps]


def test_pretrain_deterministic_and_writes_checkpoint(tmp_path):
    ds = toy_dataset()
    a = pretrain(pcfg(), ds, out_dir=tmp_path)
    b = pretrain(pcfg(), ds)
    assert a.metrics.records == b.metrics.records
    ca, cb = encoder_checkpoint(a.pair), encoder_checkpoint(b.pair)
    assert all(np.array_equal(ca[k], cb[k]) for k in ca)
    assert (tmp_path / "pretrain.nmcw").exists()
    c = pretrain(pcfg(seed=1), ds)
    assert c.metrics.records != a.metrics.records


def test_pretrain_rejects_mismatched_data():
    with pytest.raises(ConfigError):
        pretrain(pcfg(steps=4), toy_dataset())
    with pytest.raises(ConfigError):
        pretrain(pcfg(), toy_dataset(n=3))


# -- fine-tuning --------------------------------------------------------------------------------


def test_initial_finetune_loss_near_log_k():
    ds = toy_dataset()
    model = build_classifier(fcfg(), None).eval()
    with no_grad():
        loss = time_loss("mac", model(time_major(ds.frames)), ds.labels).item()
    assert abs(loss - math.log(3)) < 0.5


def test_label_out_of_range():
    ds = toy_dataset(classes=3)
    with pytest.raises(ConfigError):
        finetune(fcfg(num_classes=2), None, ds)


def test_checkpoint_initialisation_selects_prefix():
    pair = new_encoder_pair(pcfg())
    for p in pair.query.parameters():
        p.data += 1.0
    ckpt = encoder_checkpoint(pair)
    key_model = build_classifier(fcfg(init_from="key"), ckpt)
    query_model = build_classifier(fcfg(init_from="query"), ckpt)
    name = "stem.conv.weight"
    np.testing.assert_array_equal(key_model.backbone.state_dict()[name], ckpt[f"key.backbone.{name}"])
    np.testing.assert_array_equal(query_model.backbone.state_dict()[name], ckpt[f"query.backbone.{name}"])
    with pytest.raises(ConfigError):
        build_classifier(fcfg(), {"other.x": np.zeros(1)})


def test_linear_probe_freezes_backbone_and_learns():
    ds = toy_dataset(n=24)
    res = finetune(fcfg(linear_probe=True, epochs=6, lr=0.05, warmup_epochs=1, augment=False), None, ds)
    fresh = build_classifier(fcfg(), None)
    for k, v in fresh.backbone.state_dict().items():
        np.testing.assert_array_equal(res.model.backbone.state_dict()[k], v)
    losses = [r["loss"] for r in res.metrics.records]
    assert losses[-1] < losses[0]


def test_finetune_eval_matches_recount(tmp_path):
    train, test = toy_dataset(n=12), toy_dataset(n=9, seed=5)
    res = finetune(fcfg(epochs=2), None, train, test, out_dir=tmp_path)
    preds = predict(res.model, test)
    assert res.test_accuracy == sum(int(p == y) for p, y in zip(preds, test.labels)) / len(test)
    assert res.metrics.records[-1]["test_accuracy"] == res.test_accuracy
    reloaded = load_classifier(tmp_path / "finetune.nmcw", BB, 3)
    assert evaluate(reloaded, test) == res.test_accuracy


def test_optimizer_classes_update_tensors():
    model = build_classifier(fcfg(), None)
    ds = toy_dataset()
    for opt in (SGD(model.trainable()), AdamW(model.trainable())):
        model.zero_grad()
        backward(time_loss("mac", model(time_major(ds.frames[:4])), ds.labels[:4]))
        before = model.cls.fc.weight.data.copy()
        opt.step(0.01)
        assert not np.array_equal(before, model.cls.fc.weight.data)
