import logging

import numpy as np
import pytest

from grfp import tensor as T
from grfp.backbone import init_backbone, predict_unaries, unary_belief
from grfp.flowdata import Dataset
from grfp.gradsuite import random_stgru
from grfp.optim import (AdamState, MomentumState, TrainConfig, adam_step, evaluate_miou,
                        grfp_loss, pretrain_backbone, sgd_momentum_step, train_grfp)
from grfp.model import GRFPModel
from grfp.stgru import ChainConfig, init_params, segmentation_loss, unroll


# ---------------------------------------------------------------- Adam

def test_adam_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2) == (2e-5, 0.95, 0.99)


def test_adam_zero_gradient_leaves_params(rng):
    p = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=2)}
    out, _ = adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, AdamState())
    for k in p:
        assert np.array_equal(out[k], p[k])


def test_adam_first_step_moves_by_lr_against_sign(rng):
    g = rng.normal(size=50)
    p = rng.normal(size=50)
    out, _ = adam_step({"p": p}, {"p": g}, AdamState(lr=1e-3))
    np.testing.assert_allclose(out["p"] - p, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_matches_scripted_update(rng):
    lr, b1, b2, eps = 1e-2, 0.95, 0.99, 1e-8
    p = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(6)]
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    expected = p.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        expected = expected - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    state = AdamState(lr=lr)
    cur = {"p": p}
    for g in grads:
        cur, state = adam_step(cur, {"p": g}, state)
    np.testing.assert_allclose(cur["p"], expected, rtol=0, atol=1e-12)
    assert state.t == 6


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_adam_skips_non_finite_gradient(rng, bad, caplog):
    p = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    g = {"a": np.array([1.0, bad, 0.0]), "b": np.ones(2)}
    state = AdamState()
    with caplog.at_level(logging.WARNING):
        out, state = adam_step(p, g, state)
    assert state.skipped == 1 and state.t == 0 and not state.m
    assert all(np.array_equal(out[k], p[k]) for k in p)
    assert "non-finite" in caplog.text


def test_adam_rejects_shape_mismatch():
    with pytest.raises(T.ContractError, match="shape"):
        adam_step({"a": np.zeros(3)}, {"a": np.zeros(4)}, AdamState())


def test_adam_keeps_parameter_dtype():
    out, _ = adam_step({"a": np.zeros(3, np.float32)}, {"a": np.ones(3)}, AdamState())
    assert out["a"].dtype == np.float32


# ---------------------------------------------------------------- SGD with momentum

def test_sgd_defaults():
    s = MomentumState()
    assert (s.lr, s.momentum) == (1e-7, 0.95)


def test_sgd_without_momentum_is_gradient_descent(rng):
    p, g = rng.normal(size=5), rng.normal(size=5)
    out, _ = sgd_momentum_step({"p": p}, {"p": g}, MomentumState(lr=0.1, momentum=0.0))
    np.testing.assert_allclose(out["p"], p - 0.1 * g, rtol=0, atol=1e-15)


def test_sgd_velocity_accumulates(rng):
    p, g = rng.normal(size=5), rng.normal(size=5)
    lr, mu = 0.1, 0.95
    state = MomentumState(lr=lr, momentum=mu)
    cur, state = sgd_momentum_step({"p": p}, {"p": g}, state)
    cur, state = sgd_momentum_step(cur, {"p": g}, state)
    np.testing.assert_allclose(state.velocity["p"], -lr * g * (1 + mu), atol=1e-15)
    np.testing.assert_allclose(cur["p"], p - lr * g * (2 + mu), atol=1e-14)


def test_sgd_skips_non_finite_gradient(rng):
    p = {"p": rng.normal(size=3)}
    out, state = sgd_momentum_step(p, {"p": np.array([np.nan, 0, 0])}, MomentumState())
    assert state.skipped == 1 and not state.velocity
    assert np.array_equal(out["p"], p["p"])


# ---------------------------------------------------------------- configuration

def test_train_config_validates_truncation_depth():
    TrainConfig(n_frames=4, backbone_truncation_depth=4)
    for d in (0, 5):
        with pytest.raises(T.ContractError, match="backbone_truncation_depth"):
            TrainConfig(n_frames=4, backbone_truncation_depth=d)


def test_train_config_text_round_trip():
    cfg = TrainConfig(n_frames=3, backbone_truncation_depth=1, train_backward=True,
                      refine_backbone=False, steps=7, stgru_lr=3e-4, flow_noise=0.25)
    text = cfg.to_text()
    assert "n_frames=3\n" in text and "train_backward=True\n" in text
    assert TrainConfig.from_text(text) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_text("speed=3\n")


# ---------------------------------------------------------------- truncated backbone gradient

def _small_backbone(n_classes):
    bb = init_backbone(n_classes, seed=4, widths=(4, 4), dilations=(1, 2, 1), dtype=np.float64)
    rng = np.random.default_rng(9)
    for b in bb.biases:
        b += rng.normal(0, 0.1, b.shape)
    return bb


def _per_frame_backbone_grads(sample, stgru, n_frames, bb):
    """Backbone gradient split by the frame whose unary it flows through."""
    t = sample.label_frame_index
    idx = list(range(t - n_frames + 1, t + 1))
    u0 = predict_unaries(sample.frames[idx], bb)
    tape = T.Tape()
    u = [tape.watch(x) for x in u0]
    h = unroll([sample.frames[k] for k in idx], list(sample.flows[idx[0]:t]), u, stgru,
               ChainConfig(n_frames), check=False)
    g = T.backward(tape, segmentation_loss(h, sample.labels))
    per = {}
    for j, k in enumerate(idx):
        tape = T.Tape()
        q = bb.watch(tape)
        y = T.total(T.mul(unary_belief(sample.frames[k], q), g.array(u[j])))
        gb = T.backward(tape, y)
        per[k] = [gb.array(w) for w in q.weights] + [gb.array(b) for b in q.biases]
    return per


def _loss_backbone_grads(sample, stgru, n_frames, bb, depth):
    tape = T.Tape()
    q = bb.watch(tape)
    g = T.backward(tape, grfp_loss(sample, stgru, n_frames, backbone=q, depth=depth))
    return [g.array(w) for w in q.weights] + [g.array(b) for b in q.biases]


def test_truncated_backbone_gradient_keeps_only_nearest_frames(tiny_dataset):
    ds = Dataset(tiny_dataset)
    sample = ds.clips("train")[0]
    n = 3
    stgru = random_stgru(np.random.default_rng(2), ds.n_classes)
    bb = _small_backbone(ds.n_classes)
    per = _per_frame_backbone_grads(sample, stgru, n, bb)
    t = sample.label_frame_index
    for depth in (1, 2, 3):
        got = _loss_backbone_grads(sample, stgru, n, bb, depth)
        near = range(t - depth + 1, t + 1)
        for j, arr in enumerate(got):
            np.testing.assert_allclose(arr, sum(per[k][j] for k in near), rtol=1e-9, atol=1e-12)
    # the frames dropped by truncation carry real gradient, so depth matters
    far = per[t - 2]
    assert max(np.abs(a).max() for a in far) > 1e-6


def test_loss_does_not_depend_on_truncation_depth(tiny_dataset):
    ds = Dataset(tiny_dataset)
    sample = ds.clips("train")[1]
    stgru = random_stgru(np.random.default_rng(3), ds.n_classes)
    bb = _small_backbone(ds.n_classes)
    values = [grfp_loss(sample, stgru, 3, backbone=bb, depth=d).item() for d in (1, 2, 3)]
    np.testing.assert_allclose(values, values[0], rtol=1e-12)


def test_grfp_loss_needs_a_unary_source(tiny_dataset):
    sample = Dataset(tiny_dataset).clips("train")[0]
    with pytest.raises(ValueError):
        grfp_loss(sample, init_params(5), 2)


# ---------------------------------------------------------------- pretraining

def test_pretrain_loss_decreases_on_one_clip(tmp_path):
    from grfp.flowdata import SceneSpec, make_dataset

    spec = SceneSpec(height=24, width=24, n_objects=(2, 3), object_size=(6, 10), max_speed=2,
                     distractor_size=(3, 5), extend_after=1, n_frames=2)
    ds = Dataset(make_dataset(tmp_path / "one", 1, 1, 1, template=spec, master_seed=5))
    _, losses = pretrain_backbone(ds, 10, seed=1, augment_frames=False)
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_pretrain_zero_epochs_returns_init(tiny_dataset):
    ds = Dataset(tiny_dataset)
    init = init_backbone(ds.n_classes, seed=5)
    p, losses = pretrain_backbone(ds, 0, init=init)
    assert p is init and losses == []


def test_pretrain_is_deterministic(tiny_dataset, tmp_path):
    ds = Dataset(tiny_dataset)
    a, la = pretrain_backbone(ds, 2, seed=3, crop=16, log_path=tmp_path / "a.tsv")
    b, lb = pretrain_backbone(ds, 2, seed=3, crop=16, log_path=tmp_path / "b.tsv")
    assert la == lb
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    for x, y in zip(a.weights, b.weights):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------- GRFP training

def _quick_backbone(ds):
    return init_backbone(ds.n_classes, seed=1, widths=(8, 8), dilations=(1, 2, 1))


def test_single_frame_without_refinement_is_a_no_op(tiny_dataset):
    ds = Dataset(tiny_dataset)
    bb = _quick_backbone(ds)
    stgru = init_params(ds.n_classes)
    cfg = TrainConfig(n_frames=1, backbone_truncation_depth=1, refine_backbone=False,
                      steps=3, val_every=0)
    model, lines = train_grfp(ds, cfg, bb, stgru)
    assert len(lines) == 3
    for k, v in stgru.arrays().items():
        assert np.array_equal(model.forward.arrays()[k], v)
    val = ds.clips("val")
    before = evaluate_miou(GRFPModel(bb, stgru), val, 1, ds.n_classes)
    after = evaluate_miou(model, val, 1, ds.n_classes)
    assert before == after


def test_training_is_reproducible(tiny_dataset, tmp_path):
    ds = Dataset(tiny_dataset)
    cfg = TrainConfig(n_frames=2, steps=3, val_every=2, flow_noise=0.3, stgru_lr=1e-3)
    runs = []
    for name in ("a", "b"):
        model, lines = train_grfp(ds, cfg, _quick_backbone(ds), init_params(ds.n_classes),
                                  log_path=tmp_path / f"{name}.tsv")
        runs.append((model, lines))
    assert runs[0][1] == runs[1][1]
    assert len(runs[0][1][1].split("\t")) == 3   # validation column on step 2
    for k, v in runs[0][0].forward.arrays().items():
        assert np.array_equal(runs[1][0].forward.arrays()[k], v)


def test_training_moves_parameters(tiny_dataset):
    ds = Dataset(tiny_dataset)
    stgru = init_params(ds.n_classes)
    model, _ = train_grfp(ds, TrainConfig(n_frames=2, steps=2, val_every=0, train_backward=True),
                          _quick_backbone(ds), stgru)
    assert not np.array_equal(model.forward.w_xz, stgru.w_xz)
    assert model.backward is not None
    assert not np.array_equal(model.backward.w_xz, stgru.w_xz)


def test_clips_shorter_than_chain_are_skipped(tiny_dataset, caplog):
    ds = Dataset(tiny_dataset)
    # labels sit at index 2, so a 4-frame chain fits no clip
    cfg = TrainConfig(n_frames=4, backbone_truncation_depth=1, steps=0, val_every=0)
    with caplog.at_level(logging.WARNING):
        _, lines = train_grfp(ds, cfg, _quick_backbone(ds), init_params(ds.n_classes))
    assert lines == []
    assert "skipping 4 clips" in caplog.text
