import numpy as np
import pytest

from grfp.backbone import init_backbone
from grfp.flowdata import Dataset
from grfp.model import (GRFPModel, backward_window, chain_belief, forward_window,
                        predict_belief, predict_sequence)
from grfp.stgru import ChainConfig, fuse_bidirectional, init_params, unroll


def test_forward_window():
    assert forward_window(4, 3) == ([2, 3, 4], slice(2, 4))
    assert forward_window(0, 1) == ([0], slice(0, 0))
    with pytest.raises(ValueError):
        forward_window(1, 3)


def test_backward_window():
    assert backward_window(4, 3, 9) == ([6, 5, 4], [5, 4])
    assert backward_window(8, 1, 9) == ([8], [])
    with pytest.raises(ValueError):
        backward_window(7, 3, 9)


@pytest.fixture(scope="module")
def setup(tiny_dataset):
    ds = Dataset(tiny_dataset)
    bb = init_backbone(ds.n_classes, seed=3, widths=(8, 8), dilations=(1, 2, 1))
    model = GRFPModel(bb, init_params(ds.n_classes, seed=1), init_params(ds.n_classes, seed=2))
    return ds.clips("train")[0], model


def test_single_frame_belief_is_the_unary(setup):
    clip, model = setup
    u = model.unaries(clip)
    assert np.array_equal(predict_belief(model, clip, 1), u[clip.label_frame_index])


def test_forward_chain_matches_unroll(setup):
    clip, model = setup
    u = model.unaries(clip)
    t = clip.label_frame_index
    expected = unroll([clip.frames[k] for k in (1, 2)], [clip.flows[1]], [u[1], u[2]],
                      model.forward, ChainConfig(2)).data
    assert np.array_equal(predict_belief(model, clip, 2, t=t), expected)


def test_bidirectional_averages_both_chains(setup):
    clip, model = setup
    u = model.unaries(clip)
    t = clip.label_frame_index
    fw = chain_belief(clip, u, model.forward, t, 3)
    bw = chain_belief(clip, u, model.backward, t, 3, "backward")
    both = predict_belief(model, clip, 3, bidirectional=True)
    np.testing.assert_allclose(both, fuse_bidirectional(fw, bw).data, atol=1e-15)
    np.testing.assert_allclose(both.sum(-1), 1.0, atol=1e-5)


def test_bidirectional_falls_back_to_forward_parameters(setup):
    clip, model = setup
    shared = GRFPModel(model.backbone, model.forward)
    u = model.unaries(clip)
    bw = chain_belief(clip, u, model.forward, clip.label_frame_index, 2, "backward")
    fw = chain_belief(clip, u, model.forward, clip.label_frame_index, 2)
    np.testing.assert_allclose(predict_belief(shared, clip, 2, bidirectional=True),
                               (fw + bw) / 2, atol=1e-7)


def test_predict_sequence_shapes_and_first_frame(setup):
    clip, model = setup
    seq = predict_sequence(model, clip, 3)
    assert seq.shape == (clip.n_frames, *clip.labels.shape) and seq.dtype == np.uint8
    u = model.unaries(clip)
    assert np.array_equal(seq[0], u[0].argmax(-1))
    assert np.array_equal(seq[1], chain_belief(clip, u, model.forward, 1, 2).argmax(-1))
    assert np.array_equal(seq[4], predict_belief(model, clip, 3, t=4).argmax(-1))
