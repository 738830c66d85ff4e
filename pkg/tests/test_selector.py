import numpy as np
import pytest
import torch

from glus import selector as S
from glus import trainer as T
from glus.metrics import region_J
from glus.model import ModelConfig, Segmenter
from glus.trainer import TrainConfig

TC = TrainConfig(num_context=2, num_query=2)
SEL = S.SelectorConfig(d_model=16, layers=2, heads=2, steps=3, batch_size=2, warmup_steps=1)


def seg_model():
    torch.manual_seed(0)
    return Segmenter(ModelConfig(d_model=16, layers=2, heads=2, decoder_channels=4)).eval()


def test_propagation_orders_examples():
    assert S.propagation_orders(10, 5) == ([5, 6, 7, 8, 9], [5, 4, 3, 2, 1, 0])
    fwd, bwd = S.propagation_orders(8, 7)
    assert fwd == [7] and bwd == list(range(7, -1, -1))
    with pytest.raises(ValueError):
        S.propagation_orders(4, 4)


def test_key_zero_is_plain_inference(tiny_world):
    m = seg_model()
    s = tiny_world.samples[0]
    plain = T.predict_logits(m, tiny_world, TC, samples=[s])[s.sample_id]
    prop = S.propagate_from_key(m, tiny_world, s, 0, TC)
    assert torch.allclose(plain, prop, atol=1e-6)


@pytest.mark.parametrize("key", [0, 2, 5])
def test_propagation_covers_every_frame(tiny_world, key):
    m = seg_model()
    s = tiny_world.samples[1]
    out = S.propagate_from_key(m, tiny_world, s, key, TC)
    assert out.shape == (6, 64, 64)
    # key frame comes from the forward pass: first window of the forward order
    fwd = T.segment_along(m, T.VideoFeatureCache(m, tiny_world), [s], [list(range(key, 6))], [[1, 4]], 2, True, 3, 7)
    assert torch.allclose(out[key], fwd[0, 0], atol=1e-6)


def test_select_key_frame_ties_pick_first():
    assert S.select_key_frame([0.1, 0.7, 0.7, 0.2]) == 1
    with pytest.raises(ValueError):
        S.select_key_frame([])


def test_pseudo_labels_match_metric(tiny_world):
    m = seg_model()
    labels = S.annotate_pseudo_labels(m, tiny_world, 0.5, TC, seed=0)
    vids = S.pick_videos(tiny_world, 0.5, 0)
    assert len(vids) == 2 and {l.video_id for l in labels} == set(vids)
    preds = T.predict(m, tiny_world.subset(vids), TC)
    lookup = {s.sample_id: s for s in tiny_world.samples}
    for l in labels:
        s = lookup[l.sample_id]
        gt = tiny_world.video(s.video_id).objects[s.target_object_id][l.frame]
        assert abs(l.iou - region_J(preds[l.sample_id][l.frame], gt)) <= 1e-6


def test_labels_roundtrip(tmp_path):
    labels = [S.FrameScoreLabel("v0", "1", 3, 0.25), S.FrameScoreLabel("v1", "0", 0, 1.0)]
    S.write_labels(labels, tmp_path / "l.jsonl")
    assert S.read_labels(tmp_path / "l.jsonl") == labels
    with pytest.raises(ValueError):
        S.FrameScoreLabel("v", "0", 0, 1.5)


def test_selector_loss():
    score = torch.tensor([0.2, 0.9])
    logits = torch.zeros(2, 2, 5)
    tgt = torch.zeros(2, 2, dtype=torch.long)
    loss, parts = S.selector_loss(score, torch.tensor([0.5, 0.5]), logits, tgt, lambda_s=1.0)
    assert parts["s"] == pytest.approx(0.35)
    assert float(loss) == pytest.approx(np.log(5) + 0.35, rel=1e-5)
    with pytest.raises(ValueError):
        S.selector_loss(score, torch.tensor([1.2, 0.0]), logits, tgt)


def test_selector_defaults():
    c = S.SelectorConfig()
    assert (c.mlp_layers, c.num_context, c.lambda_s) == (3, 8, 1.0)
    sel = S.Selector(c)
    linears = [l for l in sel.score_head if isinstance(l, torch.nn.Linear)]
    assert len(linears) == 3


def test_train_score_save_load(tiny_world, tmp_path):
    labels = S.annotate_pseudo_labels(seg_model(), tiny_world, 0.5, TC, seed=0)
    sel, hist = S.train_selector(tiny_world, labels, SEL, log_every=0)
    assert len(hist) == 3
    scores = S.score_frames(sel, tiny_world)
    assert all(v.shape == (6,) for v in scores.values())
    S.save_selector(tmp_path, sel)
    again = S.score_frames(S.load_selector(tmp_path), tiny_world)
    assert all(np.array_equal(scores[k], again[k]) for k in scores)
    masks = T.infer_masks(seg_model(), tiny_world, TC, selector=sel)
    assert all(m.shape == (6, 64, 64) for m in masks.values())


def test_selector_rejects_wrong_arity(tiny_world):
    sel = S.Selector(SEL)
    feats = torch.zeros(1, 3, 64, 16)
    with pytest.raises(ValueError):
        sel(torch.zeros(1, 4, dtype=torch.long), feats, torch.zeros(1, 3, dtype=torch.long), feats[:, :1], torch.zeros(1, 1, dtype=torch.long))
