import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glus.dataset import write_dataset
from glus.metrics import (
    PredictionError,
    boundary,
    boundary_F,
    default_tolerance,
    evaluate_dataset,
    evaluate_predictions,
    frame_boundary_f,
    region_J,
)
from glus.trainer import write_predictions
from oracles import boundary_f_bruteforce, boundary_pixels, iou_by_counting

ALL_3X3 = [np.array(bits, dtype=bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]


def test_region_j_exhaustive_3x3():
    for a in ALL_3X3:
        for b in ALL_3X3:
            assert region_J(a, b) == iou_by_counting(a, b)


def test_boundary_f_random_8x8_against_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random((8, 8)) < rng.uniform(0.2, 0.8)
        b = rng.random((8, 8)) < rng.uniform(0.2, 0.8)
        assert abs(boundary_F(a, b, tolerance=1) - boundary_f_bruteforce(a, b, 1)) <= 1e-9


def test_boundary_matches_neighbour_definition():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.random((7, 9)) < 0.6
        assert set(zip(*np.nonzero(boundary(m)))) == set(boundary_pixels(m))


def test_region_j_examples():
    full = np.ones((4, 6), bool)
    left = np.zeros((4, 6), bool)
    left[:, :3] = True
    assert region_J(full, full) == 1.0
    assert region_J(left, ~left) == 0.0
    assert region_J(left, full) == 0.5
    assert region_J(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_boundary_f_examples():
    sq = np.zeros((8, 8), bool)
    sq[2:5, 2:5] = True
    shifted = np.roll(sq, 1, axis=1)
    assert boundary_F(sq, sq, 1) == 1.0
    assert boundary_F(sq, shifted, 1) == 1.0
    far = np.zeros((8, 8), bool)
    far[6:8, 6:8] = True
    small = np.zeros((8, 8), bool)
    small[0, 0] = True
    assert boundary_F(small, far, 1) == 0.0
    assert frame_boundary_f(np.zeros((4, 4), bool), np.zeros((4, 4), bool), 1) == 1.0
    assert frame_boundary_f(np.zeros((4, 4), bool), sq[:4, :4], 1) == 0.0


def test_default_tolerance():
    assert default_tolerance((64, 64)) == 1
    assert default_tolerance((480, 854)) == 8
    assert default_tolerance((4, 4)) == 1


def test_shape_mismatch():
    with pytest.raises(ValueError):
        region_J(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        boundary_F(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


masks = arrays(bool, (6, 6))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_boundary_f_symmetric_and_bounded(a, b):
    f = boundary_F(a, b, 1)
    assert f == boundary_F(b, a, 1)
    assert 0.0 <= f <= 1.0
    assert 0.0 <= region_J(a, b) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=6))
def test_report_identity(pairs):
    from glus.metrics import MetricReport

    rep = MetricReport({f"v/{i}": p for i, p in enumerate(pairs)})
    assert rep.JF == (rep.J + rep.F) / 2
    assert 0.0 <= rep.JF <= 1.0


def _gt_predictions(ds):
    return {s.sample_id: ds.video(s.video_id).objects[s.target_object_id] for s in ds.samples}


def test_dataset_evaluation_examples(tiny_world, tmp_path):
    ds = tiny_world
    assert evaluate_predictions(_gt_predictions(ds), ds).JF == 1.0
    empty = {k: np.zeros_like(v) for k, v in _gt_predictions(ds).items()}
    assert evaluate_predictions(empty, ds).JF == 0.0
    write_predictions(_gt_predictions(ds), tmp_path / "pred")
    write_dataset(ds, tmp_path / "data")
    from glus.dataset import load_dataset

    loaded = load_dataset(tmp_path / "data")
    assert evaluate_dataset(tmp_path / "pred", loaded).JF == 1.0
    s = ds.samples[0]
    victim = tmp_path / "pred" / s.video_id / s.exp_id / "00002.png"
    victim.unlink()
    with pytest.raises(PredictionError, match="00002.png"):
        evaluate_dataset(tmp_path / "pred", loaded)


def test_missing_sample_is_an_error(tiny_world):
    preds = _gt_predictions(tiny_world)
    preds.pop(tiny_world.samples[-1].sample_id)
    with pytest.raises(PredictionError):
        evaluate_predictions(preds, tiny_world)


def test_extra_prediction_folder(tiny_world, tmp_path):
    write_predictions(_gt_predictions(tiny_world), tmp_path)
    (tmp_path / "v9999" / "0").mkdir(parents=True)
    with pytest.raises(PredictionError, match="unexpected"):
        evaluate_dataset(tmp_path, tiny_world)
