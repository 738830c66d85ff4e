import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glus import language
from glus.dataset import (
    ConfigError,
    Dataset,
    DatasetLoadError,
    WorldConfig,
    generate_world,
    identifying_frames,
    load_dataset,
    motion_at,
    rasterize,
    write_dataset,
)


def test_deterministic():
    a = generate_world(WorldConfig(seed=7, num_videos=2))
    b = generate_world(WorldConfig(seed=7, num_videos=2))
    assert a == b
    c = generate_world(WorldConfig(seed=8, num_videos=2))
    assert a != c


def test_shapes_and_values():
    ds = generate_world(WorldConfig(num_videos=3, canvas_size=64, frames_per_video=16, seed=1))
    for clip in ds.videos:
        assert clip.frames.shape == (16, 64, 64, 3)
        assert clip.frames.min() >= 0 and clip.frames.max() <= 1
        for m in clip.objects.values():
            assert m.shape == (16, 64, 64)
            assert set(np.unique(m)) <= {0, 1}


def test_two_expressions_per_object_gives_pairs():
    ds = generate_world(WorldConfig(num_videos=5, shapes_per_video=2, expressions_per_object=2, seed=2))
    counts = {}
    for s in ds.samples:
        counts[s.object_key] = counts.get(s.object_key, 0) + 1
    assert set(counts.values()) == {2}
    assert len({s.expression for s in ds.samples if s.object_key == ds.samples[0].object_key}) == 2


@pytest.mark.parametrize(
    "field,value",
    [("frames_per_video", 0), ("shapes_per_video", 1), ("expressions_per_object", 0), ("motion_vocabulary", ("stop", "fly"))],
)
def test_invalid_config_names_field(field, value):
    cfg = WorldConfig(**{field: value})
    with pytest.raises(ConfigError, match=field):
        generate_world(cfg)


def test_distractor_pair_and_referability():
    ds = generate_world(WorldConfig(num_videos=20, seed=4))
    partial = 0
    for clip in ds.videos:
        apps = [(o["color"], o["shape"]) for o in clip.object_info.values()]
        assert len(apps) > len(set(apps)), "every video needs a same-appearance pair"
    for s in ds.samples:
        clip = ds.video(s.video_id)
        ref = language.parse(s.expression)
        info = clip.object_info[s.target_object_id]
        assert (ref.color, ref.shape) == (info["color"], info["shape"])
        frames = identifying_frames(clip, s)
        assert frames, f"{s.sample_id} never identifies its target"
        partial += len(frames) < clip.num_frames
    assert partial / len(ds.samples) >= 0.3


def test_identifying_frames_bruteforce(tiny_world):
    # independent check: at an identifying frame no other object shares appearance and motion
    for s in tiny_world.samples:
        clip = tiny_world.video(s.video_id)
        tgt = clip.object_info[s.target_object_id]
        for t in identifying_frames(clip, s):
            m = motion_at(tgt["segments"], t)
            for oid, o in clip.object_info.items():
                if oid != s.target_object_id and (o["color"], o["shape"]) == (tgt["color"], tgt["shape"]):
                    assert motion_at(o["segments"], t) != m


def test_masks_are_exact_rasterizations(tiny_world):
    clip = tiny_world.videos[0]
    info = clip.object_info["0"]
    m = rasterize(info["shape"], tuple(info["start"]), info["radius"], clip.frames.shape[1])
    assert np.array_equal(m, clip.objects["0"][0])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["circle", "square", "triangle"]), st.floats(5, 20), st.floats(5, 20), st.floats(2, 5))
def test_rasterize_by_pixel_center(shape, cx, cy, r):
    m = rasterize(shape, (cx, cy), r, 26)
    ys, xs = np.nonzero(m)
    for y, x in zip(ys, xs):
        if shape == "circle":
            assert (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def test_roundtrip(tiny_world, tmp_path):
    write_dataset(tiny_world, tmp_path / "d")
    assert load_dataset(tmp_path / "d") == tiny_world


def test_layout(tmp_path):
    ds = generate_world(WorldConfig(num_videos=2, shapes_per_video=3, frames_per_video=4, seed=0))
    write_dataset(ds, tmp_path)
    assert len(list((tmp_path / "Frames").iterdir())) == 2
    assert len(list((tmp_path / "Annotations").glob("*/*"))) == 6
    meta = json.loads((tmp_path / "meta.json").read_text())
    e = meta["videos"]["v0000"]["expressions"][0]
    assert {"exp", "obj_id"} <= set(e)


def test_overwrite_needs_force(tiny_world, tmp_path):
    write_dataset(tiny_world, tmp_path)
    with pytest.raises(FileExistsError):
        write_dataset(tiny_world, tmp_path)
    write_dataset(tiny_world, tmp_path, force=True)


def test_empty_dataset(tmp_path):
    write_dataset(Dataset([], []), tmp_path / "e")
    assert json.loads((tmp_path / "e" / "meta.json").read_text()) == {"videos": {}}
    assert not (tmp_path / "e" / "Frames").exists()
    assert load_dataset(tmp_path / "e") == Dataset([], [])


def test_mask_count_mismatch(tiny_world, tmp_path):
    write_dataset(tiny_world, tmp_path)
    clip = tiny_world.videos[0]
    (tmp_path / "Annotations" / clip.video_id / "0" / "00005.png").unlink()
    with pytest.raises(DatasetLoadError, match="mask count mismatch"):
        load_dataset(tmp_path)


def test_missing_meta_and_unknown_object(tiny_world, tmp_path):
    with pytest.raises(DatasetLoadError, match="meta"):
        load_dataset(tmp_path)
    write_dataset(tiny_world, tmp_path / "d")
    meta = json.loads((tmp_path / "d" / "meta.json").read_text())
    meta["videos"]["v0000"]["expressions"][0]["obj_id"] = "42"
    (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetLoadError, match="unknown object id"):
        load_dataset(tmp_path / "d")


def test_mask_binarization(tiny_world, tmp_path):
    from PIL import Image

    write_dataset(tiny_world, tmp_path)
    clip = tiny_world.videos[0]
    f = tmp_path / "Annotations" / clip.video_id / "0" / "00000.png"
    arr = np.asarray(Image.open(f))
    assert set(np.unique(arr)) <= {0, 255}
    Image.fromarray(np.where(arr > 0, 200, 100).astype(np.uint8)).save(f)
    loaded = load_dataset(tmp_path)
    assert np.array_equal(loaded.video(clip.video_id).objects["0"][0], clip.objects["0"][0])
