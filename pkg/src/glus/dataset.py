"""Synthetic "moving shapes" referring-VOS corpus and its on-disk layout.

Each video holds a pair of same-appearance objects that differ only in how
they move, plus distinct-appearance fillers.  Expressions come from the closed
grammar in :mod:`glus.language`, so whether an expression singles out its
target can be checked by brute force over the stored motion schedules.

Layout::

    <root>/meta.json
    <root>/Frames/<vid>/00000.png ...
    <root>/Annotations/<vid>/<oid>/00000.png ...
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import language
from .language import COLORS, MOTIONS, SHAPES, Referring

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

META_FILE = "meta.json"
FRAMES_DIR = "Frames"
ANNOTATIONS_DIR = "Annotations"


class ConfigError(ValueError):
    pass


class DatasetLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_videos: int = 100
    frames_per_video: int = 16
    canvas_size: int = 64
    shapes_per_video: int = 3
    expressions_per_object: int = 2
    motion_vocabulary: tuple[str, ...] = MOTIONS
    seed: int = 0

    def validate(self) -> None:
        if self.num_videos < 0:
            raise ConfigError("num_videos must be >= 0")
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if self.shapes_per_video < 2:
            raise ConfigError("shapes_per_video must be >= 2 so a same-appearance distractor exists")
        if self.shapes_per_video > len(COLORS) * len(SHAPES) + 1:
            raise ConfigError("shapes_per_video exceeds the number of distinct appearances")
        if not 1 <= self.expressions_per_object <= 6:
            raise ConfigError("expressions_per_object must be in [1, 6]")
        if self.canvas_size < 16:
            raise ConfigError("canvas_size must be >= 16")
        unknown = [m for m in self.motion_vocabulary if m not in MOTIONS]
        if unknown:
            raise ConfigError(f"motion_vocabulary has unknown motion kinds {unknown}")
        if len(set(self.motion_vocabulary)) < 2:
            raise ConfigError("motion_vocabulary needs at least 2 distinct motions")


@dataclass
class VideoClip:
    video_id: str
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    objects: dict[str, np.ndarray]  # oid -> (T, H, W) uint8 in {0, 1}
    object_info: dict[str, dict] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def validate(self) -> None:
        t, h, w = self.frames.shape[:3]
        for oid, masks in self.objects.items():
            if masks.shape != (t, h, w):
                raise ValueError(f"{self.video_id}/{oid}: mask shape {masks.shape} != {(t, h, w)}")
            if not np.isin(masks, (0, 1)).all():
                raise ValueError(f"{self.video_id}/{oid}: mask values must be 0/1")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and self.objects.keys() == other.objects.keys()
            and all(np.array_equal(self.objects[k], other.objects[k]) for k in self.objects)
            and self.object_info == other.object_info
        )


@dataclass(frozen=True)
class ReferringSample:
    video_id: str
    expression: tuple[str, ...]
    target_object_id: str
    exp_id: str = "0"

    @property
    def sample_id(self) -> str:
        return f"{self.video_id}/{self.exp_id}"

    @property
    def object_key(self) -> str:
        """Globally unique object identity (object ids repeat across videos)."""
        return f"{self.video_id}/{self.target_object_id}"


@dataclass
class Dataset:
    videos: list[VideoClip]
    samples: list[ReferringSample]

    def __post_init__(self) -> None:
        self._by_id = {v.video_id: v for v in self.videos}

    def video(self, video_id: str) -> VideoClip:
        return self._by_id[video_id]

    def subset(self, video_ids) -> "Dataset":
        keep = set(video_ids)
        return Dataset(
            [v for v in self.videos if v.video_id in keep],
            [s for s in self.samples if s.video_id in keep],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.videos == other.videos and self.samples == other.samples


# ---------------------------------------------------------------------------
# scene geometry


def motion_at(segments: list[list], t: int) -> str:
    for motion, start, end in segments:
        if start <= t < end:
            return motion
    return segments[-1][0]


def _segment_offsets(motion: str, n: int, speed: float) -> np.ndarray:
    """Displacement (dx, dy) relative to segment start for steps 0..n-1."""
    tau = np.arange(n, dtype=np.float64)
    if motion == "move-left":
        return np.stack([-speed * tau, 0 * tau], 1)
    if motion == "move-right":
        return np.stack([speed * tau, 0 * tau], 1)
    if motion == "move-up":
        return np.stack([0 * tau, -speed * tau], 1)
    if motion == "move-down":
        return np.stack([0 * tau, speed * tau], 1)
    if motion == "stop":
        return np.zeros((n, 2))
    if motion == "bounce":
        # vertical triangle wave: up for 3 frames, down for 3 frames
        period, amp = 6, 3 * speed
        phase = tau % period
        dy = np.where(phase <= period / 2, -phase, phase - period) * (2 * amp / period)
        return np.stack([0 * tau, dy], 1)
    if motion == "circle":
        radius, omega = 2.5 * speed, 2 * math.pi / 8
        return np.stack([radius * (np.cos(omega * tau) - 1), radius * np.sin(omega * tau)], 1)
    raise ValueError(motion)


def trajectory(start: tuple[float, float], segments: list[list], speed: float, num_frames: int) -> np.ndarray:
    centers = np.zeros((num_frames, 2))
    pos = np.asarray(start, dtype=np.float64)
    for motion, s, e in segments:
        offs = _segment_offsets(motion, e - s + 1, speed)
        centers[s:e] = pos + offs[: e - s]
        pos = pos + offs[e - s]
    return centers


def rasterize(shape: str, center: tuple[float, float], radius: float, size: int) -> np.ndarray:
    """Exact, alias-free occupancy of pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = center
    if shape == "circle":
        m = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    elif shape == "square":
        half = radius * 0.85
        m = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    elif shape == "triangle":
        top, bottom = cy - radius, cy + radius
        frac = (ys - top) / (2 * radius)
        m = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= radius * frac)
    else:
        raise ValueError(shape)
    return m.astype(np.uint8)


def referring_of(info: dict) -> Referring:
    motions: list[str] = []
    for motion, _, _ in info["segments"]:
        if not motions or motions[-1] != motion:
            motions.append(motion)
    return Referring(info["color"], info["shape"], tuple(motions))


def identifying_frames(clip: VideoClip, sample: ReferringSample) -> list[int]:
    """Frames at which the observed motion singles out the target.

    At frame ``t`` the target is identified iff its motion at ``t`` is named
    by the expression and every other object differs from it either in
    appearance or in its motion at ``t``.
    """
    ref = language.parse(sample.expression)
    target = clip.object_info[sample.target_object_id]
    out = []
    for t in range(clip.num_frames):
        m = motion_at(target["segments"], t)
        if (target["color"], target["shape"]) != (ref.color, ref.shape) or m not in ref.motions:
            continue
        clash = any(
            (o["color"], o["shape"]) == (target["color"], target["shape"]) and motion_at(o["segments"], t) == m
            for oid, o in clip.object_info.items()
            if oid != sample.target_object_id
        )
        if not clash:
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# generation


def _sample_segments(rng: np.random.Generator, motions: tuple[str, ...], num_frames: int, two: bool) -> list[list]:
    if not two or num_frames < 2:
        return [[str(rng.choice(motions)), 0, num_frames]]
    lo, hi = max(1, num_frames // 4), max(1, (3 * num_frames) // 4)
    k = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    first = str(rng.choice(motions))
    second = str(rng.choice([m for m in motions if m != first]))
    return [[first, 0, k], [second, k, num_frames]]


def _twin_segments(rng: np.random.Generator, motions: tuple[str, ...], num_frames: int, anchor: list[list]) -> list[list]:
    # Half the time the twin keeps doing what the anchor does later on, so the
    # two are indistinguishable over part of the clip.
    if len(anchor) == 2 and rng.random() < 0.5:
        return [[anchor[1][0], 0, num_frames]]
    return _sample_segments(rng, motions, num_frames, two=rng.random() < 0.5)


def _generate_video(cfg: WorldConfig, index: int, rng: np.random.Generator) -> tuple[VideoClip, list[ReferringSample]]:
    T, S = cfg.frames_per_video, cfg.canvas_size
    radius = max(3.0, S / 12)
    speed = max(1.0, S / 40)
    motions = tuple(cfg.motion_vocabulary)
    appearances = [(c, s) for c in COLORS for s in SHAPES]
    video_id = f"v{index:04d}"

    for _ in range(500):
        order = rng.permutation(len(appearances))
        twin_app = appearances[order[0]]
        others = [appearances[i] for i in order[1 : cfg.shapes_per_video - 1]]
        infos: list[dict] = []
        anchor = _sample_segments(rng, motions, T, two=True)
        infos.append({"color": twin_app[0], "shape": twin_app[1], "segments": anchor})
        twin = _twin_segments(rng, motions, T, anchor)
        infos.append({"color": twin_app[0], "shape": twin_app[1], "segments": twin})
        for c, s in others:
            infos.append({"color": c, "shape": s, "segments": _sample_segments(rng, motions, T, rng.random() < 0.5)})
        if referring_of(infos[0]) == referring_of(infos[1]):
            continue
        trajectories = []
        margin = radius + 1
        ok = True
        for info in infos:
            placed = False
            for _ in range(50):
                start = tuple(rng.uniform(margin, S - 1 - margin, size=2))
                traj = trajectory(start, info["segments"], speed, T)
                if traj.min() < margin or traj.max() > S - 1 - margin:
                    continue
                if any(np.min(np.hypot(*(traj - other).T)) < 2 * radius + 3 for other in trajectories):
                    continue
                trajectories.append(traj)
                info["start"] = [round(float(start[0]), 6), round(float(start[1]), 6)]
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        object_info = {}
        objects = {}
        frames = np.zeros((T, S, S, 3), dtype=np.float32)
        for k, (info, traj) in enumerate(zip(infos, trajectories)):
            oid = str(k)
            info = dict(info, radius=radius, speed=speed)
            object_info[oid] = info
            masks = np.stack([rasterize(info["shape"], tuple(c), radius, S) for c in traj])
            objects[oid] = masks
            frames[masks.astype(bool)] = COLOR_RGB[info["color"]]
        clip = VideoClip(video_id, frames, objects, object_info)

        samples = []
        for oid, info in object_info.items():
            ref = referring_of(info)
            variants = rng.permutation(language.num_variants(ref))[: cfg.expressions_per_object]
            for v in variants:
                samples.append(ReferringSample(video_id, language.render(ref, int(v)), oid, str(len(samples))))
        if all(identifying_frames(clip, s) for s in samples):
            return clip, samples
    raise ConfigError(f"could not place {cfg.shapes_per_video} shapes on a {S}px canvas (canvas_size too small)")


def generate_world(config: WorldConfig) -> Dataset:
    config.validate()
    videos, samples = [], []
    seeds = np.random.SeedSequence(config.seed).spawn(config.num_videos)
    for i, ss in enumerate(seeds):
        clip, exps = _generate_video(config, i, np.random.default_rng(ss))
        videos.append(clip)
        samples.extend(exps)
    return Dataset(videos, samples)


# ---------------------------------------------------------------------------
# disk I/O


def _frame_name(t: int) -> str:
    return f"{t:05d}.png"


def write_dataset(dataset: Dataset, path: str | Path, force: bool = False) -> None:
    root = Path(path)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty; pass force=True to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    meta: dict = {"videos": {}}
    for clip in dataset.videos:
        clip.validate()
        fdir = root / FRAMES_DIR / clip.video_id
        fdir.mkdir(parents=True)
        for t, frame in enumerate(clip.frames):
            Image.fromarray(np.round(frame * 255).astype(np.uint8), "RGB").save(fdir / _frame_name(t))
        for oid, masks in clip.objects.items():
            adir = root / ANNOTATIONS_DIR / clip.video_id / oid
            adir.mkdir(parents=True)
            for t, m in enumerate(masks):
                Image.fromarray((m * 255).astype(np.uint8), "L").save(adir / _frame_name(t))
        meta["videos"][clip.video_id] = {
            "frames": clip.num_frames,
            "objects": {oid: clip.object_info.get(oid, {}) for oid in clip.objects},
            "expressions": [],
        }
    for s in dataset.samples:
        meta["videos"][s.video_id]["expressions"].append(
            {"exp": " ".join(s.expression), "obj_id": s.target_object_id, "exp_id": s.exp_id}
        )
    (root / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def read_mask(path: Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    meta_path = root / META_FILE
    if not meta_path.is_file():
        raise DatasetLoadError(f"missing meta file {meta_path}")
    meta = json.loads(meta_path.read_text())
    videos, samples = [], []
    for vid in sorted(meta["videos"]):
        entry = meta["videos"][vid]
        n = int(entry["frames"])
        frame_files = sorted((root / FRAMES_DIR / vid).glob("*.png"))
        if len(frame_files) != n:
            raise DatasetLoadError(f"{vid}: frame count mismatch ({len(frame_files)} files, meta says {n})")
        frames = np.stack([read_png(f)[..., :3] for f in frame_files]).astype(np.float32) / 255.0
        objects = {}
        for oid in entry["objects"]:
            mask_files = sorted((root / ANNOTATIONS_DIR / vid / oid).glob("*.png"))
            if len(mask_files) != n:
                raise DatasetLoadError(f"{vid}/{oid}: mask count mismatch ({len(mask_files)} masks, {n} frames)")
            objects[oid] = np.stack([read_mask(f) for f in mask_files])
        info = {oid: v for oid, v in entry["objects"].items() if v}
        videos.append(VideoClip(vid, frames, objects, info))
        for k, e in enumerate(entry["expressions"]):
            if e["obj_id"] not in objects:
                raise DatasetLoadError(f"{vid}: expression {e['exp']!r} refers to unknown object id {e['obj_id']!r}")
            samples.append(ReferringSample(vid, tuple(e["exp"].split()), e["obj_id"], str(e.get("exp_id", k))))
    return Dataset(videos, samples)
