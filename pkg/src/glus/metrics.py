"""Region similarity J, boundary F-measure F, and dataset-level J&F."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import Dataset, read_mask


class PredictionError(RuntimeError):
    pass


def _as_seq(a) -> np.ndarray:
    a = np.asarray(a).astype(bool)
    return a[None] if a.ndim == 2 else a


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_seq(pred), _as_seq(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def frame_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def region_J_per_frame(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    union = (p | g).sum(axis=(1, 2))
    inter = (p & g).sum(axis=(1, 2))
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def region_J(pred, gt) -> float:
    return float(region_J_per_frame(pred, gt).mean())


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor or lying on the image edge."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def default_tolerance(shape: tuple[int, int]) -> int:
    return max(1, math.ceil(0.008 * math.hypot(*shape)))


def frame_boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: float) -> float:
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    # distance from every pixel to the nearest boundary pixel of the other mask
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    precision = float((d_to_g[bp] <= tolerance).mean())
    recall = float((d_to_p[bg] <= tolerance).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_F_per_frame(pred, gt, tolerance: float | None = None) -> np.ndarray:
    p, g = _pair(pred, gt)
    tol = default_tolerance(p.shape[1:]) if tolerance is None else tolerance
    return np.array([frame_boundary_f(a, b, tol) for a, b in zip(p, g)])


def boundary_F(pred, gt, tolerance: float | None = None) -> float:
    return float(boundary_F_per_frame(pred, gt, tolerance).mean())


@dataclass
class MetricReport:
    per_sample: dict[str, tuple[float, float]] = field(default_factory=dict)
    curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def J(self) -> float:
        return float(np.mean([j for j, _ in self.per_sample.values()])) if self.per_sample else 0.0

    @property
    def F(self) -> float:
        return float(np.mean([f for _, f in self.per_sample.values()])) if self.per_sample else 0.0

    @property
    def JF(self) -> float:
        return (self.J + self.F) / 2

    def row(self) -> dict[str, float]:
        return {"J": self.J, "F": self.F, "J&F": self.JF}

    def to_dict(self) -> dict:
        return {
            **self.row(),
            "per_sample": {k: {"J": j, "F": f} for k, (j, f) in sorted(self.per_sample.items())},
            "curve": [list(p) for p in self.curve],
        }


def evaluate_predictions(predictions: dict[str, np.ndarray], dataset: Dataset) -> MetricReport:
    """``predictions`` maps sample_id -> (T, H, W) binary masks; every sample must be present."""
    expected = {s.sample_id for s in dataset.samples}
    missing = sorted(expected - predictions.keys())
    if missing:
        raise PredictionError(f"missing predictions for {missing[:5]}")
    report = MetricReport()
    for s in dataset.samples:
        gt = dataset.video(s.video_id).objects[s.target_object_id]
        pred = predictions[s.sample_id]
        report.per_sample[s.sample_id] = (region_J(pred, gt), boundary_F(pred, gt))
    return report


def load_predictions(path: str | Path, dataset: Dataset) -> dict[str, np.ndarray]:
    root = Path(path)
    expected = {(s.video_id, s.exp_id) for s in dataset.samples}
    found = {(p.parent.name, p.name) for p in root.glob("*/*") if p.is_dir()}
    extra = sorted(found - expected)
    if extra:
        raise PredictionError(f"unexpected prediction folder {root / extra[0][0] / extra[0][1]}")
    preds = {}
    for s in dataset.samples:
        T = dataset.video(s.video_id).num_frames
        d = root / s.video_id / s.exp_id
        masks = []
        for t in range(T):
            f = d / f"{t:05d}.png"
            if not f.is_file():
                raise PredictionError(f"missing prediction file {f}")
            masks.append(read_mask(f))
        surplus = sorted(set(p.name for p in d.glob("*.png")) - {f"{t:05d}.png" for t in range(T)})
        if surplus:
            raise PredictionError(f"unexpected prediction file {d / surplus[0]}")
        preds[s.sample_id] = np.stack(masks)
    return preds


def evaluate_dataset(predictions_dir: str | Path, dataset: Dataset) -> MetricReport:
    return evaluate_predictions(load_predictions(predictions_dir, dataset), dataset)
