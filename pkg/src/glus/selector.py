"""Self-refined key-frame selection and bidirectional propagation.

An early segmenter checkpoint labels frames of part of the training set with
the IoU of its own predictions.  A separate score model learns to regress
that IoU from ``[prompt, 8 context frames, query frame, <score>]``; at test
time the highest-scoring frame becomes the first query frame and the
segmenter runs outward from it in both directions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import language, sampling
from .dataset import Dataset, ReferringSample
from .losses import text_ce
from .metrics import frame_iou
from .model import ModelConfig, FrameEncoder, SequenceModel
from .trainer import (
    InferOptions,
    TrainConfig,
    VideoFeatureCache,
    _atomic_save,
    _chunks,
    encode_text,
    lr_at,
    predict,
    segment_along,
)

log = logging.getLogger(__name__)

SELECTOR_CONTEXT = 8


@dataclass(frozen=True)
class FrameScoreLabel:
    video_id: str
    exp_id: str
    frame: int
    iou: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")

    @property
    def sample_id(self) -> str:
        return f"{self.video_id}/{self.exp_id}"


def pick_videos(dataset: Dataset, fraction: float, seed: int = 0) -> list[str]:
    ids = [v.video_id for v in dataset.videos]
    n = int(round(fraction * len(ids)))
    order = np.random.default_rng(seed).permutation(len(ids))
    return sorted(ids[i] for i in order[:n])


def annotate_pseudo_labels(
    model,
    dataset: Dataset,
    fraction: float = 0.5,
    train_cfg: TrainConfig | None = None,
    options: InferOptions = InferOptions(),
    seed: int = 0,
) -> list[FrameScoreLabel]:
    """Per-frame IoU of ``model``'s own plain-inference masks on a video subset."""
    if model.cfg.resolution != dataset.videos[0].frames.shape[1] if dataset.videos else False:
        raise ValueError(f"checkpoint resolution {model.cfg.resolution} does not match the dataset frames")
    subset = dataset.subset(pick_videos(dataset, fraction, seed))
    preds = predict(model, subset, train_cfg, options)
    labels = []
    for s in subset.samples:
        gt = subset.video(s.video_id).objects[s.target_object_id]
        for t, (p, g) in enumerate(zip(preds[s.sample_id], gt)):
            labels.append(FrameScoreLabel(s.video_id, s.exp_id, t, frame_iou(p.astype(bool), g.astype(bool))))
    return labels


def write_labels(labels: list[FrameScoreLabel], path: str | Path) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(json.dumps(asdict(lab)) + "\n")


def read_labels(path: str | Path) -> list[FrameScoreLabel]:
    with open(path) as fh:
        return [FrameScoreLabel(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# score model


@dataclass(frozen=True)
class SelectorConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    resolution: int = 64
    patch: int = 8
    mlp_layers: int = 3
    num_context: int = SELECTOR_CONTEXT
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    lambda_s: float = 1.0
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, layers=self.layers, heads=self.heads, resolution=self.resolution, patch=self.patch)


@dataclass
class SelectorOutput:
    score: torch.Tensor  # (B,)
    text_logits: torch.Tensor  # (B, n, V)
    score_position: int


class Selector(nn.Module):
    def __init__(self, cfg: SelectorConfig):
        super().__init__()
        self.cfg = cfg
        mc = cfg.model_config()
        self.encoder = FrameEncoder(mc)
        self.llm = SequenceModel(mc)
        d = cfg.d_model
        layers: list[nn.Module] = []
        for _ in range(cfg.mlp_layers - 1):
            layers += [nn.Linear(d, d), nn.GELU()]
        layers.append(nn.Linear(d, 1))
        self.score_head = nn.Sequential(*layers)

    def forward(self, prompt: torch.Tensor, context: torch.Tensor, context_ids: torch.Tensor, query: torch.Tensor, query_ids: torch.Tensor) -> SelectorOutput:
        """``context`` (B, 8, 64, d) and ``query`` (B, 1, 64, d) are encoded frame features."""
        if context.shape[1] != self.cfg.num_context or query.shape[1] != 1:
            raise ValueError(f"selector takes {self.cfg.num_context} context frames and 1 query frame")
        x, pos = self.llm.assemble(prompt, context, context_ids, query, query_ids, language.SCORE_ID)
        h = x
        for blk in self.llm.blocks:
            h = blk(h)
        h = self.llm.ln_f(h)
        logits = self.llm.head(h)
        p = int(pos[-1])
        return SelectorOutput(self.score_head(h[:, p]).squeeze(-1), logits, p)


def selector_text_targets(out: SelectorOutput) -> tuple[list[int], torch.Tensor]:
    p = out.score_position
    return [p - 1, p], torch.tensor([language.SCORE_ID, language.EOS_ID])


def selector_loss(score: torch.Tensor, y: torch.Tensor, text_logits: torch.Tensor, text_targets: torch.Tensor, lambda_s: float = 1.0) -> tuple[torch.Tensor, dict]:
    y = torch.as_tensor(y, dtype=score.dtype)
    if (y < 0).any() or (y > 1).any():
        raise ValueError("pseudo-labels must lie in [0, 1]")
    l_s = (y - score).abs().mean()
    l_txt = text_ce(text_logits, text_targets)
    return l_txt + lambda_s * l_s, {"txt": float(l_txt.detach()), "s": float(l_s.detach())}


def prompt_tokens(samples: list[ReferringSample]) -> torch.Tensor:
    return encode_text([tuple(language.selector_prompt(s.expression)) for s in samples], 1 + language.MAX_PROMPT_LEN)


def _context_for(T: int, n: int, rng: np.random.Generator | None) -> list[int]:
    if rng is None:
        return sampling.inference_context(T, n)
    return [int(rng.integers(a, b + 1)) for a, b in sampling.split_spans(T, n)]


def _forward_frames(sel: Selector, cache: VideoFeatureCache, samples, frames, contexts) -> SelectorOutput:
    feats = [cache.feats(s.video_id) for s in samples]
    ctx_ids = torch.tensor(contexts, dtype=torch.long)
    ctx = torch.stack([f[c] for f, c in zip(feats, ctx_ids)])
    q_ids = torch.tensor(frames, dtype=torch.long).unsqueeze(1)
    q = torch.stack([f[i] for f, i in zip(feats, q_ids)])
    return sel(prompt_tokens(samples), ctx, ctx_ids, q, q_ids)


class _SelectorCache(VideoFeatureCache):
    def feats(self, vid: str) -> torch.Tensor:
        return self.model.encoder(self.frames(vid))


def train_selector(dataset: Dataset, labels: list[FrameScoreLabel], cfg: SelectorConfig, log_every: int = 50) -> tuple[Selector, list[dict]]:
    if not labels:
        raise ValueError("no pseudo-labels to train on")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    sel = Selector(cfg)
    opt = torch.optim.Adam(sel.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    lookup = {s.sample_id: s for s in dataset.samples}
    cache = _SelectorCache(sel, dataset)
    sched = TrainConfig(steps=cfg.steps, learning_rate=cfg.learning_rate, warmup_steps=cfg.warmup_steps)
    history = []
    sel.train()
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, sched)
        picks = [labels[int(i)] for i in rng.integers(len(labels), size=cfg.batch_size)]
        samples = [lookup[l.sample_id] for l in picks]
        contexts = [_context_for(dataset.video(s.video_id).num_frames, cfg.num_context, rng) for s in samples]
        out = _forward_frames(sel, cache, samples, [l.frame for l in picks], contexts)
        pos, tgt = selector_text_targets(out)
        y = torch.tensor([l.iou for l in picks])
        loss, parts = selector_loss(out.score, y, out.text_logits[:, pos], tgt.expand(len(picks), -1), cfg.lambda_s)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": float(loss.detach()), **parts})
        if log_every and (step + 1) % log_every == 0:
            log.info("selector step %d loss %.4f %s", step + 1, history[-1]["loss"], parts)
    sel.eval()
    return sel, history


@torch.no_grad()
def score_frames(sel: Selector, dataset: Dataset, samples: list[ReferringSample] | None = None, batch_size: int = 32) -> dict[str, np.ndarray]:
    """sample_id -> per-frame scores, context fixed to whole-video span centers."""
    sel.eval()
    cache = _SelectorCache(sel, dataset)
    samples = dataset.samples if samples is None else samples
    jobs = [(s, t) for s in samples for t in range(dataset.video(s.video_id).num_frames)]
    scores: dict[str, list[float]] = {s.sample_id: [] for s in samples}
    for chunk in _chunks(jobs, batch_size):
        ss = [s for s, _ in chunk]
        ctx = [_context_for(dataset.video(s.video_id).num_frames, sel.cfg.num_context, None) for s in ss]
        out = _forward_frames(sel, cache, ss, [t for _, t in chunk], ctx)
        for (s, _), v in zip(chunk, out.score.tolist()):
            scores[s.sample_id].append(v)
    return {k: np.asarray(v) for k, v in scores.items()}


def select_key_frame(scores) -> int:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no frame scores")
    return int(np.argmax(s))  # first maximum wins ties


def save_selector(path: str | Path, sel: Selector) -> Path:
    path = Path(path)
    if path.suffix != ".pt":
        path = path / "selector.pt"
    _atomic_save({"version": 1, "kind": "selector", "config": asdict(sel.cfg), "state_dict": sel.state_dict()}, path)
    return path


def load_selector(path: str | Path) -> Selector:
    path = Path(path)
    if path.is_dir():
        path = path / "selector.pt"
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "selector":
        raise ValueError(f"{path} is not a selector checkpoint")
    cfg = dict(payload["config"])
    cfg["betas"] = tuple(cfg["betas"])
    sel = Selector(SelectorConfig(**cfg))
    sel.load_state_dict(payload["state_dict"])
    sel.eval()
    return sel


# ---------------------------------------------------------------------------
# propagation


def propagation_orders(T: int, key: int) -> tuple[list[int], list[int]]:
    """Forward order ``key..T-1`` and backward order ``key..0``; the key's mask comes from forward."""
    if not 0 <= key < T:
        raise ValueError(f"key frame {key} outside [0, {T})")
    return list(range(key, T)), list(range(key, -1, -1))


@torch.no_grad()
def propagate_from_keys(
    model,
    dataset: Dataset,
    samples: list[ReferringSample],
    keys: list[int],
    train_cfg: TrainConfig | None = None,
    options: InferOptions = InferOptions(),
) -> dict[str, torch.Tensor]:
    """Run the segmenter outward from each sample's key frame; sample_id -> logits (T, H, W)."""
    tc = train_cfg or TrainConfig()
    if tc.global_only:
        raise ValueError("key-frame propagation needs a sliding-window (glu/local) model")
    n_c, n_q = tc.window
    use_memory = tc.memory_enabled if options.use_memory is None else options.use_memory
    cache = VideoFeatureCache(model, dataset)
    groups: dict[tuple[int, int], list[ReferringSample]] = {}
    for s, k in zip(samples, keys):
        groups.setdefault((dataset.video(s.video_id).num_frames, k), []).append(s)
    out: dict[str, torch.Tensor] = {}
    for (T, key), group in groups.items():
        fwd, bwd = propagation_orders(T, key)
        ctx = sampling.inference_context(T, n_c)
        for chunk in _chunks(group, options.batch_size):
            n = len(chunk)
            f = segment_along(model, cache, chunk, [fwd] * n, [ctx] * n, n_q, use_memory, options.stride, options.max_entries)
            b = None
            if len(bwd) > 1:
                b = segment_along(model, cache, chunk, [bwd] * n, [ctx] * n, n_q, use_memory, options.stride, options.max_entries)
            for i, s in enumerate(chunk):
                frames = [None] * T
                for p, t in enumerate(fwd):
                    frames[t] = f[i, p]
                if b is not None:
                    for p, t in enumerate(bwd[1:], start=1):
                        frames[t] = b[i, p]
                out[s.sample_id] = torch.stack(frames)
    return out


def propagate_from_key(model, dataset: Dataset, sample: ReferringSample, key: int, train_cfg: TrainConfig | None = None, options: InferOptions = InferOptions()) -> torch.Tensor:
    return propagate_from_keys(model, dataset, [sample], [key], train_cfg, options)[sample.sample_id]
