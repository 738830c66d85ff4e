"""Training loop, sliding-window inference and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import language, sampling
from .dataset import Dataset, ReferringSample
from .losses import LossWeights, NonFiniteLoss, TokenBank, mask_bce, mask_dice, object_contrastive, text_ce, total_loss
from .memory import INFER_STRIDE, MAX_ENTRIES, TRAIN_STRIDE, MemoryBank, MemoryEntry
from .model import ModelConfig, Segmenter, text_targets

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    grad_accumulation: int = 1
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    global_only: bool = False
    local_only: bool = False
    use_memory: bool = True
    use_contrastive: bool = True
    num_context: int = 4
    num_query: int = 4
    pair_fraction: float = 1.0
    source_weights: tuple[tuple[str, float], ...] = (("synthetic", 1.0),)
    token_bank_capacity: int = 256
    ct_reduction: str = "sum"
    reverse_prob: float = 0.0
    checkpoint_every: int = 0
    early_stop_fraction: float = 1 / 6
    seed: int = 0
    train_stride: int = TRAIN_STRIDE
    max_entries: int = MAX_ENTRIES

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.global_only and self.local_only:
            raise ValueError("global_only and local_only are mutually exclusive")
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("batch_size and grad_accumulation must be >= 1")
        if self.ct_reduction not in ("sum", "mean"):
            raise ValueError("ct_reduction must be 'sum' or 'mean'")

    @property
    def mode(self) -> str:
        return "global" if self.global_only else "local" if self.local_only else "glu"

    @property
    def memory_enabled(self) -> bool:
        return self.use_memory and not self.global_only

    @property
    def window(self) -> tuple[int, int]:
        """(context frames, query frames) per model pass."""
        if self.global_only or self.local_only:
            return 0, self.num_context + self.num_query
        return self.num_context, self.num_query


@dataclass
class Batch:
    text: torch.Tensor  # (B, L)
    context: torch.Tensor  # (B, Nc, H, W, 3)
    context_ids: torch.Tensor  # (B, Nc)
    query: torch.Tensor  # (B, Nq, H, W, 3)
    query_ids: torch.Tensor  # (B, Nq)
    masks: torch.Tensor  # (B, Nq, H, W)
    object_keys: list[str]
    sample_ids: list[str]


def encode_text(expressions: list[tuple[str, ...]], length: int = 1 + language.MAX_EXPRESSION_LEN) -> torch.Tensor:
    """``<bos>`` + tokens, padded to a fixed ``length`` so a sample's sequence never depends on its batch."""
    ids = [[language.BOS_ID, *language.encode(e)] for e in expressions]
    if max(len(x) for x in ids) > length:
        raise ValueError(f"expression longer than {length - 1} tokens")
    return torch.tensor([x + [language.PAD_ID] * (length - len(x)) for x in ids])


def make_batch(dataset: Dataset, samples: list[ReferringSample], windows: list[sampling.FrameWindow]) -> Batch:
    ctx, cids, qry, qids, masks = [], [], [], [], []
    for s, w in zip(samples, windows):
        clip = dataset.video(s.video_id)
        ctx.append(clip.frames[list(w.context_ids)])
        qry.append(clip.frames[list(w.query_ids)])
        masks.append(clip.objects[s.target_object_id][list(w.query_ids)])
        cids.append(w.context_ids)
        qids.append(w.query_ids)
    return Batch(
        text=encode_text([s.expression for s in samples]),
        context=torch.from_numpy(np.stack(ctx)),
        context_ids=torch.tensor(cids, dtype=torch.long).reshape(len(samples), -1),
        query=torch.from_numpy(np.stack(qry)),
        query_ids=torch.tensor(qids, dtype=torch.long),
        masks=torch.from_numpy(np.stack(masks)).float(),
        object_keys=[s.object_key for s in samples],
        sample_ids=[s.sample_id for s in samples],
    )


class BatchSampler:
    """Draws batches in object groups so same-object expression pairs are common.

    Each group picks an object; with probability ``pair_fraction`` it contributes
    two different expressions of that object, otherwise one expression plus one
    unrelated sample.
    """

    def __init__(self, sources: dict[str, Dataset], weights: dict[str, float], rng: np.random.Generator, pair_fraction: float = 1.0):
        self.sources = {k: v for k, v in sources.items() if v.samples}
        if not self.sources:
            raise ValueError("dataset has no samples")
        w = np.array([weights.get(k, 0.0) for k in self.sources], dtype=np.float64)
        if w.sum() <= 0:
            w = np.ones(len(self.sources))
        self.names = list(self.sources)
        self.p = w / w.sum()
        self.rng = rng
        self.pair_fraction = pair_fraction
        self.by_object: dict[str, dict[str, list[ReferringSample]]] = {}
        for name, ds in self.sources.items():
            groups: dict[str, list[ReferringSample]] = {}
            for s in ds.samples:
                groups.setdefault(s.object_key, []).append(s)
            self.by_object[name] = groups

    def _source(self) -> str:
        return self.names[int(self.rng.choice(len(self.names), p=self.p))]

    def sample(self, batch_size: int) -> list[tuple[str, ReferringSample]]:
        out: list[tuple[str, ReferringSample]] = []
        while len(out) < batch_size:
            src = self._source()
            groups = self.by_object[src]
            keys = list(groups)
            obj = keys[int(self.rng.integers(len(keys)))]
            exps = groups[obj]
            room = batch_size - len(out)
            if room >= 2 and len(exps) >= 2 and self.rng.random() < self.pair_fraction:
                a, b = self.rng.choice(len(exps), size=2, replace=False)
                out += [(src, exps[int(a)]), (src, exps[int(b)])]
            else:
                out.append((src, exps[int(self.rng.integers(len(exps)))]))
                if room >= 2:
                    other = self.sources[src].samples
                    out.append((src, other[int(self.rng.integers(len(other)))]))
        return out


def sample_window(cfg: TrainConfig, T: int, rng: np.random.Generator) -> sampling.FrameWindow:
    n_c, n_q = cfg.window
    if cfg.global_only:
        return sampling.sample_uniform_window(T, n_q, rng)
    w = sampling.sample_train_window(T, n_c, n_q, rng)
    if cfg.reverse_prob and rng.random() < cfg.reverse_prob:
        w = sampling.FrameWindow(w.context_ids, tuple(reversed(w.query_ids)))
    return w


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then constant."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


# ---------------------------------------------------------------------------
# forward pass over one window


@dataclass
class WindowOutput:
    text_logits: torch.Tensor
    seg: torch.Tensor
    seg_positions: torch.Tensor
    mask_logits: torch.Tensor  # (B, Nq, H, W)


def window_forward(model: Segmenter, batch: Batch, use_memory: bool, stride: int = TRAIN_STRIDE, max_entries: int = MAX_ENTRIES) -> WindowOutput:
    """Training-time pass: fresh memory bank per window, masks decoded in query order."""
    ctx = model.encode_frame(batch.context) if batch.context.shape[1] else batch.context.new_zeros(
        (batch.text.shape[0], 0, model.cfg.grid**2, model.cfg.d_model)
    )
    qry = model.encode_frame(batch.query)
    seq = model.forward_sequence(batch.text, ctx, batch.context_ids, qry, batch.query_ids)
    bank = MemoryBank()
    logits = []
    for t in range(qry.shape[1]):
        feats = qry[:, t]
        if use_memory:
            feats = model.memory_read(feats, bank.select(t, stride, max_entries))
        m = model.decode_mask(feats, seg=seq.seg[:, t], image=batch.query[:, t])
        logits.append(m)
        if use_memory:
            bank.push(MemoryEntry(model.encode_memory(m, qry[:, t]), t))
    return WindowOutput(seq.text_logits, seq.seg, seq.seg_positions, torch.stack(logits, 1))


def loss_parts(out: WindowOutput, batch: Batch, cfg: TrainConfig, weights: LossWeights, bank: TokenBank | None) -> dict[str, torch.Tensor]:
    B, n_q = out.seg.shape[:2]
    pos, tgt = text_targets(out, out.text_logits.shape[1])
    parts = {
        "ce": text_ce(out.text_logits[:, pos], tgt.expand(B, -1)),
        "bce": mask_bce(out.mask_logits, batch.masks),
        "dice": mask_dice(out.mask_logits, batch.masks),
    }
    if cfg.use_contrastive and weights.lambda_ct > 0:
        tokens = out.seg.reshape(B * n_q, -1)
        objs = [o for o in batch.object_keys for _ in range(n_q)]
        smps = [s for s in batch.sample_ids for _ in range(n_q)]
        parts["ct"] = object_contrastive(tokens, objs, smps, bank, weights.tau, cfg.ct_reduction)
    return parts


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(path: str | Path, model: Segmenter, train_cfg: TrainConfig | None = None, step: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    if path.suffix != ".pt":
        path = path / "checkpoint.pt"
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "segmenter",
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "step": step,
        "state_dict": model.state_dict(),
        **(extra or {}),
    }
    _atomic_save(payload, path)
    return path


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["betas"] = tuple(d["betas"])
    d["source_weights"] = tuple(tuple(x) for x in d["source_weights"])
    return TrainConfig(**d)


def load_checkpoint(path: str | Path) -> tuple[Segmenter, TrainConfig | None]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.pt"
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION or payload.get("kind") != "segmenter":
        raise ValueError(f"{path}: unsupported checkpoint (version={payload.get('version')}, kind={payload.get('kind')})")
    model = Segmenter(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    tc = payload.get("train_config")
    return model, (_train_config_from_dict(tc) if tc else None)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Segmenter
    losses: list[dict] = field(default_factory=list)
    checkpoints: dict[int, Path] = field(default_factory=dict)


def train(
    dataset: Dataset | dict[str, Dataset],
    model: Segmenter,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    run_dir: str | Path | None = None,
    log_every: int = 50,
    eval_hook=None,
) -> TrainResult:
    """Optimize ``model`` in place; returns the per-step loss log and checkpoint paths.

    Checkpoints go to ``run_dir/step_<k>/`` every ``checkpoint_every`` steps, at
    the early-stop step (``early_stop_fraction`` of training) and at the end.
    ``eval_hook(step, model)`` is called at each checkpoint when given.
    """
    sources = dataset if isinstance(dataset, dict) else {"synthetic": dataset}
    if not any(ds.samples for ds in sources.values()):
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    sampler = BatchSampler(sources, dict(cfg.source_weights), rng, cfg.pair_fraction)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    token_bank = TokenBank(cfg.token_bank_capacity)
    result = TrainResult(model)
    run_dir = Path(run_dir) if run_dir else None
    log_file = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "losses.jsonl", "w")

    ckpt_steps = set()
    if cfg.checkpoint_every:
        ckpt_steps.update(range(cfg.checkpoint_every, cfg.steps + 1, cfg.checkpoint_every))
    if cfg.early_stop_fraction:
        ckpt_steps.add(max(1, round(cfg.steps * cfg.early_stop_fraction)))
    ckpt_steps.add(cfg.steps)

    model.train()
    try:
        for step in range(cfg.steps):
            for g in opt.param_groups:
                g["lr"] = lr_at(step, cfg)
            opt.zero_grad(set_to_none=True)
            record = {"step": step + 1, "lr": lr_at(step, cfg)}
            sums: dict[str, float] = {}
            for _ in range(cfg.grad_accumulation):
                drawn = sampler.sample(cfg.batch_size)
                samples = [s for _, s in drawn]
                windows = [sample_window(cfg, sources[src].video(s.video_id).num_frames, rng) for src, s in drawn]
                # all samples of a batch come from one source per draw; look frames up per sample
                batch = _batch_from_sources(sources, drawn, windows)
                out = window_forward(model, batch, cfg.memory_enabled, cfg.train_stride, cfg.max_entries)
                parts = loss_parts(out, batch, cfg, weights, token_bank)
                try:
                    loss = total_loss(parts, weights, step + 1)
                except NonFiniteLoss as exc:
                    raise TrainingDiverged(str(exc)) from exc
                (loss / cfg.grad_accumulation).backward()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) / cfg.grad_accumulation
                sums["total"] = sums.get("total", 0.0) + float(loss.detach()) / cfg.grad_accumulation
            opt.step()
            record.update(sums)
            record["weighted"] = {k: getattr(weights, f"lambda_{k}") * v for k, v in sums.items() if k != "total"}
            result.losses.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if log_every and (step + 1) % log_every == 0:
                log.info("step %d loss %.4f %s", step + 1, sums["total"], {k: round(v, 4) for k, v in sums.items()})
            if (step + 1) in ckpt_steps:
                if run_dir:
                    result.checkpoints[step + 1] = save_checkpoint(run_dir / f"step_{step + 1}", model, cfg, step + 1)
                if eval_hook:
                    model.eval()
                    eval_hook(step + 1, model)
                    model.train()
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return result


def _batch_from_sources(sources: dict[str, Dataset], drawn, windows) -> Batch:
    if len(sources) == 1:
        (ds,) = sources.values()
        return make_batch(ds, [s for _, s in drawn], windows)
    merged = Dataset([v for ds in sources.values() for v in ds.videos], [])
    return make_batch(merged, [s for _, s in drawn], windows)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class InferOptions:
    use_memory: bool | None = None  # None: follow the checkpoint's training flags
    stride: int = INFER_STRIDE
    max_entries: int = MAX_ENTRIES
    batch_size: int = 32


def _mode_of(train_cfg: TrainConfig | None) -> TrainConfig:
    return train_cfg or TrainConfig()


class VideoFeatureCache:
    def __init__(self, model: Segmenter, dataset: Dataset):
        self.model, self.dataset = model, dataset
        self._feats: dict[str, torch.Tensor] = {}
        self._frames: dict[str, torch.Tensor] = {}

    def frames(self, vid: str) -> torch.Tensor:
        if vid not in self._frames:
            self._frames[vid] = torch.from_numpy(self.dataset.video(vid).frames)
        return self._frames[vid]

    def feats(self, vid: str) -> torch.Tensor:
        if vid not in self._feats:
            self._feats[vid] = self.model.encode_frame(self.frames(vid))
        return self._feats[vid]


@torch.no_grad()
def segment_along(
    model: Segmenter,
    cache: VideoFeatureCache,
    samples: list[ReferringSample],
    orders: list[list[int]],
    context_ids: list[list[int]],
    n_query: int,
    use_memory: bool,
    stride: int,
    max_entries: int,
) -> torch.Tensor:
    """Sliding-window segmentation of each sample along its frame ``order``.

    All orders must share one length ``L``; returns mask logits (B, L, H, W)
    indexed by position in the order.  Each sample gets its own memory bank
    (batched lockstep: entries carry a batch dimension).
    """
    B, L = len(samples), len(orders[0])
    text = encode_text([s.expression for s in samples])
    feats = [cache.feats(s.video_id) for s in samples]
    frames = [cache.frames(s.video_id) for s in samples]
    ctx_idx = torch.tensor(context_ids, dtype=torch.long).reshape(B, -1)
    ctx = torch.stack([f[c] for f, c in zip(feats, ctx_idx)])
    order = torch.tensor(orders, dtype=torch.long)
    bank = MemoryBank()
    out: list[torch.Tensor | None] = [None] * L
    for win in sampling.sliding_query_windows(L, n_query):
        pos = list(win.ids) + [win.ids[-1]] * (n_query - len(win.ids))
        fid = order[:, pos]
        q = torch.stack([f[i] for f, i in zip(feats, fid)])
        seq = model.forward_sequence(text, ctx, ctx_idx, q, fid)
        for e in win.emit:
            p = win.ids[e]
            tokens = q[:, e]
            if use_memory:
                tokens = model.memory_read(tokens, bank.select(p, stride, max_entries))
            img = torch.stack([fr[i] for fr, i in zip(frames, fid[:, e])])
            m = model.decode_mask(tokens, seq.seg[:, e], img)
            out[p] = m
            if use_memory:
                bank.push(MemoryEntry(model.encode_memory(m, q[:, e]), p))
    return torch.stack(out, 1)


@torch.no_grad()
def segment_global(model: Segmenter, cache: VideoFeatureCache, samples: list[ReferringSample], T: int, n_frames: int) -> torch.Tensor:
    """Global-only baseline: interleaved folds of spread-out frames, no memory."""
    B = len(samples)
    text = encode_text([s.expression for s in samples])
    feats = [cache.feats(s.video_id) for s in samples]
    frames = [cache.frames(s.video_id) for s in samples]
    out: list[torch.Tensor | None] = [None] * T
    empty = torch.zeros(B, 0, model.cfg.grid**2, model.cfg.d_model)
    for fold in sampling.uniform_folds(T, n_frames):
        fid = torch.tensor([fold.ids] * B)
        q = torch.stack([f[list(fold.ids)] for f in feats])
        seq = model.forward_sequence(text, empty, torch.zeros(B, 0, dtype=torch.long), q, fid)
        for e in fold.emit:
            img = torch.stack([fr[fold.ids[e]] for fr in frames])
            out[fold.ids[e]] = model.decode_mask(q[:, e], seq.seg[:, e], img)
    return torch.stack(out, 1)


def _chunks(items: list, n: int):
    for i in range(0, len(items), n):
        yield items[i : i + n]


@torch.no_grad()
def predict_logits(
    model: Segmenter,
    dataset: Dataset,
    train_cfg: TrainConfig | None = None,
    options: InferOptions = InferOptions(),
    samples: list[ReferringSample] | None = None,
) -> dict[str, torch.Tensor]:
    """Plain (no key frame) inference; returns sample_id -> mask logits (T, H, W)."""
    model.eval()
    tc = _mode_of(train_cfg)
    n_c, n_q = tc.window
    use_memory = tc.memory_enabled if options.use_memory is None else options.use_memory
    cache = VideoFeatureCache(model, dataset)
    samples = dataset.samples if samples is None else samples
    by_len: dict[int, list[ReferringSample]] = {}
    for s in samples:
        by_len.setdefault(dataset.video(s.video_id).num_frames, []).append(s)
    result = {}
    for T, group in by_len.items():
        for chunk in _chunks(group, options.batch_size):
            if tc.global_only:
                logits = segment_global(model, cache, chunk, T, n_q)
            else:
                ctx = sampling.inference_context(T, n_c)
                logits = segment_along(
                    model, cache, chunk, [list(range(T))] * len(chunk), [ctx] * len(chunk), n_q,
                    use_memory, options.stride, options.max_entries,
                )
            for s, lg in zip(chunk, logits):
                result[s.sample_id] = lg
    return result


def binarize(logits: torch.Tensor) -> np.ndarray:
    return (logits > 0).to(torch.uint8).numpy()


def predict(model, dataset, train_cfg=None, options: InferOptions = InferOptions(), samples=None) -> dict[str, np.ndarray]:
    return {k: binarize(v) for k, v in predict_logits(model, dataset, train_cfg, options, samples).items()}


def write_predictions(predictions: dict[str, np.ndarray], path: str | Path) -> Path:
    """``<path>/<vid>/<exp_id>/00000.png``, one binary mask per frame (0/255)."""
    root = Path(path)
    for sid, masks in predictions.items():
        vid, exp_id = sid.split("/")
        d = root / vid / exp_id
        d.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(masks):
            Image.fromarray((m * 255).astype(np.uint8), "L").save(d / f"{t:05d}.png")
    return root


@torch.no_grad()
def infer_masks(model, dataset: Dataset, train_cfg: TrainConfig | None = None, options: InferOptions = InferOptions(), selector=None) -> dict[str, np.ndarray]:
    """Binary masks for every sample; with a selector, propagate outward from each key frame."""
    if selector is None:
        return predict(model, dataset, train_cfg, options)
    from .selector import propagate_from_keys, score_frames, select_key_frame

    scores = score_frames(selector, dataset, batch_size=options.batch_size)
    keys = [select_key_frame(scores[s.sample_id]) for s in dataset.samples]
    logits = propagate_from_keys(model, dataset, dataset.samples, keys, train_cfg, options)
    return {k: binarize(v) for k, v in logits.items()}


def infer(model, dataset: Dataset, out_dir: str | Path, train_cfg: TrainConfig | None = None, options: InferOptions = InferOptions(), selector=None) -> Path:
    """Segment every sample and write ``<out_dir>/<vid>/<exp_id>/<t>.png``."""
    return write_predictions(infer_masks(model, dataset, train_cfg, options, selector), out_dir)
