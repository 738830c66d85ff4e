"""Flat ``key = value`` configuration with dotted keys.

One setting per line, ``#`` starts a comment::

    loss.lambda_ct = 0.1
    train.steps = 2000
    world.motion_vocabulary = move-left, move-right, stop

Command-line overrides (``loss.tau=0.1``) take precedence over file values.
Unknown keys are rejected before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .dataset import WorldConfig
from .language import MOTIONS
from .losses import LossWeights
from .memory import INFER_STRIDE, MAX_ENTRIES, TRAIN_STRIDE
from .model import ModelConfig
from .selector import SelectorConfig
from .trainer import InferOptions, TrainConfig


class ConfigParseError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _list(text))


def _weights(text: str) -> tuple[tuple[str, float], ...]:
    out = []
    for item in _list(text):
        name, _, w = item.partition(":")
        out.append((name.strip(), float(w)))
    return tuple(out)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


_t, _w, _m, _l, _s = TrainConfig(), WorldConfig(), ModelConfig(), LossWeights(), SelectorConfig()

KEYS: dict[str, Key] = {
    # world
    "world.num_videos": Key(int, _w.num_videos, "videos to generate"),
    "world.frames_per_video": Key(int, _w.frames_per_video, "frames per video (T)"),
    "world.canvas_size": Key(int, _w.canvas_size, "frame height/width in pixels"),
    "world.shapes_per_video": Key(int, _w.shapes_per_video, "objects per video (>= 2)"),
    "world.expressions_per_object": Key(int, _w.expressions_per_object, "expressions per object"),
    "world.motion_vocabulary": Key(_list, _w.motion_vocabulary, f"comma list from {', '.join(MOTIONS)}"),
    "world.seed": Key(int, _w.seed, "generator seed"),
    # model
    "model.d_model": Key(int, _m.d_model, "hidden width"),
    "model.layers": Key(int, _m.layers, "transformer layers"),
    "model.heads": Key(int, _m.heads, "attention heads"),
    "model.resolution": Key(int, _m.resolution, "input resolution"),
    "model.patch": Key(int, _m.patch, "patch size; (resolution/patch)^2 must be 64"),
    "model.decoder_channels": Key(int, _m.decoder_channels, "mask decoder channels"),
    # losses
    "loss.lambda_ce": Key(float, _l.lambda_ce, "text cross-entropy weight"),
    "loss.lambda_bce": Key(float, _l.lambda_bce, "mask BCE weight"),
    "loss.lambda_dice": Key(float, _l.lambda_dice, "mask DICE weight"),
    "loss.lambda_ct": Key(float, _l.lambda_ct, "object contrastive weight"),
    "loss.tau": Key(float, _l.tau, "contrastive temperature"),
    # memory
    "memory.train_stride": Key(int, TRAIN_STRIDE, "memory stride while training"),
    "memory.infer_stride": Key(int, INFER_STRIDE, "memory stride at inference"),
    "memory.max_entries": Key(int, MAX_ENTRIES, "max memory entries read per frame"),
    # training
    "train.steps": Key(int, _t.steps, "optimizer steps"),
    "train.batch_size": Key(int, _t.batch_size, "samples per micro-batch"),
    "train.grad_accumulation": Key(int, _t.grad_accumulation, "micro-batches per step"),
    "train.learning_rate": Key(float, _t.learning_rate, "peak learning rate"),
    "train.warmup_steps": Key(int, _t.warmup_steps, "linear warmup steps"),
    "train.beta1": Key(float, _t.betas[0], "Adam beta1"),
    "train.beta2": Key(float, _t.betas[1], "Adam beta2"),
    "train.weight_decay": Key(float, _t.weight_decay, "weight decay"),
    "train.global_only": Key(_bool, False, "baseline: N spread-out query frames, no context/memory"),
    "train.local_only": Key(_bool, False, "baseline: N consecutive query frames, no context"),
    "train.use_memory": Key(_bool, _t.use_memory, "end-to-end memory bank"),
    "train.use_contrastive": Key(_bool, _t.use_contrastive, "object contrastive loss"),
    "train.num_context": Key(int, _t.num_context, "context frames N_C"),
    "train.num_query": Key(int, _t.num_query, "query frames N_Q"),
    "train.pair_fraction": Key(float, _t.pair_fraction, "probability a batch group holds a same-object pair"),
    "train.token_bank_capacity": Key(int, _t.token_bank_capacity, "contrastive token bank size"),
    "train.ct_reduction": Key(str, _t.ct_reduction, "'sum' or 'mean' over positive pairs"),
    "train.reverse_prob": Key(float, _t.reverse_prob, "probability of reversing a training query run"),
    "train.checkpoint_every": Key(int, _t.checkpoint_every, "checkpoint interval (0: early-stop + final only)"),
    "train.early_stop_fraction": Key(float, _t.early_stop_fraction, "early checkpoint used for pseudo-labels"),
    "train.seed": Key(int, _t.seed, "training seed"),
    "data.source_weights": Key(_weights, _t.source_weights, "per-source sampling weights, e.g. synthetic:1"),
    # inference
    "infer.use_selector": Key(_bool, False, "key-frame selection + bidirectional propagation"),
    "infer.batch_size": Key(int, InferOptions().batch_size, "samples per inference batch"),
    # selector
    "selector.d_model": Key(int, _s.d_model, "selector width"),
    "selector.layers": Key(int, _s.layers, "selector layers"),
    "selector.heads": Key(int, _s.heads, "selector heads"),
    "selector.mlp_layers": Key(int, _s.mlp_layers, "score head depth"),
    "selector.num_context": Key(int, _s.num_context, "selector context frames"),
    "selector.steps": Key(int, _s.steps, "selector steps"),
    "selector.batch_size": Key(int, _s.batch_size, "selector batch size"),
    "selector.learning_rate": Key(float, _s.learning_rate, "selector learning rate"),
    "selector.warmup_steps": Key(int, _s.warmup_steps, "selector warmup steps"),
    "selector.lambda_s": Key(float, _s.lambda_s, "score L1 weight"),
    "selector.seed": Key(int, _s.seed, "selector seed"),
    "selector.fraction": Key(float, 0.5, "fraction of training videos pseudo-labelled"),
    # ablation
    "ablate.seeds": Key(_ints, (0, 1, 2), "training seeds per row"),
    "ablate.valid_fraction": Key(float, 0.2, "fraction of videos held out for validation"),
    "ablate.strides": Key(_ints, (1, 3, 5, 7, 9), "memory strides for the stride sweep"),
    "ablate.curve_snapshots": Key(int, 5, "evaluation snapshots along training for the curve"),
}

VERB_KEYS: dict[str, tuple[str, ...]] = {
    "generate": ("world.",),
    "train": ("model.", "loss.", "memory.train_stride", "memory.max_entries", "train.", "data."),
    "infer": ("memory.infer_stride", "memory.max_entries", "infer."),
    "eval": (),
    "annotate": ("memory.", "infer.batch_size", "selector.fraction"),
    "train-selector": ("selector.",),
    "ablate": tuple(KEYS),
}


def keys_for(verb: str) -> list[str]:
    prefixes = VERB_KEYS[verb]
    return [k for k in KEYS if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)]


class Config(dict):
    """Parsed settings; missing keys fall back to defaults."""

    def __missing__(self, key: str):
        if key not in KEYS:
            raise KeyError(f"unknown config key {key!r}")
        return KEYS[key].default


def _set(cfg: Config, key: str, raw: str, where: str) -> None:
    if key not in KEYS:
        raise ConfigParseError(f"{where}: unknown config key {key!r}")
    try:
        cfg[key] = KEYS[key].parse(raw.strip())
    except ValueError as exc:
        raise ConfigParseError(f"{where}: bad value for {key}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigParseError(f"{source}:{lineno}: expected 'key = value'")
        _set(cfg, key.strip(), value, f"{source}:{lineno}")
    return cfg


def load(path: str | Path | None, overrides: list[str] = ()) -> Config:
    cfg = parse_text(Path(path).read_text(), str(path)) if path else Config()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigParseError(f"override {item!r}: expected key=value")
        _set(cfg, key.strip(), value, f"override {item!r}")
    return cfg


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, tuple):
        return ", ".join(f"{x[0]}:{x[1]}" if isinstance(x, tuple) else str(x) for x in v)
    return str(v)


def dump(cfg: Config) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in KEYS)


# ---------------------------------------------------------------------------
# builders


def world_config(cfg: Config, **kw) -> WorldConfig:
    return WorldConfig(
        num_videos=cfg["world.num_videos"],
        frames_per_video=cfg["world.frames_per_video"],
        canvas_size=cfg["world.canvas_size"],
        shapes_per_video=cfg["world.shapes_per_video"],
        expressions_per_object=cfg["world.expressions_per_object"],
        motion_vocabulary=tuple(cfg["world.motion_vocabulary"]),
        seed=cfg["world.seed"],
        **kw,
    )


def model_config(cfg: Config) -> ModelConfig:
    return ModelConfig(
        d_model=cfg["model.d_model"],
        layers=cfg["model.layers"],
        heads=cfg["model.heads"],
        resolution=cfg["model.resolution"],
        patch=cfg["model.patch"],
        decoder_channels=cfg["model.decoder_channels"],
    )


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(
        lambda_ce=cfg["loss.lambda_ce"],
        lambda_bce=cfg["loss.lambda_bce"],
        lambda_dice=cfg["loss.lambda_dice"],
        lambda_ct=cfg["loss.lambda_ct"],
        tau=cfg["loss.tau"],
    )


def train_config(cfg: Config, **kw) -> TrainConfig:
    fields = dict(
        steps=cfg["train.steps"],
        batch_size=cfg["train.batch_size"],
        grad_accumulation=cfg["train.grad_accumulation"],
        learning_rate=cfg["train.learning_rate"],
        warmup_steps=cfg["train.warmup_steps"],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        weight_decay=cfg["train.weight_decay"],
        global_only=cfg["train.global_only"],
        local_only=cfg["train.local_only"],
        use_memory=cfg["train.use_memory"],
        use_contrastive=cfg["train.use_contrastive"],
        num_context=cfg["train.num_context"],
        num_query=cfg["train.num_query"],
        pair_fraction=cfg["train.pair_fraction"],
        source_weights=tuple(cfg["data.source_weights"]),
        token_bank_capacity=cfg["train.token_bank_capacity"],
        ct_reduction=cfg["train.ct_reduction"],
        reverse_prob=cfg["train.reverse_prob"],
        checkpoint_every=cfg["train.checkpoint_every"],
        early_stop_fraction=cfg["train.early_stop_fraction"],
        seed=cfg["train.seed"],
        train_stride=cfg["memory.train_stride"],
        max_entries=cfg["memory.max_entries"],
    )
    fields.update(kw)
    return TrainConfig(**fields)


def infer_options(cfg: Config, **kw) -> InferOptions:
    fields = dict(stride=cfg["memory.infer_stride"], max_entries=cfg["memory.max_entries"], batch_size=cfg["infer.batch_size"])
    fields.update(kw)
    return InferOptions(**fields)


def selector_config(cfg: Config, **kw) -> SelectorConfig:
    fields = dict(
        d_model=cfg["selector.d_model"],
        layers=cfg["selector.layers"],
        heads=cfg["selector.heads"],
        mlp_layers=cfg["selector.mlp_layers"],
        num_context=cfg["selector.num_context"],
        steps=cfg["selector.steps"],
        batch_size=cfg["selector.batch_size"],
        learning_rate=cfg["selector.learning_rate"],
        warmup_steps=cfg["selector.warmup_steps"],
        lambda_s=cfg["selector.lambda_s"],
        seed=cfg["selector.seed"],
        resolution=cfg["model.resolution"],
        patch=cfg["model.patch"],
    )
    fields.update(kw)
    return SelectorConfig(**fields)
