"""Miniature global-local segmenter.

Frames become 64 tokens each.  A causal transformer reads
``[R, F^C_1..F^C_Nc, F^Q_1, <seg>, ..., F^Q_Nq, <seg>]`` and the hidden state of
each ``<seg>`` (penultimate layer) prompts a small mask decoder, optionally
after the query frame's tokens have attended to the memory bank.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import language
from .memory import MemoryAttention, MemoryEncoder


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    resolution: int = 64
    patch: int = 8
    vocab_size: int = len(language.VOCAB)
    max_text_len: int = 32
    decoder_channels: int = 16

    def __post_init__(self) -> None:
        if self.resolution % self.patch or (self.resolution // self.patch) ** 2 != 64:
            raise ValueError("(resolution / patch)^2 must be 64")
        if self.layers < 2:
            raise ValueError("need >= 2 layers: <seg> hidden states come from the penultimate layer")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


def _sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([ang.sin(), ang.cos()], -1).to(torch.get_default_dtype())


class FrameEncoder(nn.Module):
    """Patchify, embed, and project one frame to 64 tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = nn.Sequential(
            nn.Conv2d(3, cfg.d_model, cfg.patch, stride=cfg.patch),
            nn.GELU(),
            nn.Conv2d(cfg.d_model, cfg.d_model, 1),
        )
        self.project = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (..., H, W, 3) in [0, 1] -> (..., 64, d)
        r = self.cfg.resolution
        if images.shape[-3:] != (r, r, 3):
            raise ValueError(f"expected frames of shape ({r}, {r}, 3), got {tuple(images.shape[-3:])}")
        lead = images.shape[:-3]
        x = images.reshape(-1, r, r, 3).permute(0, 3, 1, 2)
        x = self.backbone(x).flatten(2).transpose(1, 2)
        return self.project(x).reshape(*lead, self.cfg.grid**2, self.cfg.d_model)


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, n, d = x.shape
        q, k, v = self.qkv(x).view(B, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.out(y.transpose(1, 2).reshape(B, n, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


# segment-type ids for the sequence embedding
TEXT, CONTEXT, QUERY, SPECIAL = 0, 1, 2, 3


class SequenceModel(nn.Module):
    """Causal transformer over text, frame tokens and special tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok = nn.Embedding(cfg.vocab_size, d)
        self.text_pos = nn.Embedding(cfg.max_text_len, d)
        self.spatial_pos = nn.Parameter(torch.randn(cfg.grid**2, d) * 0.02)
        self.kind = nn.Embedding(4, d)
        self.summary = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)

    def frame_embed(self, feats: torch.Tensor, frame_ids: torch.Tensor, kind: int) -> torch.Tensor:
        # feats (B, n, 64, d), frame_ids (B, n)
        t = _sinusoid(frame_ids, self.cfg.d_model).to(feats.device)
        return feats + self.spatial_pos + t.unsqueeze(2) + self.kind.weight[kind]

    def assemble(
        self,
        text: torch.Tensor,
        context: torch.Tensor,
        context_ids: torch.Tensor,
        query: torch.Tensor,
        query_ids: torch.Tensor,
        trailer: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Build ``[R, ctx frames, (query frame, trailer token)*]``; return embeddings and trailer positions."""
        B, L = text.shape
        if L > self.cfg.max_text_len:
            raise ValueError(f"text length {L} exceeds max_text_len {self.cfg.max_text_len}")
        d = self.cfg.d_model
        parts = [self.tok(text) + self.text_pos.weight[:L] + self.kind.weight[TEXT]]
        if context.shape[1]:
            parts.append(self.frame_embed(context, context_ids, CONTEXT).reshape(B, -1, d))
        n_q = query.shape[1]
        q = self.frame_embed(query, query_ids, QUERY)
        # trailer tokens also carry a pooled summary of the expression so the
        # small untrained sequence model need not find ~10 text keys among
        # hundreds of frame tokens before the mask loss can use the prompt
        keep = (text != language.PAD_ID).unsqueeze(-1).to(parts[0].dtype)
        summary = (self.tok(text) * keep).sum(1) / keep.sum(1).clamp(min=1)
        special = (self.tok.weight[trailer] + self.kind.weight[SPECIAL] + self.summary(summary)).unsqueeze(1).unsqueeze(1).expand(B, n_q, 1, d)
        parts.append(torch.cat([q, special], 2).reshape(B, -1, d))
        x = torch.cat(parts, 1)
        start = L + context.shape[1] * context.shape[2]
        step = query.shape[2] + 1
        positions = torch.arange(n_q) * step + start + step - 1
        return x, positions

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hiddens = []
        for blk in self.blocks:
            x = blk(x)
            hiddens.append(x)
        logits = self.head(self.ln_f(x))
        return logits, hiddens[-2]


class MaskDecoder(nn.Module):
    """Prompt-conditioned decoder: two-way cross-attention, then 8x learned upsampling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, c = cfg.d_model, cfg.decoder_channels
        self.cfg = cfg
        self.pos = nn.Parameter(torch.randn(cfg.grid**2, d) * 0.02)
        self.prompt_attn = nn.ModuleList(nn.MultiheadAttention(d, cfg.heads, batch_first=True) for _ in range(2))
        self.prompt_norm = nn.ModuleList(nn.LayerNorm(d) for _ in range(2))
        self.token_norm = nn.ModuleList(nn.LayerNorm(d) for _ in range(2))
        self.token_mlp = nn.ModuleList(
            nn.Sequential(nn.Linear(2 * d, 2 * d), nn.GELU(), nn.Linear(2 * d, d)) for _ in range(2)
        )
        self.upsample = nn.Linear(d, c * cfg.patch * cfg.patch)
        self.hires = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.GELU(), nn.Conv2d(c, c, 3, padding=1))
        self.head = nn.Sequential(nn.GELU(), nn.Conv2d(c, c, 3, padding=1), nn.GELU())
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, c + 1))

    def forward(self, tokens: torch.Tensor, prompt: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        # tokens (B, 64, d), prompt (B, d), image (B, H, W, 3) -> logits (B, H, W)
        B, n, d = tokens.shape
        g, p, c = self.cfg.grid, self.cfg.patch, self.cfg.decoder_channels
        x = tokens + self.pos
        h = prompt.unsqueeze(1)
        for k in range(2):
            h = h + self.prompt_attn[k](self.prompt_norm[k](h), self.token_norm[k](x), x, need_weights=False)[0]
            x = x + self.token_mlp[k](torch.cat([self.token_norm[k](x), h.expand(B, n, d)], -1))
        up = self.upsample(x).transpose(1, 2).reshape(B, c * p * p, g, g)
        up = F.pixel_shuffle(up, p)
        feat = self.head(up + self.hires(image.permute(0, 3, 1, 2)))
        w = self.hyper(h.squeeze(1))
        return torch.einsum("bchw,bc->bhw", feat, w[:, :c]) + w[:, c, None, None]


@dataclass
class SequenceOutput:
    text_logits: torch.Tensor  # (B, n, V)
    seg: torch.Tensor  # (B, N_Q, d) penultimate-layer hidden at each <seg>
    seg_positions: torch.Tensor


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        self.llm = SequenceModel(cfg)
        d = cfg.d_model
        # language-to-vision projection of the <seg> hidden state
        self.seg_proj = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.decoder = MaskDecoder(cfg)
        self.memory_encoder = MemoryEncoder(d, cfg.grid, cfg.patch)
        self.memory_attention = MemoryAttention(d, cfg.heads)

    def encode_frame(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def forward_sequence(
        self,
        text: torch.Tensor,
        context: torch.Tensor,
        context_ids: torch.Tensor,
        query: torch.Tensor,
        query_ids: torch.Tensor,
    ) -> SequenceOutput:
        if context.shape[:2] != context_ids.shape or query.shape[:2] != query_ids.shape:
            raise ValueError("frame features and frame ids disagree in arity")
        if query.shape[1] < 1:
            raise ValueError("need at least one query frame")
        x, pos = self.llm.assemble(text, context, context_ids, query, query_ids, language.SEG_ID)
        logits, hidden = self.llm(x)
        return SequenceOutput(logits, hidden[:, pos], pos)

    def decode_mask(self, tokens: torch.Tensor, seg: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.decoder(tokens, self.seg_proj(seg), image)

    def encode_memory(self, mask_logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.memory_encoder(mask_logits, tokens)

    def memory_read(self, tokens: torch.Tensor, entries) -> torch.Tensor:
        return self.memory_attention(tokens, entries, self.decoder.pos)


def text_targets(seq: SequenceOutput, length: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Positions and token ids supervised by the text loss.

    The token before each ``<seg>`` must predict ``<seg>``; the last ``<seg>``
    predicts ``<eos>``.
    """
    pos = seq.seg_positions
    positions = torch.cat([pos - 1, pos[-1:]])
    targets = torch.tensor([language.SEG_ID] * len(pos) + [language.EOS_ID])
    return positions, targets
