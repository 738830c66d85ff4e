"""Memory bank: encode predicted masks, store them per video, read them back by attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

TRAIN_STRIDE = 1
INFER_STRIDE = 3
MAX_ENTRIES = 7


class MemoryOrderError(ValueError):
    pass


@dataclass
class MemoryEntry:
    feature: torch.Tensor  # (..., 64, d); leading dims batch lockstepped videos
    frame_index: int


@dataclass
class MemoryBank:
    """Entries for one (video, expression) run; never shared across samples."""

    entries: list[MemoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: MemoryEntry) -> None:
        if self.entries and entry.frame_index <= self.entries[-1].frame_index:
            raise MemoryOrderError(
                f"frame index {entry.frame_index} must exceed last stored index {self.entries[-1].frame_index}"
            )
        self.entries.append(entry)

    def select(self, t: int, stride: int, max_entries: int) -> list[MemoryEntry]:
        """Entries at ``t-1, t-1-stride, ...`` that are present, newest first, at most ``max_entries``."""
        if not self.entries:
            return []
        if t <= self.entries[-1].frame_index:
            raise MemoryOrderError(f"select at t={t} but bank holds frame {self.entries[-1].frame_index}")
        by_index = {e.frame_index: e for e in self.entries}
        out = []
        idx = t - 1
        while idx >= 0 and len(out) < max_entries:
            if idx in by_index:
                out.append(by_index[idx])
            idx -= stride
        # t-1 may not be stored (gaps); the newest entry is kept regardless.
        if max_entries > 0 and (not out or out[0] is not self.entries[-1]):
            out = [self.entries[-1]] + out[: max_entries - 1]
        return out


class MemoryEncoder(nn.Module):
    """Fuse mask probabilities (space-to-depth onto the token grid) with frame tokens."""

    def __init__(self, d_model: int, grid: int = 8, patch: int = 8):
        super().__init__()
        self.grid, self.patch = grid, patch
        self.fuse = nn.Sequential(
            nn.Conv2d(d_model + patch * patch, d_model, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(d_model, d_model, 1),
        )

    def forward(self, mask_logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        # mask_logits: (B, H, W); tokens: (B, 64, d)
        if mask_logits.shape[-2:] != (self.grid * self.patch, self.grid * self.patch):
            raise ValueError(f"mask shape {tuple(mask_logits.shape)} does not match the {self.grid}x{self.grid} token grid")
        if tokens.shape[-2] != self.grid * self.grid:
            raise ValueError(f"expected {self.grid * self.grid} tokens, got {tokens.shape[-2]}")
        B, _, d = tokens.shape
        probs = F.pixel_unshuffle(torch.sigmoid(mask_logits).unsqueeze(1), self.patch)
        grid = tokens.transpose(1, 2).reshape(B, d, self.grid, self.grid)
        out = self.fuse(torch.cat([grid, probs], 1))
        return out.flatten(2).transpose(1, 2)


class MemoryAttention(nn.Module):
    """Cross-attention from current frame tokens to selected memory tokens."""

    def __init__(self, d_model: int, heads: int, max_entries: int = 16):
        super().__init__()
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.recency = nn.Embedding(max_entries, d_model)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.GELU(), nn.Linear(2 * d_model, d_model))

    def forward(self, tokens: torch.Tensor, entries: list[MemoryEntry], pos: torch.Tensor | None = None) -> torch.Tensor:
        if not entries:
            return tokens
        mem = torch.cat(
            [e.feature + self.recency.weight[min(k, self.recency.num_embeddings - 1)] for k, e in enumerate(entries)],
            dim=-2,
        )
        q = self.norm_q(tokens)
        kv = self.norm_kv(mem)
        if pos is not None:
            q = q + pos
            kv = kv + pos.repeat(1, len(entries), 1)
        x = tokens + self.attn(q, kv, self.norm_kv(mem), need_weights=False)[0]
        return x + self.ff(self.norm_ff(x))
