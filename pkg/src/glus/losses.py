"""Training objectives: text CE, mask BCE + DICE, object contrastive with a token bank."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class NonFiniteLoss(FloatingPointError):
    def __init__(self, part: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss part {part!r}{where}")
        self.part, self.step = part, step


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    lambda_ct: float = 0.1
    tau: float = 0.07

    def __post_init__(self) -> None:
        for name in ("lambda_ce", "lambda_bce", "lambda_dice", "lambda_ct"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def text_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``logits`` (..., V) and ``targets`` (...) must agree in leading shape."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def _check(logits: torch.Tensor, gt: torch.Tensor) -> None:
    if logits.shape != gt.shape:
        raise ValueError(f"mask logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")


def mask_bce(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def dice_from_probs(p: torch.Tensor, g: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-mask DICE over the last two dims, averaged over leading dims."""
    p, g = p.flatten(-2), g.to(p.dtype).flatten(-2)
    d = 1 - (2 * (p * g).sum(-1) + eps) / (p.sum(-1) + g.sum(-1) + eps)
    return d.mean()


def mask_dice(logits: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    _check(logits, gt)
    return dice_from_probs(torch.sigmoid(logits), gt, eps)


class TokenBank:
    """FIFO ring of detached ``<seg>`` embeddings that supply extra negatives."""

    def __init__(self, capacity: int = 256):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.tokens: torch.Tensor | None = None
        self.object_ids: list[str] = []
        self.sample_ids: list[str] = []

    def __len__(self) -> int:
        return len(self.object_ids)

    def push(self, tokens: torch.Tensor, object_ids, sample_ids) -> None:
        if self.capacity == 0:
            return
        t = tokens.detach()
        self.tokens = t if self.tokens is None else torch.cat([self.tokens, t])
        self.object_ids += list(object_ids)
        self.sample_ids += list(sample_ids)
        extra = len(self.object_ids) - self.capacity
        if extra > 0:
            self.tokens = self.tokens[extra:]
            self.object_ids = self.object_ids[extra:]
            self.sample_ids = self.sample_ids[extra:]

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "tokens": self.tokens, "object_ids": self.object_ids, "sample_ids": self.sample_ids}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.tokens, self.object_ids, self.sample_ids = state["tokens"], list(state["object_ids"]), list(state["sample_ids"])


def object_contrastive(
    tokens: torch.Tensor,
    object_ids: list[str],
    sample_ids: list[str],
    bank: TokenBank | None = None,
    tau: float = 0.07,
    reduction: str = "sum",
    update_bank: bool = True,
) -> torch.Tensor:
    """InfoNCE over ``<seg>`` tokens: same object from a different sample is positive.

    Every (anchor, positive) pair contributes
    ``-log(e^{s+/tau} / (e^{s+/tau} + sum_neg e^{s-/tau}))`` where negatives are
    batch and bank tokens of other objects.  Returns 0 when no pair exists.
    Batch tokens are pushed into ``bank`` (detached) afterwards.
    """
    n = tokens.shape[0]
    z = F.normalize(tokens, dim=-1)
    keys, key_obj, key_smp = z, list(object_ids), list(sample_ids)
    if bank is not None and len(bank):
        keys = torch.cat([z, F.normalize(bank.tokens.to(z.dtype), dim=-1)])
        key_obj += bank.object_ids
        key_smp += bank.sample_ids
    sim = z @ keys.T / tau  # (n, n + bank)

    codes: dict[str, int] = {}
    obj_k = torch.tensor([codes.setdefault(o, len(codes)) for o in key_obj])
    smp_k = torch.tensor([codes.setdefault("\0" + s, len(codes)) for s in key_smp])
    same_obj = obj_k[:n, None] == obj_k[None, :]
    positive = same_obj & (smp_k[:n, None] != smp_k[None, :])
    positive[:, n:] = False  # bank tokens only act as negatives
    negative = ~same_obj

    if not positive.any():
        loss = tokens.sum() * 0.0
    else:
        neg_sum = torch.where(negative, sim, torch.full_like(sim, -math.inf)).logsumexp(-1, keepdim=True)
        # -log(e^p / (e^p + e^N)) = logaddexp(p, N) - p
        terms = torch.logaddexp(sim, neg_sum.expand_as(sim)) - sim
        terms = terms[positive]
        loss = terms.sum() if reduction == "sum" else terms.mean()
    if bank is not None and update_bank:
        bank.push(tokens, object_ids, sample_ids)
    return loss


LOSS_PARTS = ("ce", "bce", "dice", "ct")


def total_loss(parts: dict[str, torch.Tensor], weights: LossWeights, step: int | None = None) -> torch.Tensor:
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLoss(name, step)
    total = 0.0
    for name in LOSS_PARTS:
        if name in parts:
            total = total + getattr(weights, f"lambda_{name}") * parts[name]
    return total
