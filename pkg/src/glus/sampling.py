"""Context/query frame index selection for training and inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FrameWindow:
    context_ids: tuple[int, ...]
    query_ids: tuple[int, ...]

    @property
    def all_ids(self) -> tuple[int, ...]:
        return self.context_ids + self.query_ids


def split_spans(T: int, n: int) -> list[tuple[int, int]]:
    """Partition ``[0, T)`` into ``n`` inclusive spans; leading spans take the remainder.

    When ``T < n`` the trailing spans repeat the last frame.
    """
    if n <= 0:
        return []
    base, extra = divmod(T, n)
    spans, start = [], 0
    for k in range(n):
        length = base + (1 if k < extra else 0)
        if length == 0:
            spans.append((T - 1, T - 1))
            continue
        spans.append((start, start + length - 1))
        start += length
    return spans


def _clamped_run(start: int, n: int, T: int) -> tuple[int, ...]:
    return tuple(min(start + k, T - 1) for k in range(n))


def sample_train_window(T: int, N_C: int, N_Q: int, rng: np.random.Generator) -> FrameWindow:
    context = tuple(int(rng.integers(a, b + 1)) for a, b in split_spans(T, N_C))
    start = int(rng.integers(0, max(T - N_Q, 0) + 1))
    return FrameWindow(context, _clamped_run(start, N_Q, T))


def sample_uniform_window(T: int, N: int, rng: np.random.Generator) -> FrameWindow:
    """All ``N`` frames spread over the video (global-only baseline)."""
    ids = tuple(int(rng.integers(a, b + 1)) for a, b in split_spans(T, N))
    return FrameWindow((), ids)


def inference_context(T: int, N_C: int) -> list[int]:
    return [a + (b - a) // 2 for a, b in split_spans(T, N_C)]


@dataclass(frozen=True)
class QueryWindow:
    ids: tuple[int, ...]
    emit: tuple[int, ...]  # positions within ``ids`` whose masks this window finalizes


def sliding_query_windows(T: int, N_Q: int) -> list[QueryWindow]:
    """Stride-1 windows; the first emits all of its frames, later ones only the newest."""
    first = tuple(range(min(N_Q, T)))
    windows = [QueryWindow(first, tuple(range(len(first))))]
    for last in range(len(first), T):
        ids = tuple(range(last - N_Q + 1, last + 1))
        windows.append(QueryWindow(ids, (N_Q - 1,)))
    return windows


def uniform_folds(T: int, N: int) -> list[QueryWindow]:
    """Global-only inference: interleaved folds of ``N`` spread-out frames each.

    Fold ``j`` holds frames ``j, j+k, j+2k, ...`` with ``k = ceil(T / N)``;
    short folds are padded by repeating their last frame, which is not emitted.
    """
    k = -(-T // N)
    folds = []
    for j in range(k):
        ids = list(range(j, T, k))
        if not ids:
            continue
        n_real = len(ids)
        ids += [ids[-1]] * (N - n_real)
        folds.append(QueryWindow(tuple(ids), tuple(range(n_real))))
    return folds
