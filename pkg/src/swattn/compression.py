"""Parameter-free block representation: mean-pooled key summaries,
causal softmax scores against them, head-group summation, and max-pooled
per-block scores.

The three stages turn per-token keys into one importance score per
(query token, KV group, selection block):

  1. mean-pool K over sliding windows -> compressed keys
  2. softmax(Q . pooled_keys^T) per head, causally masked, then summed
     over each head group -> shared scores
  3. max-pool shared-score columns at block granularity -> block scores

A pooled entry is visible to query i only when its entire window lies in
the past (span_end <= i); entries that straddle the future are masked to
exactly zero. Queries with no visible entry get an all-zero row and are
flagged so selection can fall back to initial + local blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import AttentionConfig, OpCounter


@dataclass(frozen=True)
class CompressedKeys:
    """Mean-pooled key summaries.

    keys       (m, h_kv, d_h) in storage precision, one entry per complete
               pooling window
    span_end   (m,) inclusive token index of the last pooled token,
               used for causal masking
    """

    keys: np.ndarray
    pool_length: int
    pool_stride: int
    span_end: np.ndarray

    @property
    def m(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class ScoreMatrix:
    """Scores with rows = query tokens and columns = pooled entries or blocks.

    kind is one of "C1", "C2" (per-head planes), "shared",
    "shared-approx", "cmp" (per-KV-group planes). scores is float64
    (n, planes, cols); masked columns hold exactly 0. no_visible flags
    rows with zero causally visible columns.
    """

    scores: np.ndarray
    kind: str
    no_visible: np.ndarray


def mean_pool_keys(K, length: int, stride: int) -> CompressedKeys:
    """Mean-pool keys over sliding windows [i*stride, i*stride + length).

    Only complete windows are emitted: m = floor((n - length)/stride) + 1,
    or an empty result when n < length (callers must handle m = 0).
    Means are computed in float64 and cast back to the storage dtype.
    """
    if K.ndim != 3:
        raise ValueError(f"K must be rank-3 (tokens, heads, d_h); got {K.shape}")
    if stride < 1 or length < stride:
        raise ValueError(f"need length >= stride >= 1, got length={length}, stride={stride}")
    n = K.shape[0]
    if n < length:
        empty = np.empty((0,) + K.shape[1:], dtype=K.dtype)
        return CompressedKeys(empty, length, stride, np.empty(0, dtype=np.int64))
    K64 = K.astype(np.float64, copy=False)
    windows = sliding_window_view(K64, length, axis=0)[::stride]  # (m, h_kv, d_h, length)
    pooled = windows.mean(axis=-1)
    m = pooled.shape[0]
    span_end = np.arange(m, dtype=np.int64) * stride + (length - 1)
    return CompressedKeys(
        np.ascontiguousarray(pooled.astype(K.dtype)), length, stride, span_end
    )


def visible_column_counts(span_end: np.ndarray, n: int) -> np.ndarray:
    """Per query token, how many pooled entries end at or before it."""
    return np.searchsorted(span_end, np.arange(n), side="right")


def compressed_scores(
    Q,
    ck: CompressedKeys,
    cfg: AttentionConfig,
    causal: bool = True,
    kind: str = "C1",
    counter: OpCounter | None = None,
) -> ScoreMatrix:
    """Per-head softmax scores of queries against pooled keys.

    Logits are scaled by 1/sqrt(d_h) when cfg.scale_compressed_logits is
    set. Each visible row is a probability distribution; masked (future)
    columns are exactly 0.
    """
    if Q.ndim != 3:
        raise ValueError(f"Q must be rank-3, got {Q.shape}")
    n, h_q, d_h = Q.shape
    if (h_q, d_h) != (cfg.h_q, cfg.d_h):
        raise ValueError(f"Q heads/dim {(h_q, d_h)} do not match config")
    m = ck.m
    if m and ck.keys.shape[1:] != (cfg.h_kv, cfg.d_h):
        raise ValueError(f"pooled keys shape {ck.keys.shape} does not match config")
    G = cfg.group_size
    scale = cfg.logit_scale() if cfg.scale_compressed_logits else 1.0

    scores = np.zeros((n, h_q, m), dtype=np.float64)
    if causal:
        vis_counts = visible_column_counts(ck.span_end, n)
        no_visible = vis_counts == 0
    else:
        vis_counts = np.full(n, m, dtype=np.int64)
        no_visible = np.full(n, m == 0, dtype=bool)
    if m == 0:
        if counter is not None:
            counter.add()
        return ScoreMatrix(scores, kind, no_visible)

    Q64 = Q.astype(np.float64, copy=False)
    K64 = ck.keys.astype(np.float64, copy=False)
    future = ck.span_end[None, :] > np.arange(n)[:, None] if causal else None

    for h in range(h_q):
        logits = (Q64[:, h] @ K64[:, h // G].T) * scale
        if causal:
            logits[future] = -np.inf
        mrow = logits.max(axis=1)
        m_safe = np.where(np.isneginf(mrow), 0.0, mrow)
        z = np.exp(logits - m_safe[:, None])
        ell = z.sum(axis=1)
        scores[:, h] = z / np.where(ell == 0.0, 1.0, ell)[:, None]

    if counter is not None:
        vis_total = int(vis_counts.sum())
        counter.add(mac=vis_total * d_h * h_q, exp=vis_total * h_q)
    return ScoreMatrix(scores, kind, no_visible)


def head_group_sum(sm: ScoreMatrix, G: int) -> ScoreMatrix:
    """Sum per-head score planes within each group of G heads."""
    n, h_q, m = sm.scores.shape
    if G < 1 or h_q % G != 0:
        raise ValueError(f"head count {h_q} is not divisible by group size {G}")
    shared = sm.scores.reshape(n, h_q // G, G, m).sum(axis=2)
    return ScoreMatrix(shared, "shared", sm.no_visible)


def max_pool_scores(sm: ScoreMatrix, l: int, s: int) -> ScoreMatrix:
    """Max-pool score columns: block j = max over columns [j*s, j*s + l).

    Windows truncate at the matrix edge; the block count is ceil(m/s).
    An empty input yields an empty result.
    """
    if l < 1 or s < 1:
        raise ValueError(f"need l, s >= 1, got l={l}, s={s}")
    n, planes, m = sm.scores.shape
    n_blocks = -(-m // s) if m else 0
    pooled = np.empty((n, planes, n_blocks), dtype=np.float64)
    for j in range(n_blocks):
        pooled[:, :, j] = sm.scores[:, :, j * s : min(j * s + l, m)].max(axis=2)
    return ScoreMatrix(pooled, "cmp", sm.no_visible)
