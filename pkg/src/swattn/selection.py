"""Visible-block set construction and the fused two-pass shared-score path.

Each query token i (0-based, living in block b_i = i // B) attends to the
union of three block sets per KV group:

  initial   the first N_init blocks, always
  local     the N_local blocks ending at b_i (clamped at block 0), always
  top-k     the k_top highest block scores among candidates that are
            neither initial nor local and lie strictly before the local
            span; ties break toward the lower block index

The shared scores feeding top-k can be produced three ways: the direct
composition of the compression stages, a fused two-pass tile loop that
never materializes per-head scores globally (pass 1 computes the
log-sum-exp normalizer online, pass 2 normalizes and sums over the head
group tile by tile), and the same fused loop with pass 1 run against a
4x coarser pooled key set, trading an exact normalizer for a quarter of
the pass-1 work. The coarse normalizer rescales each row by a positive
constant, so with one head per group the induced block ranking is
unchanged; it is never used inside sparse attention itself, which runs
its own exact online softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    TENSOR_MAGIC,
    AttentionConfig,
    OpCounter,
    TensorFormatError,
    atomic_write_bytes,
)
from .compression import (
    CompressedKeys,
    ScoreMatrix,
    compressed_scores,
    head_group_sum,
    max_pool_scores,
    mean_pool_keys,
    visible_column_counts,
)

SELECTION_TAG = 0xB5


@dataclass(frozen=True)
class BlockSelection:
    """Per-(KV group, query token) sorted visible block indices.

    blocks[g][i] is a strictly increasing int64 array with every index
    j <= i // block_size. counts[g, i] records the (initial, local,
    top-k) set sizes that went into the union; selections loaded from a
    fixture carry counts=None.
    """

    block_size: int
    n: int
    blocks: tuple
    counts: np.ndarray | None = None

    @property
    def num_groups(self) -> int:
        return len(self.blocks)

    def query_blocks(self, g: int, i: int) -> np.ndarray:
        return self.blocks[g][i]

    def visible_spans(self, g: int, i: int):
        """Token spans [start, end) visible to query i, causally clipped,
        with adjacent blocks merged into single runs."""
        B = self.block_size
        spans = []
        for j in self.blocks[g][i]:
            start = int(j) * B
            end = min(start + B, self.n, i + 1)
            if end <= start:
                continue
            if spans and spans[-1][1] == start:
                spans[-1] = (spans[-1][0], end)
            else:
                spans.append((start, end))
        return spans

    def visible_token_count(self, g: int, i: int) -> int:
        return sum(end - start for start, end in self.visible_spans(g, i))


def build_block_sets(s_cmp: ScoreMatrix, cfg: AttentionConfig) -> BlockSelection:
    """Construct the visible block sets from max-pooled block scores.

    Score columns may cover fewer than ceil(n/B) blocks (a trailing block
    with no complete pooling window); missing columns are simply absent
    from the top-k candidate pool. Rows flagged as having no visible
    pooled entries select initial + local blocks only.
    """
    n, planes, n_cols = s_cmp.scores.shape
    if planes != cfg.h_kv:
        raise ValueError(f"score planes {planes} != h_kv {cfg.h_kv}")
    B = cfg.B
    nb = -(-n // B)
    if n_cols > nb:
        raise ValueError(f"{n_cols} score columns for only {nb} selection blocks")

    groups = []
    counts = np.zeros((planes, n, 3), dtype=np.int64)
    for g in range(planes):
        rows_out = [None] * n
        for b in range(nb):
            r0, r1 = b * B, min((b + 1) * B, n)
            n_init = min(cfg.N_init, b + 1)
            lo = max(0, b - cfg.N_local + 1)
            base = np.unique(
                np.concatenate([np.arange(n_init), np.arange(lo, b + 1)])
            ).astype(np.int64)
            cand = np.arange(cfg.N_init, min(lo, n_cols), dtype=np.int64)
            chosen = None
            if cand.size and cfg.k_top > 0:
                sub = s_cmp.scores[r0:r1, g][:, cand]
                k = min(cfg.k_top, cand.size)
                order = np.argsort(-sub, axis=1, kind="stable")[:, :k]
                chosen = cand[order]
            for idx in range(r1 - r0):
                i = r0 + idx
                if chosen is not None and not s_cmp.no_visible[i]:
                    top = chosen[idx]
                else:
                    top = np.empty(0, dtype=np.int64)
                rows_out[i] = np.unique(np.concatenate([base, top]))
                counts[g, i] = (n_init, b + 1 - lo, top.size)
        groups.append(tuple(rows_out))
    return BlockSelection(B, n, tuple(groups), counts)


def window_coverage_check(sel: BlockSelection, w: int) -> bool:
    """True iff every token in {max(0, i-w+1) .. i} lies inside a selected
    block of every group's I(i)."""
    if w < 1:
        raise ValueError(f"window size must be >= 1, got w={w}")
    B = sel.block_size
    for g in range(sel.num_groups):
        for i in range(sel.n):
            first = max(0, i - w + 1) // B
            needed = np.arange(first, i // B + 1)
            if not np.isin(needed, sel.blocks[g][i], assume_unique=True).all():
                return False
    return True


def _new_stats() -> dict:
    return {
        "pass1_mac": 0,
        "pass1_exp": 0,
        "pass2_mac": 0,
        "pass2_exp": 0,
        "peak_tile_elems": 0,
        "fallback_rows": 0,
    }


def _group_lse(Qg, Kg, span_end, scale, B_q, B_k, acc):
    """Pass 1 for one KV group: online log-sum-exp of scaled logits over
    causally visible pooled columns. Qg (n, G, d_h), Kg (m, d_h), both
    float64. Returns (n, G); rows with nothing visible come back -inf."""
    n, G, d_h = Qg.shape
    m = Kg.shape[0]
    lse = np.full((n, G), -np.inf)
    for q0 in range(0, n, B_q):
        q1 = min(q0 + B_q, n)
        rows = np.arange(q0, q1)
        m_run = np.full((q1 - q0, G), -np.inf)
        l_run = np.zeros((q1 - q0, G))
        for k0 in range(0, m, B_k):
            if span_end[k0] > q1 - 1:
                break
            k1 = min(k0 + B_k, m)
            S = (Qg[q0:q1].reshape(-1, d_h) @ Kg[k0:k1].T).reshape(q1 - q0, G, k1 - k0)
            S *= scale
            vis = span_end[k0:k1][None, :] <= rows[:, None]
            n_vis = int(vis.sum())
            if n_vis < vis.size:
                S = np.where(vis[:, None, :], S, -np.inf)
            acc["pass1_mac"] += n_vis * G * d_h
            acc["pass1_exp"] += n_vis * G
            acc["peak_tile_elems"] = max(acc["peak_tile_elems"], S.size)
            m_new = np.maximum(m_run, S.max(axis=2))
            m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
            l_run = np.exp(m_run - m_safe) * l_run + np.exp(S - m_safe[..., None]).sum(axis=2)
            m_run = m_new
        with np.errstate(divide="ignore"):
            lse[q0:q1] = m_run + np.log(l_run)
    return lse


def _pass2_shared(Qg, Kg, span_end, scale, lse_g, B_q, B_k, out_plane, acc):
    """Pass 2 for one KV group: exp(scaled logits - lse), summed over the
    head group, written tile by tile into out_plane (n, m)."""
    n, G, d_h = Qg.shape
    m = Kg.shape[0]
    lse_safe = np.where(np.isneginf(lse_g), 0.0, lse_g)
    for q0 in range(0, n, B_q):
        q1 = min(q0 + B_q, n)
        rows = np.arange(q0, q1)
        for k0 in range(0, m, B_k):
            if span_end[k0] > q1 - 1:
                break
            k1 = min(k0 + B_k, m)
            S = (Qg[q0:q1].reshape(-1, d_h) @ Kg[k0:k1].T).reshape(q1 - q0, G, k1 - k0)
            S *= scale
            vis = span_end[k0:k1][None, :] <= rows[:, None]
            n_vis = int(vis.sum())
            if n_vis < vis.size:
                S = np.where(vis[:, None, :], S, -np.inf)
            acc["pass2_mac"] += n_vis * G * d_h
            acc["pass2_exp"] += n_vis * G
            acc["peak_tile_elems"] = max(acc["peak_tile_elems"], S.size)
            P = np.exp(S - lse_safe[q0:q1][:, :, None])
            out_plane[q0:q1, k0:k1] = P.sum(axis=1)


def _check_fused_inputs(Q, ck, cfg, B_q, B_k):
    if Q.ndim != 3:
        raise ValueError(f"Q must be rank-3, got {Q.shape}")
    n, h_q, d_h = Q.shape
    if (h_q, d_h) != (cfg.h_q, cfg.d_h):
        raise ValueError(f"Q heads/dim {(h_q, d_h)} do not match config")
    if ck.m and ck.keys.shape[1:] != (cfg.h_kv, cfg.d_h):
        raise ValueError(f"pooled keys shape {ck.keys.shape} does not match config")
    if B_q < 1 or B_k < 1:
        raise ValueError(f"tile sizes must be >= 1, got B_q={B_q}, B_k={B_k}")
    return n


def fused_shared_scores_exact(
    Q,
    ck1: CompressedKeys,
    cfg: AttentionConfig,
    B_q: int = 64,
    B_k: int = 64,
    counter: OpCounter | None = None,
    stats: dict | None = None,
) -> ScoreMatrix:
    """Two-pass fused shared scores with the exact normalizer.

    Pass 1 streams the log-sum-exp over the stage-1 pooled columns, pass 2
    recomputes each logit tile, normalizes with that lse, and sums over
    the head group before anything leaves the tile. Per-head score data
    only ever exists as one (B_q, G, B_k) tile per group. Matches the
    direct composition of the compression stages to float64 roundoff.
    """
    n = _check_fused_inputs(Q, ck1, cfg, B_q, B_k)
    G, h_kv = cfg.group_size, cfg.h_kv
    scale = cfg.logit_scale() if cfg.scale_compressed_logits else 1.0
    m = ck1.m
    no_visible = visible_column_counts(ck1.span_end, n) == 0
    shared = np.zeros((n, h_kv, m), dtype=np.float64)
    acc = _new_stats()
    if m:
        Q64 = Q.astype(np.float64, copy=False)
        K64 = ck1.keys.astype(np.float64, copy=False)
        for g in range(h_kv):
            Qg = Q64[:, g * G : (g + 1) * G]
            lse_g = _group_lse(Qg, K64[:, g], ck1.span_end, scale, B_q, B_k, acc)
            _pass2_shared(
                Qg, K64[:, g], ck1.span_end, scale, lse_g, B_q, B_k, shared[:, g], acc
            )
    if counter is not None:
        counter.add(mac=acc["pass1_mac"] + acc["pass2_mac"],
                    exp=acc["pass1_exp"] + acc["pass2_exp"])
    if stats is not None:
        stats.update(acc)
    return ScoreMatrix(shared, "shared", no_visible)


def fused_shared_scores_approx(
    Q,
    ck1: CompressedKeys,
    ck2: CompressedKeys,
    cfg: AttentionConfig,
    B_q: int = 64,
    B_k: int = 64,
    counter: OpCounter | None = None,
    stats: dict | None = None,
) -> ScoreMatrix:
    """Fused shared scores with the coarse pass-1 normalizer.

    Pass 1 runs against the coarser pooled keys, shrinking its column
    count (4x with the default pooling profile); pass 2 normalizes the
    fine-grained logits with that lse. Output rows are exp(logits - lse)
    summed over the head group and are NOT normalized to sum to G. Rows
    whose coarse column set is empty while fine columns exist fall back
    to the exact normalizer; the fallback row count lands in
    stats["fallback_rows"] and their pass-1 work is tallied.
    """
    n = _check_fused_inputs(Q, ck1, cfg, B_q, B_k)
    G, h_kv = cfg.group_size, cfg.h_kv
    scale = cfg.logit_scale() if cfg.scale_compressed_logits else 1.0
    m = ck1.m
    vis1 = visible_column_counts(ck1.span_end, n)
    vis2 = visible_column_counts(ck2.span_end, n) if ck2.m else np.zeros(n, dtype=np.int64)
    no_visible = vis1 == 0
    fallback = (vis2 == 0) & (vis1 > 0)
    shared = np.zeros((n, h_kv, m), dtype=np.float64)
    acc = _new_stats()
    acc["fallback_rows"] = int(fallback.sum())
    if m:
        Q64 = Q.astype(np.float64, copy=False)
        K1 = ck1.keys.astype(np.float64, copy=False)
        K2 = ck2.keys.astype(np.float64, copy=False) if ck2.m else None
        fb_rows = np.flatnonzero(fallback)
        for g in range(h_kv):
            Qg = Q64[:, g * G : (g + 1) * G]
            if K2 is not None:
                lse_g = _group_lse(Qg, K2[:, g], ck2.span_end, scale, B_q, B_k, acc)
            else:
                lse_g = np.full((n, G), -np.inf)
            if fb_rows.size:
                lse_g[fb_rows] = _exact_lse_rows(
                    Qg, K1[:, g], ck1.span_end, scale, fb_rows, acc
                )
            _pass2_shared(
                Qg, K1[:, g], ck1.span_end, scale, lse_g, B_q, B_k, shared[:, g], acc
            )
    if counter is not None:
        counter.add(mac=acc["pass1_mac"] + acc["pass2_mac"],
                    exp=acc["pass1_exp"] + acc["pass2_exp"])
    if stats is not None:
        stats.update(acc)
    return ScoreMatrix(shared, "shared-approx", no_visible)


def _exact_lse_rows(Qg, Kg, span_end, scale, rows, acc):
    """Exact lse over fine pooled columns for a handful of fallback rows."""
    G, d_h = Qg.shape[1], Qg.shape[2]
    S = np.einsum("rgd,md->rgm", Qg[rows], Kg) * scale
    vis = span_end[None, :] <= rows[:, None]
    S = np.where(vis[:, None, :], S, -np.inf)
    n_vis = int(vis.sum())
    acc["pass1_mac"] += n_vis * G * d_h
    acc["pass1_exp"] += n_vis * G
    m_row = S.max(axis=2)
    m_safe = np.where(np.isneginf(m_row), 0.0, m_row)
    with np.errstate(divide="ignore"):
        return m_safe + np.log(np.exp(S - m_safe[..., None]).sum(axis=2))


SELECT_MODES = ("exact", "fused-exact", "approx")


def select_blocks(
    Q,
    K,
    cfg: AttentionConfig,
    mode: str = "exact",
    B_q: int = 64,
    B_k: int = 64,
    counter: OpCounter | None = None,
    stats: dict | None = None,
) -> BlockSelection:
    """End-to-end pipeline: pool keys, score, max-pool, build block sets.

    mode picks the shared-score path: "exact" composes the compression
    stages directly, "fused-exact" uses the two-pass tile loop (identical
    selections to "exact"), "approx" additionally swaps in the coarse
    pass-1 normalizer.
    """
    if mode not in SELECT_MODES:
        raise ValueError(f"unknown selection mode {mode!r}; expected one of {SELECT_MODES}")
    ck1 = mean_pool_keys(K, cfg.l_C1, cfg.s_C1)
    if mode == "exact":
        per_head = compressed_scores(Q, ck1, cfg, counter=counter)
        shared = head_group_sum(per_head, cfg.group_size)
    elif mode == "fused-exact":
        shared = fused_shared_scores_exact(Q, ck1, cfg, B_q, B_k, counter, stats)
    else:
        ck2 = mean_pool_keys(K, cfg.l_C2, cfg.s_C2)
        shared = fused_shared_scores_approx(Q, ck1, ck2, cfg, B_q, B_k, counter, stats)
    cmp_scores = max_pool_scores(shared, cfg.l, cfg.s)
    return build_block_sets(cmp_scores, cfg)


def save_selection(sel: BlockSelection, path) -> None:
    """Serialize a selection: core magic, selection tag byte, u32 group
    count / sequence length / block size, then per (group, row) a u32
    index count followed by that many u32 block indices. Little-endian."""
    parts = [
        TENSOR_MAGIC,
        struct.pack("<B", SELECTION_TAG),
        struct.pack("<III", sel.num_groups, sel.n, sel.block_size),
    ]
    for g in range(sel.num_groups):
        for i in range(sel.n):
            arr = sel.blocks[g][i]
            parts.append(struct.pack("<I", arr.size))
            parts.append(arr.astype("<u4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_selection(path) -> BlockSelection:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(TENSOR_MAGIC)
    if len(blob) < head + 13 or blob[:head] != TENSOR_MAGIC:
        raise TensorFormatError(f"malformed header: bad magic in {path}")
    (tag,) = struct.unpack_from("<B", blob, head)
    if tag != SELECTION_TAG:
        raise TensorFormatError(f"not a selection fixture: tag {tag}")
    groups, n, block_size = struct.unpack_from("<III", blob, head + 1)
    off = head + 13
    out = []
    for _ in range(groups):
        rows = []
        for _ in range(n):
            if len(blob) < off + 4:
                raise TensorFormatError("truncated payload: row count missing")
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            if len(blob) < off + 4 * count:
                raise TensorFormatError("truncated payload: row indices missing")
            arr = np.frombuffer(blob, dtype="<u4", count=count, offset=off)
            off += 4 * count
            rows.append(arr.astype(np.int64))
        out.append(tuple(rows))
    if off != len(blob):
        raise TensorFormatError("oversized payload: trailing bytes")
    return BlockSelection(block_size, n, tuple(out), counts=None)
