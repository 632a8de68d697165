"""Grouped-query dense attention.

Two forward paths with identical semantics: a direct quadratic reference
that materializes the full score matrix, and a tiled streaming
implementation that keeps only one (B_q, B_k) score tile alive per head
and folds tiles together with the online max/sum rescaling recurrence.
Both return the output and the per-(token, head) log-sum-exp of the
scaled logits. The analytic backward of the direct path is included so
the sparse backward has an all-visible limit to be checked against.

Head mapping: 0-based query head h reads KV head h // G with
G = h_q / h_kv. Causal masking means token i attends to positions
0..i inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttentionConfig, OpCounter


@dataclass(frozen=True)
class AttentionResult:
    """Attention output (n, h_q, d_h) in storage precision plus the
    log-sum-exp of the scaled logits (n, h_q) in float64."""

    output: np.ndarray
    lse: np.ndarray


def check_gqa_shapes(Q, K, V, cfg: AttentionConfig):
    """Validate Q/K/V against each other and the config; return (n, h_q, h_kv, d_h)."""
    if Q.ndim != 3 or K.ndim != 3 or V.ndim != 3:
        raise ValueError(
            f"Q/K/V must be rank-3 (tokens, heads, d_h); got {Q.shape}, {K.shape}, {V.shape}"
        )
    n, h_q, d_h = Q.shape
    if n == 0:
        raise ValueError("empty sequence: n must be >= 1")
    if K.shape != V.shape:
        raise ValueError(f"K shape {K.shape} != V shape {V.shape}")
    if K.shape[0] != n or K.shape[2] != d_h:
        raise ValueError(f"K shape {K.shape} inconsistent with Q shape {Q.shape}")
    h_kv = K.shape[1]
    if (h_q, h_kv, d_h) != (cfg.h_q, cfg.h_kv, cfg.d_h):
        raise ValueError(
            f"shapes (h_q={h_q}, h_kv={h_kv}, d_h={d_h}) do not match config "
            f"(h_q={cfg.h_q}, h_kv={cfg.h_kv}, d_h={cfg.d_h})"
        )
    if cfg.n is not None and cfg.n != n:
        raise ValueError(f"sequence length {n} does not match cfg.n={cfg.n}")
    if Q.dtype != K.dtype or Q.dtype != V.dtype:
        raise ValueError("Q/K/V must share one storage dtype")
    return n, h_q, h_kv, d_h


def _visible_pairs(n: int, causal: bool) -> int:
    return n * (n + 1) // 2 if causal else n * n


def naive_gqa_forward(
    Q,
    K,
    V,
    cfg: AttentionConfig,
    causal: bool = True,
    counter: OpCounter | None = None,
    stats: dict | None = None,
) -> AttentionResult:
    """Direct reference: softmax(Q K^T / sqrt(d_h)) V per head, float64 throughout.

    With ``stats`` given, records the recomputed probability row sums
    under ``"prob_row_sums"`` so tests can assert normalization directly.
    """
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)

    future = np.triu(np.ones((n, n), dtype=bool), k=1) if causal else None
    out = np.empty((n, h_q, d_h), dtype=np.float64)
    lse = np.empty((n, h_q), dtype=np.float64)
    row_sums = np.empty((n, h_q), dtype=np.float64) if stats is not None else None

    for h in range(h_q):
        kv = h // G
        logits = (Q64[:, h] @ K64[:, kv].T) * scale
        if causal:
            logits[future] = -np.inf
        m = logits.max(axis=1)
        z = np.exp(logits - m[:, None])
        ell = z.sum(axis=1)
        lse[:, h] = m + np.log(ell)
        P = z / ell[:, None]
        out[:, h] = P @ V64[:, kv]
        if row_sums is not None:
            row_sums[:, h] = P.sum(axis=1)

    if counter is not None:
        vis = _visible_pairs(n, causal)
        counter.add(mac=2 * vis * d_h * h_q, exp=vis * h_q)
    if stats is not None:
        stats["prob_row_sums"] = row_sums
    return AttentionResult(output=out.astype(Q.dtype), lse=lse)


def tiled_gqa_forward(
    Q,
    K,
    V,
    cfg: AttentionConfig,
    B_q: int = 64,
    B_k: int = 64,
    causal: bool = True,
    counter: OpCounter | None = None,
) -> AttentionResult:
    """Streaming forward over (B_q, B_k) tiles with online softmax.

    Tiles need not divide n; ragged edges are handled by slicing and
    within-tile causal lanes are masked to -inf before the running max
    update. Never materializes more than one score tile per head.
    """
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    if B_q < 1 or B_k < 1:
        raise ValueError(f"tile sizes must be >= 1, got B_q={B_q}, B_k={B_k}")
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)

    out = np.empty((n, h_q, d_h), dtype=np.float64)
    lse = np.empty((n, h_q), dtype=np.float64)

    for h in range(h_q):
        kv = h // G
        Qh, Kh, Vh = Q64[:, h], K64[:, kv], V64[:, kv]
        for q0 in range(0, n, B_q):
            q1 = min(q0 + B_q, n)
            rows = np.arange(q0, q1)
            m = np.full(q1 - q0, -np.inf)
            ell = np.zeros(q1 - q0)
            acc = np.zeros((q1 - q0, d_h))
            k_hi = min(n, q1) if causal else n
            for k0 in range(0, k_hi, B_k):
                k1 = min(k0 + B_k, k_hi)
                S = (Qh[q0:q1] @ Kh[k0:k1].T) * scale
                if causal and k1 - 1 > q0:
                    S[rows[:, None] < np.arange(k0, k1)[None, :]] = -np.inf
                m_new = np.maximum(m, S.max(axis=1))
                # rows that have not met a visible key yet keep m = -inf;
                # substituting 0 below keeps every exp argument well defined
                m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
                alpha = np.exp(m - m_safe)
                P = np.exp(S - m_safe[:, None])
                ell = alpha * ell + P.sum(axis=1)
                acc = alpha[:, None] * acc + P @ Vh[k0:k1]
                m = m_new
            out[q0:q1, h] = acc / ell[:, None]
            lse[q0:q1, h] = m + np.log(ell)

    if counter is not None:
        vis = _visible_pairs(n, causal)
        counter.add(mac=2 * vis * d_h * h_q, exp=vis * h_q)
    return AttentionResult(output=out.astype(Q.dtype), lse=lse)


def naive_gqa_backward(
    Q,
    K,
    V,
    dO,
    cfg: AttentionConfig,
    causal: bool = True,
    counter: OpCounter | None = None,
):
    """Analytic gradients of sum(O * dO) w.r.t. Q, K, V.

    dK/dV accumulate contributions from all G query heads of a group, in
    fixed head order, so results are bitwise reproducible.
    """
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    if dO.shape != Q.shape:
        raise ValueError(f"dO shape {dO.shape} != Q shape {Q.shape}")
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)
    dO64 = dO.astype(np.float64, copy=False)

    future = np.triu(np.ones((n, n), dtype=bool), k=1) if causal else None
    dQ = np.zeros((n, h_q, d_h))
    dK = np.zeros((n, h_kv, d_h))
    dV = np.zeros((n, h_kv, d_h))

    for h in range(h_q):
        kv = h // G
        logits = (Q64[:, h] @ K64[:, kv].T) * scale
        if causal:
            logits[future] = -np.inf
        m = logits.max(axis=1)
        z = np.exp(logits - m[:, None])
        P = z / z.sum(axis=1)[:, None]

        dV[:, kv] += P.T @ dO64[:, h]
        dP = dO64[:, h] @ V64[:, kv].T
        delta = (dP * P).sum(axis=1)
        dS = P * (dP - delta[:, None])
        dQ[:, h] = (dS @ K64[:, kv]) * scale
        dK[:, kv] += (dS.T @ Q64[:, h]) * scale

    if counter is not None:
        vis = _visible_pairs(n, causal)
        counter.add(mac=4 * vis * d_h * h_q, exp=vis * h_q)
    return dQ.astype(Q.dtype), dK.astype(Q.dtype), dV.astype(Q.dtype)
