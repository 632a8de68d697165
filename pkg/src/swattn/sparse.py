"""Block-sparse attention over the selected visible block sets.

The forward pass walks each query token's visible key blocks in order
and folds them together with the same online max/sum recurrence as the
tiled dense path; one worker owns all G heads of a single query token.
Inside the query's own block the causal cut applies token-wise, since
block membership alone cannot exclude future positions on the diagonal.

The token-level visible set of query i is the union of its selected
blocks intersected with [0, i]; `token_visibility_mask` materializes it
per group for the brute-force oracle. Selection is treated as
non-differentiable: the backward pass routes gradients through the
masked softmax only, and key/value rows invisible to every query receive
exactly zero gradient.
"""

from __future__ import annotations

import numpy as np

from .core import AttentionConfig, OpCounter
from .dense import AttentionResult, check_gqa_shapes
from .selection import BlockSelection


def _check_selection(sel: BlockSelection, n: int, h_kv: int) -> None:
    if sel.n != n:
        raise ValueError(f"selection built for n={sel.n}, inputs have n={n}")
    if sel.num_groups != h_kv:
        raise ValueError(f"selection has {sel.num_groups} groups, inputs have h_kv={h_kv}")


def token_visibility_mask(sel: BlockSelection, g: int) -> np.ndarray:
    """(n, n) boolean mask: mask[i, t] iff token t is visible to query i."""
    n = sel.n
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for start, end in sel.visible_spans(g, i):
            mask[i, start:end] = True
    return mask


def sparse_forward(
    Q,
    K,
    V,
    sel: BlockSelection,
    cfg: AttentionConfig,
    counter: OpCounter | None = None,
    stats: dict | None = None,
) -> AttentionResult:
    """Exact softmax attention restricted to the selected blocks.

    Per query the key loop visits at most |I(i)| * B tokens; with
    ``stats`` given the actual visit counts land in
    stats["key_visits"] as an (h_kv, n) array.
    """
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    _check_selection(sel, n, h_kv)
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)

    out = np.empty((n, h_q, d_h), dtype=np.float64)
    lse = np.empty((n, h_q), dtype=np.float64)
    visits = np.zeros((h_kv, n), dtype=np.int64)

    for g in range(h_kv):
        heads = slice(g * G, (g + 1) * G)
        Kg, Vg = K64[:, g], V64[:, g]
        for i in range(n):
            spans = sel.visible_spans(g, i)
            if not spans:
                raise RuntimeError(f"query {i} in group {g} has an empty visible set")
            Qi = Q64[i, heads]
            m = np.full(G, -np.inf)
            ell = np.zeros(G)
            acc = np.zeros((G, d_h))
            for start, end in spans:
                S = (Qi @ Kg[start:end].T) * scale
                m_new = np.maximum(m, S.max(axis=1))
                alpha = np.exp(m - m_new)
                P = np.exp(S - m_new[:, None])
                ell = alpha * ell + P.sum(axis=1)
                acc = alpha[:, None] * acc + P @ Vg[start:end]
                m = m_new
                visits[g, i] += end - start
            out[i, heads] = acc / ell[:, None]
            lse[i, heads] = m + np.log(ell)

    if counter is not None:
        total = int(visits.sum())
        counter.add(mac=2 * total * G * d_h, exp=total * G)
    if stats is not None:
        stats["key_visits"] = visits
    return AttentionResult(output=out.astype(Q.dtype), lse=lse)


def masked_naive_oracle(
    Q, K, V, sel: BlockSelection, cfg: AttentionConfig
) -> AttentionResult:
    """Ground truth for the sparse path: materialize the full token-level
    mask, set invisible logits to -inf, and take the softmax directly in
    float64."""
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    _check_selection(sel, n, h_kv)
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)

    out = np.empty((n, h_q, d_h), dtype=np.float64)
    lse = np.empty((n, h_q), dtype=np.float64)
    for g in range(h_kv):
        invisible = ~token_visibility_mask(sel, g)
        for h in range(g * G, (g + 1) * G):
            logits = (Q64[:, h] @ K64[:, g].T) * scale
            logits[invisible] = -np.inf
            m = logits.max(axis=1)
            z = np.exp(logits - m[:, None])
            ell = z.sum(axis=1)
            lse[:, h] = m + np.log(ell)
            out[:, h] = (z / ell[:, None]) @ V64[:, g]
    return AttentionResult(output=out.astype(Q.dtype), lse=lse)


def sparse_backward(
    Q,
    K,
    V,
    sel: BlockSelection,
    dO,
    cfg: AttentionConfig,
    counter: OpCounter | None = None,
):
    """Analytic gradients of sum(O * dO) through the masked softmax.

    Recomputes probabilities span by span from the forward lse instead of
    storing them; dK/dV accumulate serially in ascending query order so
    repeated runs are bitwise identical. No gradient flows into the
    block selection itself.
    """
    n, h_q, h_kv, d_h = check_gqa_shapes(Q, K, V, cfg)
    _check_selection(sel, n, h_kv)
    if dO.shape != Q.shape:
        raise ValueError(f"dO shape {dO.shape} != Q shape {Q.shape}")
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    V64 = V.astype(np.float64, copy=False)
    dO64 = dO.astype(np.float64, copy=False)

    fwd = sparse_forward(Q64, K64, V64, sel, cfg)
    O64, lse = fwd.output, fwd.lse

    dQ = np.zeros((n, h_q, d_h))
    dK = np.zeros((n, h_kv, d_h))
    dV = np.zeros((n, h_kv, d_h))
    visits = 0

    for g in range(h_kv):
        heads = slice(g * G, (g + 1) * G)
        Kg, Vg = K64[:, g], V64[:, g]
        for i in range(n):
            Qi = Q64[i, heads]
            dOi = dO64[i, heads]
            delta = (dOi * O64[i, heads]).sum(axis=1)  # (G,)
            lse_i = lse[i, heads]
            for start, end in sel.visible_spans(g, i):
                S = (Qi @ Kg[start:end].T) * scale
                P = np.exp(S - lse_i[:, None])
                dP = dOi @ Vg[start:end].T
                dS = P * (dP - delta[:, None])
                dQ[i, heads] += (dS @ Kg[start:end]) * scale
                dK[start:end, g] += (dS.T @ Qi) * scale
                dV[start:end, g] += P.T @ dOi
                visits += end - start

    if counter is not None:
        counter.add(mac=4 * visits * G * d_h, exp=visits * G)
    return dQ.astype(Q.dtype), dK.astype(Q.dtype), dV.astype(Q.dtype)
