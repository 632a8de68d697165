"""Dense-sparse switching: one attention entry point, two execution paths.

Short inputs go through exact tiled dense attention; longer ones run
block selection followed by block-sparse attention. Both paths consume
the same post-projection Q/K/V and return the same output and lse
conventions, so callers only see a mode tag. The default threshold is
the visible-token budget (N_init + N_local + k_top) * B: at or below it
the sparse path could not see fewer tokens than dense anyway, and dense
is exact, so the boundary goes to the dense side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttentionConfig, OpCounter
from .dense import AttentionResult, tiled_gqa_forward
from .selection import select_blocks
from .sparse import sparse_forward

MODE_DENSE = "dense"
MODE_SPARSE = "sparse"


@dataclass(frozen=True)
class SwitchPolicy:
    """threshold_tokens: largest n served densely (None = cfg threshold,
    falling back to the visible-token budget). forced_mode overrides the
    length dispatch entirely."""

    threshold_tokens: int | None = None
    forced_mode: str | None = None


def visible_token_budget(cfg: AttentionConfig) -> int:
    """Upper bound on key tokens any query touches in sparse mode."""
    return (cfg.N_init + cfg.N_local + cfg.k_top) * cfg.B


def attend(
    Q,
    K,
    V,
    cfg: AttentionConfig,
    policy: SwitchPolicy | None = None,
    selection_mode: str = "approx",
    B_q: int = 64,
    B_k: int = 64,
    counters: dict[str, OpCounter] | None = None,
) -> tuple[AttentionResult, str]:
    """Causal attention dispatched by sequence length; returns the result
    and the mode actually taken ("dense" or "sparse").

    counters, when given, may carry OpCounter entries under "dense",
    "selection", and "sparse"; the taken path increments its own.
    """
    policy = policy or SwitchPolicy()
    if policy.forced_mode not in (None, MODE_DENSE, MODE_SPARSE):
        raise ValueError(f"unknown forced mode {policy.forced_mode!r}")
    n = Q.shape[0]
    threshold = policy.threshold_tokens
    if threshold is None:
        threshold = cfg.switch_threshold
    if threshold is None:
        threshold = visible_token_budget(cfg)

    mode = policy.forced_mode or (MODE_DENSE if n <= threshold else MODE_SPARSE)
    counters = counters or {}
    if mode == MODE_DENSE:
        result = tiled_gqa_forward(
            Q, K, V, cfg, B_q=B_q, B_k=B_k, causal=True,
            counter=counters.get("dense"),
        )
    else:
        sel = select_blocks(
            Q, K, cfg, mode=selection_mode, B_q=B_q, B_k=B_k,
            counter=counters.get("selection"),
        )
        result = sparse_forward(Q, K, V, sel, cfg, counter=counters.get("sparse"))
    return result, mode
