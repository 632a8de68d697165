"""Correctness, counting, and benchmark drivers behind the CLI.

Counting methodology
--------------------
mac_count / exp_count are semantic tallies (see core.OpCounter): one MAC
per scalar multiply-accumulate a kernel must perform for a visible
(query, key) lane, one exp per probability exponential. Benchmark rows
report the *per-query steady-state* cost at context length n, i.e. the
work of attending the newest token (position n-1) against its context:

  dense          2 * h_q * n * d_h MACs
  sparse         2 * h_q * visible(n-1) * d_h MACs
  select-exact   two passes over the visible stage-1 columns
  select-approx  coarse pass 1 (plus per-row exact fallback) + fine pass 2

This is the quantity the visible-token budget bounds, and speedups are
always count ratios against dense at the same n, never wall-clock.
Key pooling itself (one comparison-free sweep over K, shared by every
query) is excluded from selection counts. Wall times are measured by
actually executing the full-sequence operation when n is small enough
(exec_max_n) and reported for information only.

Analytic count formulas assume the standard pooling relation
s * s_C1 = B, under which per-query visible-block cardinality is
min(b_i + 1, N_init + N_local + k_top) independent of scores; unit tests
cross-check every formula against instrumented kernel runs.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, asdict

import numpy as np

from .core import (
    STAGE_DENSE,
    STAGE_SELECTION,
    STAGE_SPARSE,
    AttentionConfig,
    OpCounter,
    atomic_write_bytes,
    make_qkv,
    save_tensor,
    validate_config,
)
from .compression import mean_pool_keys
from .dense import naive_gqa_forward, naive_gqa_backward, tiled_gqa_forward
from .selection import (
    BlockSelection,
    build_block_sets,
    select_blocks,
    window_coverage_check,
)
from .sparse import masked_naive_oracle, sparse_backward, sparse_forward
from .switch import visible_token_budget

BENCH_MODES = ("dense-naive", "dense-tiled", "select-exact", "select-approx", "sparse")

CSV_COLUMNS = (
    "mode", "n", "B", "k_top", "G", "d_h",
    "mac_count", "exp_count", "wall_ms", "speedup_counts",
)


@dataclass
class BenchRecord:
    mode: str
    n: int
    B: int
    k_top: int
    G: int
    d_h: int
    mac_count: int
    exp_count: int
    wall_ms: float | None
    speedup_vs_dense: float
    pass1_mac: int | None = None


# ---------------------------------------------------------------------------
# analytic per-query counts


def pooled_visible_count(i: int, length: int, stride: int) -> int:
    """Pooled entries whose window ends at or before token i."""
    if i + 1 < length:
        return 0
    return (i + 1 - length) // stride + 1


def sparse_visible_tokens(cfg: AttentionConfig, i: int) -> int:
    """Causally clipped token count the selection exposes to query i."""
    b = i // cfg.B
    picked = min(b + 1, cfg.budget_blocks)
    return (picked - 1) * cfg.B + (i - b * cfg.B) + 1


def dense_query_counts(cfg: AttentionConfig, n: int) -> tuple[int, int]:
    return 2 * cfg.h_q * n * cfg.d_h, cfg.h_q * n


def sparse_query_counts(cfg: AttentionConfig, n: int) -> tuple[int, int]:
    v = sparse_visible_tokens(cfg, n - 1)
    return 2 * cfg.h_q * v * cfg.d_h, cfg.h_q * v


def selection_query_counts(cfg: AttentionConfig, n: int, approx: bool) -> dict:
    """Two-pass scoring cost for the newest query at context n."""
    v1 = pooled_visible_count(n - 1, cfg.l_C1, cfg.s_C1)
    v2 = pooled_visible_count(n - 1, cfg.l_C2, cfg.s_C2)
    pass1_cols = (v2 if v2 > 0 else v1) if approx else v1
    pass1_mac = cfg.h_q * pass1_cols * cfg.d_h
    pass2_mac = cfg.h_q * v1 * cfg.d_h
    return {
        "mac": pass1_mac + pass2_mac,
        "exp": cfg.h_q * (pass1_cols + v1),
        "pass1_mac": pass1_mac,
        "pass2_mac": pass2_mac,
    }


# full-sequence totals, used to cross-check instrumented kernel counters

def _pooled_visible_counts_all(n: int, length: int, stride: int) -> np.ndarray:
    i = np.arange(n)
    return np.where(i + 1 >= length, (i + 1 - length) // stride + 1, 0)


def dense_total_counts(cfg: AttentionConfig, n: int, causal: bool = True) -> tuple[int, int]:
    vis = n * (n + 1) // 2 if causal else n * n
    return 2 * cfg.h_q * vis * cfg.d_h, cfg.h_q * vis


def sparse_total_counts(cfg: AttentionConfig, n: int) -> tuple[int, int]:
    total = sum(sparse_visible_tokens(cfg, i) for i in range(n))
    return 2 * cfg.h_q * total * cfg.d_h, cfg.h_q * total


def selection_total_counts(cfg: AttentionConfig, n: int, approx: bool) -> dict:
    v1 = _pooled_visible_counts_all(n, cfg.l_C1, cfg.s_C1)
    v2 = _pooled_visible_counts_all(n, cfg.l_C2, cfg.s_C2)
    pass1_cols = int(np.where(v2 > 0, v2, v1).sum()) if approx else int(v1.sum())
    pass1_mac = cfg.h_q * pass1_cols * cfg.d_h
    pass2_mac = cfg.h_q * int(v1.sum()) * cfg.d_h
    return {
        "mac": pass1_mac + pass2_mac,
        "exp": cfg.h_q * (pass1_cols + int(v1.sum())),
        "pass1_mac": pass1_mac,
        "pass2_mac": pass2_mac,
    }


# ---------------------------------------------------------------------------
# correctness driver


def max_rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1.0) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom)) if got.size else 0.0


def finite_difference_grads(loss_fn, arrays, step: float = 1e-4):
    """Central-difference gradients of a scalar loss in the given arrays.

    Perturbs each float64 array element in place; loss_fn() must read the
    arrays afresh on every call. Independent of any analytic backward.
    """
    grads = []
    for a in arrays:
        flat = a.reshape(-1)
        g = np.empty(flat.size, dtype=np.float64)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_fn()
            flat[idx] = orig - step
            f_minus = loss_fn()
            flat[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g.reshape(a.shape))
    return grads


def grad_close(analytic, numeric, rtol: float = 1e-5, atol: float = 1e-8) -> float:
    """Worst relative error with an absolute floor, 0 when everything matches."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check_cfg(B: int = 16) -> AttentionConfig:
    return AttentionConfig(
        h_q=4, h_kv=2, d_h=16, B=B,
        l_C1=B // 2, s_C1=B // 4, l_C2=2 * B, s_C2=B,
        l=5, s=4, N_init=1, N_local=2, k_top=3, w=B,
    )


def _all_blocks_selection(n: int, B: int, groups: int) -> BlockSelection:
    nb = -(-n // B)
    rows = tuple(np.arange(min(i // B, nb - 1) + 1, dtype=np.int64) for i in range(n))
    return BlockSelection(B, n, tuple(rows for _ in range(groups)))


def run_correctness(
    seed: int = 0,
    sizes=(64, 257),
    precision=np.float64,
    inject_error: bool = False,
) -> tuple[int, dict]:
    """Run every cross-oracle check at the given sizes.

    Returns (exit_code, report): exit 0 when every check passes its
    tolerance, 1 otherwise. ``inject_error`` is a test hook that perturbs
    the tiled output in the first comparison so harness failure paths can
    be exercised; it must make the run fail.
    """
    sizes = [int(n) for n in sizes]
    dtype = np.dtype(precision)
    tol = 1e-10 if dtype == np.float64 else 1e-4
    checks: list[dict] = []

    def record(name, n, ok, max_err=None, tol_used=None):
        checks.append({
            "name": name, "n": n, "ok": bool(ok),
            "max_err": None if max_err is None else float(max_err),
            "tol": tol_used,
        })

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    for n in sizes:
        cfg = _check_cfg()
        Q, K, V = make_qkv(n, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed + n, dtype=dtype)

        ref = naive_gqa_forward(Q, K, V, cfg)
        B_q = int(rng.integers(1, n + 1))
        B_k = int(rng.integers(1, n + 1))
        tiled = tiled_gqa_forward(Q, K, V, cfg, B_q=B_q, B_k=B_k)
        got = tiled.output.astype(np.float64)
        if inject_error:
            got = got + 1e-3
        err = max_rel_err(got, ref.output)
        record("dense-tiled-vs-naive", n, err <= tol, err, tol)

        err = _lse_row_sum_error(Q, K, V, cfg, ref.lse)
        record("dense-lse-consistency", n, err <= 1e-6, err, 1e-6)

        sel = select_blocks(Q, K, cfg, mode="exact")
        sp = sparse_forward(Q, K, V, sel, cfg)
        oracle = masked_naive_oracle(Q, K, V, sel, cfg)
        err = max_rel_err(sp.output, oracle.output)
        record("sparse-vs-masked-oracle", n, err <= tol, err, tol)

        full = _all_blocks_selection(n, cfg.B, cfg.h_kv)
        sp_full = sparse_forward(Q, K, V, full, cfg)
        err = max_rel_err(sp_full.output, ref.output)
        record("sparse-full-selection-vs-dense", n, err <= tol, err, tol)

        ck1 = mean_pool_keys(K, cfg.l_C1, cfg.s_C1)
        from .compression import compressed_scores, head_group_sum
        from .selection import fused_shared_scores_exact

        composed = head_group_sum(compressed_scores(Q, ck1, cfg), cfg.group_size)
        fused = fused_shared_scores_exact(Q, ck1, cfg, B_q=max(1, B_q // 2), B_k=max(1, B_k // 2))
        err = float(np.max(np.abs(fused.scores - composed.scores))) if composed.scores.size else 0.0
        record("fused-exact-vs-composition", n, err <= 1e-10, err, 1e-10)

        sel_fused = select_blocks(Q, K, cfg, mode="fused-exact")
        same = _selections_equal(sel, sel_fused)
        record("selection-path-identity", n, same)

        cfg1 = AttentionConfig(
            h_q=2, h_kv=2, d_h=16, B=16, l_C1=8, s_C1=4, l_C2=32, s_C2=16,
            N_init=1, N_local=2, k_top=3, w=16,
        )
        Q1, K1, _ = make_qkv(n, cfg1.h_q, cfg1.h_kv, cfg1.d_h, seed=seed + n + 1, dtype=dtype)
        same = _selections_equal(
            select_blocks(Q1, K1, cfg1, mode="exact"),
            select_blocks(Q1, K1, cfg1, mode="approx"),
        )
        record("g1-approx-identity", n, same)

        record("window-coverage", n, window_coverage_check(sel, cfg.w))

    if sizes:
        err = _dense_fd_check(seed)
        record("grad-dense-fd", 8, err <= 1e-5, err, 1e-5)
        err = _sparse_fd_check(seed)
        record("grad-sparse-fd", 12, err <= 1e-5, err, 1e-5)

    passed = all(c["ok"] for c in checks)
    max_errors: dict[str, float] = {}
    for c in checks:
        if c["max_err"] is not None:
            max_errors[c["name"]] = max(max_errors.get(c["name"], 0.0), c["max_err"])
    report = {
        "seed": seed,
        "precision": "f64" if dtype == np.float64 else "f32",
        "sizes": sizes,
        "passed": passed,
        "checks": checks,
        "max_errors": max_errors,
    }
    if not sizes:
        report["warning"] = "no checks run"
    return (0 if passed else 1), report


def _lse_row_sum_error(Q, K, V, cfg, lse) -> float:
    """Row sums of exp(scaled logits - lse) must be 1 over visible keys."""
    n = Q.shape[0]
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    scale = cfg.logit_scale()
    G = cfg.group_size
    worst = 0.0
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    for h in range(cfg.h_q):
        logits = (Q64[:, h] @ K64[:, h // G].T) * scale
        logits[future] = -np.inf
        sums = np.exp(logits - lse[:, h][:, None]).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    return worst


def _selections_equal(a: BlockSelection, b: BlockSelection) -> bool:
    if a.n != b.n or a.num_groups != b.num_groups or a.block_size != b.block_size:
        return False
    for g in range(a.num_groups):
        for i in range(a.n):
            if not np.array_equal(a.blocks[g][i], b.blocks[g][i]):
                return False
    return True


def _dense_fd_check(seed: int) -> float:
    cfg = AttentionConfig(h_q=2, h_kv=1, d_h=4, B=4, l_C1=2, s_C1=1, l_C2=4,
                          s_C2=2, N_init=1, N_local=2, k_top=1, w=4)
    Q, K, V = make_qkv(8, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed + 1000, dtype=np.float64)
    dO = np.random.Generator(np.random.Philox(key=np.uint64(seed + 1001))).normal(
        size=Q.shape
    )
    dQ, dK, dV = naive_gqa_backward(Q, K, V, dO, cfg)
    loss = lambda: float((naive_gqa_forward(Q, K, V, cfg).output * dO).sum())
    nQ, nK, nV = finite_difference_grads(loss, [Q, K, V])
    return max(grad_close(dQ, nQ), grad_close(dK, nK), grad_close(dV, nV))


def _sparse_fd_check(seed: int) -> float:
    cfg = AttentionConfig(h_q=2, h_kv=1, d_h=4, B=4, l_C1=2, s_C1=1, l_C2=4,
                          s_C2=2, N_init=1, N_local=2, k_top=1, w=4)
    Q, K, V = make_qkv(12, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed + 2000, dtype=np.float64)
    dO = np.random.Generator(np.random.Philox(key=np.uint64(seed + 2001))).normal(
        size=Q.shape
    )
    sel = select_blocks(Q, K, cfg, mode="exact")
    dQ, dK, dV = sparse_backward(Q, K, V, sel, dO, cfg)
    loss = lambda: float((sparse_forward(Q, K, V, sel, cfg).output * dO).sum())
    nQ, nK, nV = finite_difference_grads(loss, [Q, K, V])
    return max(grad_close(dQ, nQ), grad_close(dK, nK), grad_close(dV, nV))


# ---------------------------------------------------------------------------
# benchmark driver


def _time_median(fn, repeats: int) -> float:
    samples = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def run_bench(
    cfg: AttentionConfig,
    sizes,
    modes=BENCH_MODES,
    seed: int = 0,
    precision=np.float32,
    exec_max_n: int = 4096,
    repeats: int = 5,
) -> list[BenchRecord]:
    """One BenchRecord per (mode, n); counts are analytic per-query
    figures, wall times come from executing the full operation when
    n <= exec_max_n (None above that)."""
    validate_config(cfg)
    for mode in modes:
        if mode not in BENCH_MODES:
            raise ValueError(f"unknown bench mode {mode!r}; expected one of {BENCH_MODES}")
    records = []
    for n in (int(x) for x in sizes):
        dense_mac, dense_exp = dense_query_counts(cfg, n)
        execute = n <= exec_max_n
        if execute:
            Q, K, V = make_qkv(n, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed, dtype=precision)
            sel = select_blocks(Q, K, cfg, mode="approx") if "sparse" in modes else None
        for mode in modes:
            pass1 = None
            if mode in ("dense-naive", "dense-tiled"):
                mac, exp = dense_mac, dense_exp
            elif mode == "sparse":
                mac, exp = sparse_query_counts(cfg, n)
            else:
                d = selection_query_counts(cfg, n, approx=mode == "select-approx")
                mac, exp, pass1 = d["mac"], d["exp"], d["pass1_mac"]
            wall = None
            if execute:
                runner = {
                    "dense-naive": lambda: naive_gqa_forward(Q, K, V, cfg),
                    "dense-tiled": lambda: tiled_gqa_forward(Q, K, V, cfg),
                    "select-exact": lambda: select_blocks(Q, K, cfg, mode="fused-exact"),
                    "select-approx": lambda: select_blocks(Q, K, cfg, mode="approx"),
                    "sparse": lambda: sparse_forward(Q, K, V, sel, cfg),
                }[mode]
                wall = _time_median(runner, repeats)
            records.append(BenchRecord(
                mode=mode, n=n, B=cfg.B, k_top=cfg.k_top, G=cfg.group_size,
                d_h=cfg.d_h, mac_count=mac, exp_count=exp, wall_ms=wall,
                speedup_vs_dense=dense_mac / mac, pass1_mac=pass1,
            ))
    return records


def write_bench_csv(records, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([
            r.mode, r.n, r.B, r.k_top, r.G, r.d_h, r.mac_count, r.exp_count,
            "" if r.wall_ms is None else f"{r.wall_ms:.3f}",
            f"{r.speedup_vs_dense:.6g}",
        ])
    atomic_write_bytes(path, buf.getvalue().encode())


def write_bench_json(records, path) -> None:
    payload = {"columns": list(CSV_COLUMNS), "records": [asdict(r) for r in records]}
    atomic_write_bytes(path, json.dumps(payload, indent=2).encode() + b"\n")


# ---------------------------------------------------------------------------
# selection quality


def random_equal_budget_selection(
    cfg: AttentionConfig, n: int, per_row_counts, seed: int
) -> BlockSelection:
    """Uniform random block sets matching the per-row budget of a real
    selection; the seeded baseline for attention-mass recall."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed) ^ 0x9E3779B97F4A7C15))
    groups = []
    for g in range(cfg.h_kv):
        rows = []
        for i in range(n):
            b = i // cfg.B
            count = min(int(per_row_counts[g][i]), b + 1)
            picked = gen.choice(b + 1, size=count, replace=False)
            rows.append(np.sort(picked.astype(np.int64)))
        groups.append(tuple(rows))
    return BlockSelection(cfg.B, n, tuple(groups))


def _group_block_mass(Q, K, cfg, g: int) -> np.ndarray:
    """Dense causal attention mass per (query, selection block), summed
    over the heads of group g. Rows sum to G."""
    n = Q.shape[0]
    nb = -(-n // cfg.B)
    G = cfg.group_size
    scale = cfg.logit_scale()
    Q64 = Q.astype(np.float64, copy=False)
    K64 = K.astype(np.float64, copy=False)
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    mass = np.zeros((n, nb))
    padded = np.zeros((n, nb * cfg.B))
    for h in range(g * G, (g + 1) * G):
        logits = (Q64[:, h] @ K64[:, g].T) * scale
        logits[future] = -np.inf
        m = logits.max(axis=1)
        z = np.exp(logits - m[:, None])
        P = z / z.sum(axis=1)[:, None]
        padded[:, :n] = P
        mass += padded.reshape(n, nb, cfg.B).sum(axis=2)
    return mass


def _mean_recall(mass_by_group, sel: BlockSelection, G: int) -> float:
    total = 0.0
    rows = 0
    for g, mass in enumerate(mass_by_group):
        for i in range(sel.n):
            total += mass[i, sel.blocks[g][i]].sum() / G
            rows += 1
    return total / rows


def _topk_parts(sel: BlockSelection, cfg: AttentionConfig, g: int, i: int) -> set:
    b = i // cfg.B
    base = set(range(min(cfg.N_init, b + 1))) | set(range(max(0, b - cfg.N_local + 1), b + 1))
    return set(int(j) for j in sel.blocks[g][i]) - base


def run_selection_quality(
    cfg: AttentionConfig, n: int, seed: int = 0, precision=np.float32
) -> dict:
    """Attention-mass recall of exact / approximate / random selection and
    the per-row top-k overlap between the approximate and exact paths."""
    validate_config(cfg)
    Q, K, V = make_qkv(n, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed, dtype=precision)
    sel_exact = select_blocks(Q, K, cfg, mode="exact")
    sel_approx = select_blocks(Q, K, cfg, mode="approx")
    per_row = [[sel_exact.blocks[g][i].size for i in range(n)] for g in range(cfg.h_kv)]
    sel_random = random_equal_budget_selection(cfg, n, per_row, seed)

    mass = [_group_block_mass(Q, K, cfg, g) for g in range(cfg.h_kv)]
    G = cfg.group_size

    overlaps = []
    for g in range(cfg.h_kv):
        for i in range(n):
            tk_exact = _topk_parts(sel_exact, cfg, g, i)
            if not tk_exact:
                continue
            tk_approx = _topk_parts(sel_approx, cfg, g, i)
            overlaps.append(len(tk_exact & tk_approx) / len(tk_exact))

    return {
        "n": n,
        "seed": seed,
        "budget_blocks": cfg.budget_blocks,
        "visible_token_budget": visible_token_budget(cfg),
        "recall": {
            "exact": _mean_recall(mass, sel_exact, G),
            "approx": _mean_recall(mass, sel_approx, G),
            "random": _mean_recall(mass, sel_random, G),
        },
        "topk_overlap_approx_vs_exact": (
            float(np.mean(overlaps)) if overlaps else None
        ),
        "rows_with_topk": len(overlaps),
    }


# ---------------------------------------------------------------------------
# fixture generation


def generate_fixtures(out_dir, sizes, seed: int, cfg: AttentionConfig, precision=np.float32):
    """Emit seeded Q/K/V tensors plus the dense reference output and lse
    for each size; returns the manifest that is also written as JSON."""
    import os

    validate_config(cfg)
    entries = []
    for n in (int(x) for x in sizes):
        Q, K, V = make_qkv(n, cfg.h_q, cfg.h_kv, cfg.d_h, seed=seed, dtype=precision)
        res = naive_gqa_forward(Q, K, V, cfg)
        files = {}
        for name, arr in (("q", Q), ("k", K), ("v", V),
                          ("out", res.output), ("lse", res.lse)):
            fname = f"fixture_n{n}_seed{seed}_{name}.swt"
            save_tensor(arr, os.path.join(out_dir, fname))
            files[name] = fname
        entries.append({"n": n, "files": files})
    manifest = {
        "seed": seed,
        "precision": "f64" if np.dtype(precision) == np.float64 else "f32",
        "config": asdict(cfg),
        "fixtures": entries,
    }
    atomic_write_bytes(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest, indent=2).encode() + b"\n",
    )
    return manifest
