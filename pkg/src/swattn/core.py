"""Core plumbing shared by every stage: configuration, seeded fixtures,
tensor file I/O, and deterministic operation counting.

Conventions fixed here and relied on everywhere else:

* Tensors are C-contiguous numpy arrays, float32 or float64 storage, with
  the token axis outermost.
* All softmax / log-sum-exp arithmetic runs in float64 regardless of the
  storage precision; outputs are cast back to storage precision at the end.
* Fixtures come from numpy's Philox generator, a named counter-based
  algorithm whose stream is identical across platforms for a fixed numpy
  version, so a (shape, seed) pair always yields the same bytes.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

TENSOR_MAGIC = b"SWATTNS1"

# precision tag byte in the tensor file header
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

STAGE_DENSE = "dense"
STAGE_SELECTION = "selection"
STAGE_SPARSE = "sparse"


class SwattnError(Exception):
    """Base class for library errors."""


class ConfigError(SwattnError, ValueError):
    """A configuration invariant is violated; the message names it."""


class TensorFormatError(SwattnError, ValueError):
    """A tensor or selection file is malformed."""


@dataclass(frozen=True)
class AttentionConfig:
    """Architectural and sparsity hyperparameters.

    Defaults are the reference profile used throughout the test suite:
    32 query heads over 2 KV heads (group size 16), head dim 128,
    selection blocks of 64 tokens, stage-1 pooling 32/16, coarse
    normalizer pooling 128/64, block-score max-pooling 5/4, and a
    1 + 32 + 63 block budget (6144 visible tokens).

    Field meanings:
      h_q, h_kv, d_h     query heads, key/value heads, head dimension
      B                  selection block size in tokens
      l_C1, s_C1         stage-1 mean-pool window length / stride (tokens)
      l_C2, s_C2         coarse-normalizer mean-pool length / stride (tokens)
      l, s               stage-3 max-pool window / stride (stage-1 columns)
      N_init, N_local    always-selected initial / trailing block counts
      k_top              scored blocks picked per query on top of those
      w                  sliding-window size the local blocks must cover
      switch_threshold   max token count served by the dense path
                         (None = visible-token budget)
      n, d               optional sequence length / model dim metadata;
                         when set, input shapes are checked against them
      G                  optional explicit group size; must equal h_q/h_kv
      scale_compressed_logits  apply 1/sqrt(d_h) to pooled-key logits
                         (kept as a flag because block ranking is
                         scale-sensitive across heads)
      experimental       skip the pooling-profile divisibility checks
    """

    h_q: int = 32
    h_kv: int = 2
    d_h: int = 128
    B: int = 64
    l_C1: int = 32
    s_C1: int = 16
    l_C2: int = 128
    s_C2: int = 64
    l: int = 5
    s: int = 4
    N_init: int = 1
    N_local: int = 32
    k_top: int = 63
    w: int = 1984
    switch_threshold: int | None = None
    n: int | None = None
    d: int | None = None
    G: int | None = None
    scale_compressed_logits: bool = True
    experimental: bool = False

    @property
    def group_size(self) -> int:
        return self.h_q // self.h_kv

    @property
    def budget_blocks(self) -> int:
        return self.N_init + self.N_local + self.k_top

    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_h)


def validate_config(cfg: AttentionConfig) -> AttentionConfig:
    """Check every config invariant; return ``cfg`` unchanged if all hold.

    Raises ConfigError naming the first violated invariant:
    positivity, head-divisibility, group-size, pooling-profile,
    window-coverage.
    """
    positive = {
        "h_q": cfg.h_q,
        "h_kv": cfg.h_kv,
        "d_h": cfg.d_h,
        "B": cfg.B,
        "l_C1": cfg.l_C1,
        "s_C1": cfg.s_C1,
        "l_C2": cfg.l_C2,
        "s_C2": cfg.s_C2,
        "l": cfg.l,
        "s": cfg.s,
        "N_init": cfg.N_init,
        "N_local": cfg.N_local,
        "w": cfg.w,
    }
    for name, value in positive.items():
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"positivity: {name}={value!r} must be a positive integer")
    if cfg.k_top < 0:
        raise ConfigError(f"positivity: k_top={cfg.k_top} must be >= 0")
    for name in ("n", "d", "switch_threshold"):
        value = getattr(cfg, name)
        if value is not None and value < 1:
            raise ConfigError(f"positivity: {name}={value} must be positive when set")

    if cfg.h_q % cfg.h_kv != 0:
        raise ConfigError(
            f"head-divisibility: h_q={cfg.h_q} is not a multiple of h_kv={cfg.h_kv}"
        )
    if cfg.G is not None and cfg.G != cfg.h_q // cfg.h_kv:
        raise ConfigError(
            f"group-size: G={cfg.G} does not equal h_q/h_kv={cfg.h_q // cfg.h_kv}"
        )

    if not cfg.experimental:
        if cfg.s_C1 > cfg.l_C1:
            raise ConfigError(
                f"pooling-profile: stride s_C1={cfg.s_C1} exceeds window l_C1={cfg.l_C1}"
            )
        if cfg.s_C2 > cfg.l_C2:
            raise ConfigError(
                f"pooling-profile: stride s_C2={cfg.s_C2} exceeds window l_C2={cfg.l_C2}"
            )
        if cfg.l_C1 % cfg.s_C1 != 0:
            raise ConfigError(
                f"pooling-profile: s_C1={cfg.s_C1} must divide l_C1={cfg.l_C1}"
            )
        if (cfg.l - 1) % cfg.s != 0:
            raise ConfigError(
                f"pooling-profile: s={cfg.s} must divide l-1={cfg.l - 1}"
            )

    needed_local = -(-cfg.w // cfg.B) + 1  # ceil(w/B) + 1
    if cfg.N_local < needed_local:
        raise ConfigError(
            f"window-coverage: N_local={cfg.N_local} < ceil(w/B)+1={needed_local} "
            f"(w={cfg.w}, B={cfg.B})"
        )
    return cfg


@dataclass
class OpCounter:
    """Deterministic tally of multiply-accumulate and exp operations.

    Counting is semantic: one MAC per scalar multiply-accumulate inside a
    dot product the algorithm must perform for a *visible* (query, key)
    lane, and one exp per probability-weight exponential over a visible
    lane. Lanes that a vectorized kernel merely pads or masks are not
    charged, and neither are comparisons, max-pooling, top-k, rescaling
    corrections, or normalization divides. For a fixed input shape and
    block selection the tally is identical on every run.
    """

    stage: str
    mac_count: int = 0
    exp_count: int = 0

    def add(self, mac: int = 0, exp: int = 0) -> None:
        self.mac_count += int(mac)
        self.exp_count += int(exp)


def seeded_random_tensor(
    shape,
    seed: int,
    mean: float = 0.0,
    std: float = 1.0,
    dtype=np.float32,
) -> np.ndarray:
    """Draw a normal(mean, std) tensor from a Philox stream keyed by seed.

    The same (shape, seed, mean, std, dtype) always produces the same
    bytes. Draws happen in float64 and are cast to the storage dtype.
    """
    shape = tuple(int(e) for e in shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one extent")
    if any(e <= 0 for e in shape):
        raise ValueError(f"zero or negative extent in shape {shape}")
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_TO_TAG:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    data = gen.normal(loc=mean, scale=std, size=shape)
    out = np.ascontiguousarray(data.astype(dtype))
    if not np.isfinite(out).all():
        raise ValueError("fixture draw produced non-finite values")
    return out


def make_qkv(n, h_q, h_kv, d_h, seed, dtype=np.float32, std=1.0):
    """Standard Q/K/V fixture: one Philox stream, Q then K then V."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    q = gen.normal(0.0, std, size=(n, h_q, d_h))
    k = gen.normal(0.0, std, size=(n, h_kv, d_h))
    v = gen.normal(0.0, std, size=(n, h_kv, d_h))
    dtype = np.dtype(dtype)
    return (
        np.ascontiguousarray(q.astype(dtype)),
        np.ascontiguousarray(k.astype(dtype)),
        np.ascontiguousarray(v.astype(dtype)),
    )


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file once: temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".swattn-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(t: np.ndarray, path) -> None:
    """Serialize a float32/float64 array.

    Layout: 8 magic bytes ``SWATTNS1``, little-endian u32 rank, rank
    little-endian u64 extents, u8 precision tag (0 = f32, 1 = f64), then
    the raw little-endian payload. No padding anywhere.
    """
    arr = np.ascontiguousarray(t)
    tag = _DTYPE_TO_TAG.get(arr.dtype)
    if tag is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    if arr.ndim:
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<B", tag)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    atomic_write_bytes(path, header + payload)


def load_tensor(path) -> np.ndarray:
    """Round-trip-exact inverse of save_tensor."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(TENSOR_MAGIC) + 4 or blob[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise TensorFormatError(f"malformed header: bad magic in {path}")
    off = len(TENSOR_MAGIC)
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank > 64:
        raise TensorFormatError(f"malformed header: implausible rank {rank}")
    if len(blob) < off + 8 * rank + 1:
        raise TensorFormatError("malformed header: extents truncated")
    shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", blob, off)
    off += 1
    dtype = _TAG_TO_DTYPE.get(tag)
    if dtype is None:
        raise TensorFormatError(f"unknown precision tag {tag}")
    count = 1
    for e in shape:
        count *= e
    expected = count * dtype.itemsize
    actual = len(blob) - off
    if actual < expected:
        raise TensorFormatError(
            f"truncated payload: expected {expected} bytes, found {actual}"
        )
    if actual > expected:
        raise TensorFormatError(
            f"oversized payload: expected {expected} bytes, found {actual}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))
