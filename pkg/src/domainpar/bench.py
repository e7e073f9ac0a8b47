"""Desk-scale benchmark harness.

Times sharded ops on simulated meshes and reports per-cell wall-clock stats
plus peak activation bytes per rank. Timings are honest wall clock on an
in-process thread mesh: useful for relative comparisons (scaling with ranks
and sizes) on one machine, not for absolute device numbers. Peak bytes are
model-level accounting of the tensor payloads the op path holds (for the
transformer pipeline, the activation ledger), not an allocator hook; that is
the quantity the closed-form memory model predicts.

Rows stream out as they are computed so long sweeps are inspectable midway.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from .dispatch import dispatch_operation
from .errors import UnsupportedConfigError
from .mesh import all_reduce, barrier, spawn_mesh
from .ops import VitConfig, make_vit_weights, vit_block_pipeline
from .memory import ActivationLedger
from .sharding import Shard, ShardTensor, default_chunk

CSV_HEADER = "op,ranks,global_size,mean_ms,p50_ms,p95_ms,peak_bytes_per_rank"


@dataclass(frozen=True)
class BenchConfig:
    op: str
    sizes: tuple[int, ...]
    ranks: tuple[int, ...]
    repeats: int = 3
    warmup: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.op not in BENCH_OPS:
            raise UnsupportedConfigError(
                f"unknown bench op {self.op!r}; choose from {sorted(BENCH_OPS)}"
            )
        if not self.sizes or not self.ranks:
            raise UnsupportedConfigError("sizes and ranks must be non-empty")
        if self.repeats < 1 or self.warmup < 0:
            raise UnsupportedConfigError(
                f"repeats must be >= 1 and warmup >= 0, got "
                f"{self.repeats}/{self.warmup}"
            )


@dataclass(frozen=True)
class BenchRecord:
    op: str
    ranks: int
    global_size: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    peak_bytes_per_rank: int

    def csv_row(self) -> str:
        return (
            f"{self.op},{self.ranks},{self.global_size},{self.mean_ms:.4f},"
            f"{self.p50_ms:.4f},{self.p95_ms:.4f},{self.peak_bytes_per_rank}"
        )


def _local_shard(ctx, global_arr: np.ndarray, dim: int) -> ShardTensor:
    """My default_chunk block of a global array, built without communication
    (every rank holds the same seeded global)."""
    extents = default_chunk(global_arr.shape[dim], ctx.mesh.shape[0])
    c = ctx.coords[0]
    lo = sum(extents[:c])
    index = [slice(None)] * global_arr.ndim
    index[dim] = slice(lo, lo + extents[c])
    return ShardTensor(
        np.ascontiguousarray(global_arr[tuple(index)]),
        global_arr.shape,
        ctx,
        (Shard(dim),),
        {0: tuple(extents)},
    )


# Each builder: (rng, size) -> prepare(ctx) -> (run_once, payload_bytes_fn).
# payload_bytes_fn() is evaluated after a run and returns the rank's peak.


def _bench_elementwise(rng, size):
    a = rng.standard_normal(size).astype(np.float32)
    b = rng.standard_normal(size).astype(np.float32)

    def prepare(ctx):
        st_a = _local_shard(ctx, a, 0)
        st_b = _local_shard(ctx, b, 0)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("add", st_a, st_b)

        def payload_bytes():
            return st_a.local.nbytes + st_b.local.nbytes + state["out"].local.nbytes

        return run_once, payload_bytes

    return prepare


def _bench_softmax(rng, size):
    x = rng.standard_normal((size, 32)).astype(np.float32)

    def prepare(ctx):
        st = _local_shard(ctx, x, 0)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("softmax", st, 0)

        def payload_bytes():
            return st.local.nbytes + state["out"].local.nbytes

        return run_once, payload_bytes

    return prepare


def _bench_layer_norm(rng, size):
    x = rng.standard_normal((size, 32)).astype(np.float32)

    def prepare(ctx):
        st = _local_shard(ctx, x, 0)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("layer_norm", st, 0)

        def payload_bytes():
            return st.local.nbytes + state["out"].local.nbytes

        return run_once, payload_bytes

    return prepare


def _bench_linear(rng, size):
    x = rng.standard_normal((size, 64)).astype(np.float32)
    w = rng.standard_normal((64, 64)).astype(np.float32)
    bias = rng.standard_normal(64).astype(np.float32)

    def prepare(ctx):
        st = _local_shard(ctx, x, 0)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("linear", st, w, bias)

        def payload_bytes():
            return st.local.nbytes + state["out"].local.nbytes

        return run_once, payload_bytes

    return prepare


def _bench_halo_conv(rng, size):
    x = rng.standard_normal((4, size)).astype(np.float32)
    w = rng.standard_normal((4, 4, 3)).astype(np.float32)

    def prepare(ctx):
        st = _local_shard(ctx, x, 1)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("conv", st, w, stride=1, padding=1)

        def payload_bytes():
            return st.local.nbytes + state["out"].local.nbytes

        return run_once, payload_bytes

    return prepare


def _bench_ring_attention(rng, size):
    q = rng.standard_normal((size, 32)).astype(np.float32)
    k = rng.standard_normal((size, 32)).astype(np.float32)
    v = rng.standard_normal((size, 32)).astype(np.float32)

    def prepare(ctx):
        st_q = _local_shard(ctx, q, 0)
        st_k = _local_shard(ctx, k, 0)
        st_v = _local_shard(ctx, v, 0)
        state = {}

        def run_once():
            state["out"] = dispatch_operation("ring_attention", st_q, st_k, st_v)

        def payload_bytes():
            return (
                st_q.local.nbytes + st_k.local.nbytes + st_v.local.nbytes
                + state["out"].local.nbytes
            )

        return run_once, payload_bytes

    return prepare


def _bench_vit(rng, size):
    config = VitConfig()
    x = rng.standard_normal((config.image_channels, size, size)).astype(np.float32)
    weights = make_vit_weights(config, seed=7)

    def prepare(ctx):
        st = _local_shard(ctx, x, 1)
        ledger = ActivationLedger()

        def run_once():
            ledger.reset()
            vit_block_pipeline(st, config, weights, ledger=ledger)

        def payload_bytes():
            return ledger.peak_bytes

        return run_once, payload_bytes

    return prepare


BENCH_OPS = {
    "sharded_elementwise": _bench_elementwise,
    "sharded_softmax": _bench_softmax,
    "sharded_layer_norm": _bench_layer_norm,
    "sharded_linear": _bench_linear,
    "halo_conv": _bench_halo_conv,
    "ring_attention": _bench_ring_attention,
    "vit_block_pipeline": _bench_vit,
}


def run_cell(op: str, size: int, ranks: int, repeats: int, warmup: int,
             seed: int) -> BenchRecord:
    """One (op, size, ranks) measurement on a fresh 1-D mesh."""
    rng = np.random.default_rng([seed, zlib.crc32(op.encode()), size, ranks])
    prepare = BENCH_OPS[op](rng, size)

    def rank_fn(ctx):
        group = ctx.axis_group("domain")
        run_once, payload_bytes = prepare(ctx)
        for _ in range(warmup):
            run_once()
        times_ms = []
        for _ in range(repeats):
            barrier(group)
            t0 = time.perf_counter()
            run_once()
            times_ms.append((time.perf_counter() - t0) * 1e3)
        peak = all_reduce(group, np.asarray([float(payload_bytes())]), op="max")
        return {"times_ms": times_ms, "peak": int(peak[0])}

    results = spawn_mesh((ranks,), ("domain",), rank_fn, seed=seed)
    times = np.asarray(results[0]["times_ms"])
    return BenchRecord(
        op=op,
        ranks=ranks,
        global_size=size,
        mean_ms=float(times.mean()),
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        peak_bytes_per_rank=results[0]["peak"],
    )


def iter_bench(config: BenchConfig):
    """Yield one BenchRecord per (size, ranks) cell, in sweep order."""
    for size in config.sizes:
        for r in config.ranks:
            yield run_cell(
                config.op, size, r, config.repeats, config.warmup, config.seed
            )


def run_bench(config: BenchConfig) -> list[BenchRecord]:
    return list(iter_bench(config))
