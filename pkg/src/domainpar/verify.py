"""Randomized sharded-vs-dense equivalence suite.

For each op this builds seeded random instances (shapes, dtypes, uneven and
zero-extent shard layouts, 1-D and 2-D meshes), runs the sharded op through
dispatch on a fresh mesh, reassembles the global result, and compares it to
the dense reference computed outside the mesh. Tolerances are relative to
the oracle's magnitude: 1e-12 for float64 instances, 1e-5 for float32.

Rank programs also assert the communication contracts while they run: pure
local ops must issue zero collectives, halo_conv exactly one halo round,
ring attention exactly group_size - 1 shifts. A contract violation fails the
instance the same way a numeric mismatch does.

The CLI's verify command and the acceptance tests both drive this module,
so "what the suite checks" has exactly one definition.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import dense
from .dispatch import DispatchTable, dispatch_operation
from .errors import DomainParError
from .mesh import spawn_mesh
from .ops import (
    VitConfig,
    make_vit_weights,
    vit_block_pipeline,
    vit_block_pipeline_dense,
)
from .sharding import Replicate, Shard, full_tensor, scatter_global

DEFAULT_RANKS = (1, 2, 4, 8)
DEFAULT_PER_RANK = 13  # x4 rank counts = 52 instances per op

TOLERANCES = {"float64": 1e-12, "float32": 1e-5}

OPS = (
    "sharded_elementwise",
    "sharded_linear",
    "sharded_softmax",
    "sharded_layer_norm",
    "halo_conv",
    "ring_attention",
    "vit_block_pipeline",
)

TINY = 1e-300


def rel_error(got, want) -> float:
    """max |got - want| over the oracle's max magnitude (zero-safe)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return float("inf")
    if want.size == 0:
        return 0.0
    denom = max(float(np.abs(want).max()), TINY)
    return float(np.abs(got - want).max() / denom)


def random_partition(rng, total: int, parts: int, min_part: int = 0) -> list[int]:
    """Random nonneg extents summing to total, each >= min_part.

    min_part 0 can and does produce zero-extent shards, which is the point.
    """
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    if min_part * parts > total:
        raise ValueError(f"cannot give {parts} parts >= {min_part} from {total}")
    if parts == 1:
        return [total]
    spare = total - min_part * parts
    cuts = np.sort(rng.integers(0, spare + 1, size=parts - 1))
    edges = [0, *cuts.tolist(), spare]
    return [min_part + edges[i + 1] - edges[i] for i in range(parts)]


@dataclass(frozen=True)
class CaseResult:
    op: str
    ranks: int
    index: int
    dtype: str
    description: str
    rel_err: float
    tol: float
    error: str | None  # exception text, or None

    @property
    def ok(self) -> bool:
        return self.error is None and self.rel_err <= self.tol


@dataclass(frozen=True)
class OpReport:
    op: str
    cases: tuple[CaseResult, ...]

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    @property
    def failures(self) -> tuple[CaseResult, ...]:
        return tuple(c for c in self.cases if not c.ok)

    @property
    def max_rel_err(self) -> float:
        errs = [c.rel_err for c in self.cases if c.error is None]
        return max(errs) if errs else float("nan")

    @property
    def passed(self) -> bool:
        return not self.failures


def _mesh_for(ranks: int, index: int):
    """Mostly 1-D meshes; every third 4- or 8-rank case uses a 2-D mesh with
    a replicated second axis. Returns (shape, axis_names, shard_axis)."""
    if ranks == 4 and index % 3 == 2:
        return (2, 2), ("domain", "data"), 0
    if ranks == 8 and index % 3 == 2:
        return (2, 4), ("data", "domain"), 1
    return (ranks,), ("domain",), 0


def _placements(mesh_ndim: int, shard_axis: int, tensor_dim: int):
    return tuple(
        Shard(tensor_dim) if axis == shard_axis else Replicate()
        for axis in range(mesh_ndim)
    )


def _trace_expect(ctx, level: str, collectives: int):
    rec = ctx.trace[-1]
    assert rec.level == level, f"trace level {rec.level!r}, expected {level!r}"
    assert rec.collectives == collectives, (
        f"op {rec.op} issued {rec.collectives} collectives, expected {collectives}"
    )


# ---------------------------------------------------------------------------
# case builders: each returns (oracle_result, rank_fn, description)


def _build_elementwise(rng, dtype, mesh_shape, axis_names, shard_axis, index, table):
    op_name = ("add", "mul", "scale")[index % 3]
    ndim = int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(1, 8)) for _ in range(ndim))
    dim = int(rng.integers(0, ndim))
    extents = random_partition(rng, shape[dim], mesh_shape[shard_axis])
    a = rng.standard_normal(shape).astype(dtype)
    if op_name == "scale" or rng.random() < 0.4:
        b = float(rng.standard_normal())
        b_global = None
    else:
        b_global = rng.standard_normal(shape).astype(dtype)
        b = b_global
    want = dense.elementwise(op_name, a, b)
    placements = _placements(len(mesh_shape), shard_axis, dim)
    shapes = {shard_axis: tuple(extents)}

    def rank_fn(ctx):
        st_a = scatter_global(ctx, a, placements, shapes)
        arg_b = (
            scatter_global(ctx, b_global, placements, shapes)
            if b_global is not None
            else b
        )
        out = dispatch_operation(op_name, st_a, arg_b, table=table)
        _trace_expect(ctx, "aten_like", 0)
        return full_tensor(out)

    desc = f"{op_name} shape={shape} dim={dim} extents={extents}"
    return want, rank_fn, desc


def _build_linear(rng, dtype, mesh_shape, axis_names, shard_axis, index, table):
    rows = int(rng.integers(1, 12))
    n_in = int(rng.integers(1, 9))
    n_out = int(rng.integers(1, 9))
    extents = random_partition(rng, rows, mesh_shape[shard_axis])
    x = rng.standard_normal((rows, n_in)).astype(dtype)
    w = rng.standard_normal((n_out, n_in)).astype(dtype)
    bias = rng.standard_normal(n_out).astype(dtype)
    want = dense.linear_forward(x, w, bias)
    placements = _placements(len(mesh_shape), shard_axis, 0)
    shapes = {shard_axis: tuple(extents)}

    def rank_fn(ctx):
        st = scatter_global(ctx, x, placements, shapes)
        out = dispatch_operation("linear", st, w, bias, table=table)
        _trace_expect(ctx, "aten_like", 0)
        return full_tensor(out)

    desc = f"linear rows={rows} n_in={n_in} n_out={n_out} extents={extents}"
    return want, rank_fn, desc


def _build_normalization(op_name, expected_cost):
    """softmax and layer_norm differ only in the dense call and collective
    count; share the builder."""

    def build(rng, dtype, mesh_shape, axis_names, shard_axis, index, table):
        ndim = int(rng.integers(2, 4))
        shape = tuple(int(rng.integers(1, 7)) for _ in range(ndim))
        dim = int(rng.integers(0, ndim))
        # mostly shard the reduced dim itself; sometimes another dim, which
        # must leave the op fully local
        if rng.random() < 0.7 or ndim == 1:
            shard_dim = dim
        else:
            shard_dim = int(rng.choice([d for d in range(ndim) if d != dim]))
        extents = random_partition(rng, shape[shard_dim], mesh_shape[shard_axis])
        x = (rng.standard_normal(shape) * float(rng.uniform(0.5, 4.0))).astype(dtype)
        if op_name == "softmax":
            want = dense.softmax(x, dim)
            args = (dim,)
            kwargs = {}
        else:
            want = dense.layer_norm(x, dim, eps=1e-5)
            args = (dim,)
            kwargs = {"eps": 1e-5}
        placements = _placements(len(mesh_shape), shard_axis, shard_dim)
        shapes = {shard_axis: tuple(extents)}
        cost = expected_cost if shard_dim == dim else 0

        def rank_fn(ctx):
            st = scatter_global(ctx, x, placements, shapes)
            out = dispatch_operation(op_name, st, *args, table=table, **kwargs)
            _trace_expect(ctx, "aten_like", cost)
            return full_tensor(out)

        desc = (
            f"{op_name} shape={shape} dim={dim} shard_dim={shard_dim} "
            f"extents={extents}"
        )
        return want, rank_fn, desc

    return build


def _build_halo_conv(rng, dtype, mesh_shape, axis_names, shard_axis, index, table):
    n_spatial = 1 if index % 2 == 0 else 2
    members = mesh_shape[shard_axis]
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, k // 2 + 2))
    batched = bool(rng.random() < 0.5)
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    min_part = k - 1  # single-hop halos: interior shards hold >= k-1 rows
    sp = int(rng.integers(0, n_spatial))
    g_min = max(k, min_part * members, 1)
    spatial = [int(rng.integers(k, k + 8)) for _ in range(n_spatial)]
    spatial[sp] = int(g_min + rng.integers(0, 10))
    extents = random_partition(rng, spatial[sp], members, min_part=min_part)
    shape = ((int(rng.integers(1, 3)),) if batched else ()) + (c_in, *spatial)
    x = rng.standard_normal(shape).astype(dtype)
    w = rng.standard_normal((c_out, c_in) + (k,) * n_spatial).astype(dtype)
    want = dense.conv(x, w, stride=stride, padding=padding)
    first_spatial = 2 if batched else 1
    d = first_spatial + sp
    placements = _placements(len(mesh_shape), shard_axis, d)
    shapes = {shard_axis: tuple(extents)}

    def rank_fn(ctx):
        st = scatter_global(ctx, x, placements, shapes)
        out = dispatch_operation(
            "conv", st, w, stride=stride, padding=padding, table=table
        )
        _trace_expect(ctx, "aten_like", 1)
        return full_tensor(out)

    desc = (
        f"conv shape={shape} k={k} stride={stride} padding={padding} "
        f"shard_dim={d} extents={extents}"
    )
    return want, rank_fn, desc


def _build_ring_attention(rng, dtype, mesh_shape, axis_names, shard_axis, index,
                          table):
    members = mesh_shape[shard_axis]
    d = int(rng.choice([4, 8, 16]))
    s_q = int(rng.integers(1, 20))
    s_k = int(rng.integers(1, 20))
    spread = float(rng.uniform(0.5, 3.0))
    q = (rng.standard_normal((s_q, d)) * spread).astype(dtype)
    k = (rng.standard_normal((s_k, d)) * spread).astype(dtype)
    v = rng.standard_normal((s_k, d)).astype(dtype)
    q_extents = random_partition(rng, s_q, members)
    kv_extents = random_partition(rng, s_k, members)
    want = dense.sdpa_dense(q, k, v)
    placements = _placements(len(mesh_shape), shard_axis, 0)

    def rank_fn(ctx):
        st_q = scatter_global(ctx, q, placements, {shard_axis: tuple(q_extents)})
        st_k = scatter_global(ctx, k, placements, {shard_axis: tuple(kv_extents)})
        st_v = scatter_global(ctx, v, placements, {shard_axis: tuple(kv_extents)})
        out = dispatch_operation("ring_attention", st_q, st_k, st_v, table=table)
        _trace_expect(ctx, "named_function", members - 1)
        return full_tensor(out)

    desc = (
        f"ring s_q={s_q} s_k={s_k} d={d} q_extents={q_extents} "
        f"kv_extents={kv_extents}"
    )
    return want, rank_fn, desc


def _build_vit(rng, dtype, mesh_shape, axis_names, shard_axis, index, table):
    members = mesh_shape[shard_axis]
    patch = 3
    config = VitConfig(
        image_channels=int(rng.integers(1, 3)),
        patch=patch,
        embed_dim=int(rng.choice([8, 16])),
        n_layers=index % 3,
        n_heads=int(rng.choice([1, 2])),
        mlp_ratio=2,
    )
    h = int(max(patch, (patch - 1) * members) + rng.integers(0, 8))
    w = int(patch + rng.integers(0, 6))
    x = rng.standard_normal((config.image_channels, h, w)).astype(dtype)
    weights = make_vit_weights(config, seed=int(rng.integers(0, 2 ** 31)),
                               dtype=dtype)
    extents = random_partition(rng, h, members, min_part=patch - 1)
    want = vit_block_pipeline_dense(x, config, weights)
    placements = _placements(len(mesh_shape), shard_axis, 1)
    shapes = {shard_axis: tuple(extents)}

    def rank_fn(ctx):
        st = scatter_global(ctx, x, placements, shapes)
        out = vit_block_pipeline(st, config, weights, table=table)
        for rec in ctx.trace:
            if rec.op == "ring_attention":
                assert rec.collectives == members - 1, (
                    f"ring step count {rec.collectives}, expected {members - 1}"
                )
        return full_tensor(out)

    desc = (
        f"vit h={h} w={w} c={config.image_channels} d={config.embed_dim} "
        f"layers={config.n_layers} heads={config.n_heads} extents={extents}"
    )
    return want, rank_fn, desc


_BUILDERS = {
    "sharded_elementwise": _build_elementwise,
    "sharded_linear": _build_linear,
    "sharded_softmax": _build_normalization("softmax", 2),
    "sharded_layer_norm": _build_normalization("layer_norm", 1),
    "halo_conv": _build_halo_conv,
    "ring_attention": _build_ring_attention,
    "vit_block_pipeline": _build_vit,
}


# ---------------------------------------------------------------------------
# runners


def run_op(op: str, ranks=DEFAULT_RANKS, per_rank: int = DEFAULT_PER_RANK,
           seed: int = 42, table: DispatchTable | None = None) -> OpReport:
    """Run the equivalence suite for one op; see module docstring."""
    if op not in _BUILDERS:
        raise KeyError(f"unknown op {op!r}; choose from {OPS}")
    build = _BUILDERS[op]
    op_tag = zlib.crc32(op.encode())
    cases = []
    for r in ranks:
        for i in range(per_rank):
            dtype = np.float64 if i % 2 == 0 else np.float32
            dtype_name = np.dtype(dtype).name
            tol = TOLERANCES[dtype_name]
            rng = np.random.default_rng([seed, op_tag, r, i])
            mesh_shape, axis_names, shard_axis = _mesh_for(r, i)
            description = ""
            try:
                want, rank_fn, description = build(
                    rng, dtype, mesh_shape, axis_names, shard_axis, i, table
                )
                results = spawn_mesh(mesh_shape, axis_names, rank_fn, seed=seed)
                err = rel_error(results[0], want)
                error_text = None if err <= tol else "tolerance exceeded"
            except DomainParError as exc:
                err = float("inf")
                error_text = f"{type(exc).__name__}: {exc}"
            cases.append(
                CaseResult(
                    op=op,
                    ranks=r,
                    index=i,
                    dtype=dtype_name,
                    description=description,
                    rel_err=err,
                    tol=tol,
                    error=error_text,
                )
            )
    return OpReport(op=op, cases=tuple(cases))


def run_all(ops=None, ranks=DEFAULT_RANKS, per_rank: int = DEFAULT_PER_RANK,
            seed: int = 42, table: DispatchTable | None = None) -> list[OpReport]:
    return [
        run_op(op, ranks=ranks, per_rank=per_rank, seed=seed, table=table)
        for op in (ops or OPS)
    ]


PERTURB_TARGETS = {
    "sharded_elementwise": ("add", "mul", "scale"),
    "sharded_linear": ("linear",),
    "sharded_softmax": ("softmax",),
    "sharded_layer_norm": ("layer_norm",),
    "halo_conv": ("conv",),
    "ring_attention": ("ring_attention",),
    "vit_block_pipeline": ("linear",),
}


def perturbed_table(op: str) -> DispatchTable:
    """Copy of the default table with op's handlers skewed by 1e-3.

    Fault injection for exercising the failure path end to end: the wrappers
    register at the function level (demonstrating precedence) and the suite
    must then report the op as FAIL. The default table is never touched.
    """
    from .dispatch import DEFAULT_TABLE
    from .sharding import ShardTensor

    if op not in PERTURB_TARGETS:
        raise KeyError(f"unknown op {op!r}; choose from {OPS}")
    table = DEFAULT_TABLE.copy()
    for name in PERTURB_TARGETS[op]:
        hit = table.lookup(name)
        assert hit is not None, f"no handler registered for {name!r}"
        _, inner = hit

        def make_wrapper(fn):
            def wrapped(*args, **kwargs):
                out = fn(*args, **kwargs)
                return ShardTensor(
                    out.local + np.asarray(1e-3, dtype=out.dtype),
                    out.global_shape,
                    out.ctx,
                    out.placements,
                    out.shard_shapes,
                )

            return wrapped

        table.register("function", name, make_wrapper(inner))
    return table


def format_reports(reports: list[OpReport], seed: int, ranks) -> str:
    """Human-readable verify table; deterministic for a given seed."""
    lines = [
        f"equivalence suite: seed={seed} ranks={','.join(str(r) for r in ranks)}"
    ]
    name_w = max(len(r.op) for r in reports)
    lines.append(f"{'op'.ljust(name_w)}  cases  max_rel_err  result")
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        lines.append(
            f"{rep.op.ljust(name_w)}  {str(rep.n_cases).ljust(5)}  "
            f"{rep.max_rel_err:<11.2e}  {status}"
        )
    for rep in reports:
        for c in rep.failures:
            reason = c.error or f"rel_err={c.rel_err:.3e} tol={c.tol:.0e}"
            lines.append(
                f"  FAIL {c.op} R={c.ranks} case={c.index} dtype={c.dtype} "
                f"{c.description}: {reason}"
            )
    total = sum(r.n_cases for r in reports)
    fails = sum(len(r.failures) for r in reports)
    lines.append(f"total: {len(reports)} ops, {total} cases, {fails} failures")
    return "\n".join(lines)
