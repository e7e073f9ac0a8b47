"""Sharded operators over ShardTensors.

Each op reproduces its dense counterpart (see dense.py) while touching only
what it must over the wire:

  sharded_elementwise  no communication, metadata propagated unchanged
  sharded_linear       no communication (contraction dim must be whole)
  sharded_softmax      two all_reduces (running max, then denominator)
  sharded_layer_norm   one all_reduce (sum and sum-of-squares, stacked)
  halo_conv            one halo_exchange round, asymmetric per-rank widths
  ring_attention       exactly R-1 ring shifts; K and V ride one payload

Statistics accumulate in float64 on both dense and sharded paths, so the two
differ only by summation order; the equivalence suite (verify.py) holds them
to 1e-12 relative in float64 and 1e-5 in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .dispatch import (
    dispatch_operation,
    register_dense_reference,
    register_handler,
)
from .errors import (
    DegenerateInputError,
    DimensionError,
    MetadataError,
    UnsupportedConfigError,
)
from .mesh import AxisGroup, all_reduce, halo_exchange, ring_shift
from .memory import ActivationLedger
from .sharding import Replicate, Shard, ShardTensor

__all__ = [
    "sharded_elementwise",
    "sharded_linear",
    "sharded_softmax",
    "sharded_layer_norm",
    "halo_conv",
    "ring_attention",
    "RingSoftmaxState",
    "ddp_allreduce_grads",
    "VitConfig",
    "make_vit_weights",
    "vit_block_pipeline",
    "vit_block_pipeline_dense",
]


def _group_for_axis(st: ShardTensor, axis: int) -> AxisGroup:
    return st.ctx.axis_group(st.mesh.axis_names[axis])


def _require_same_layout(what: str, a: ShardTensor, b: ShardTensor) -> None:
    if a.ctx is not b.ctx:
        raise MetadataError(f"{what}: operands live on different mesh runs")
    if a.global_shape != b.global_shape:
        raise DimensionError(
            f"{what}: global shapes disagree: {a.global_shape} vs {b.global_shape}"
        )
    if a.placements != b.placements or a.shard_shapes != b.shard_shapes:
        raise MetadataError(
            f"{what}: operand layouts disagree: "
            f"{list(a.placements)}/{a.shard_shapes} vs "
            f"{list(b.placements)}/{b.shard_shapes}"
        )


def _as_plain_weight(value, what: str) -> np.ndarray:
    """Accept a plain array or a fully replicated ShardTensor."""
    if isinstance(value, ShardTensor):
        if any(isinstance(p, Shard) for p in value.placements):
            raise UnsupportedConfigError(f"{what} must be replicated, not sharded")
        return value.local
    return np.asarray(value)


def _normalize_dim(dim: int, ndim: int) -> int:
    if not -ndim <= dim < ndim:
        raise DimensionError(f"axis {dim} out of range for rank-{ndim} tensor")
    return dim % ndim


# ---------------------------------------------------------------------------
# pointwise and linear


def sharded_elementwise(op: str, a: ShardTensor, b) -> ShardTensor:
    """add/mul/scale on matching layouts (or a scalar b). Pure local."""
    if not isinstance(a, ShardTensor):
        raise TypeError("sharded_elementwise expects a ShardTensor first operand")
    if isinstance(b, ShardTensor):
        _require_same_layout(f"elementwise {op}", a, b)
        local = dense.elementwise(op, a.local, b.local)
    else:
        local = dense.elementwise(op, a.local, b)
    return ShardTensor(local, a.global_shape, a.ctx, a.placements, a.shard_shapes)


def sharded_linear(x: ShardTensor, weight, bias) -> ShardTensor:
    """x @ W^T + b with x [rows, n_in]; rows may be sharded, n_in may not."""
    weight = _as_plain_weight(weight, "linear weight")
    bias = _as_plain_weight(bias, "linear bias")
    if x.ndim != 2:
        raise DimensionError(f"linear input must be 2-D, global is {x.global_shape}")
    if x.sharded_axis_for_dim(1) is not None:
        raise UnsupportedConfigError(
            "linear contraction dim (1) is sharded; gather or redistribute first"
        )
    local = dense.linear_forward(x.local, weight, bias)
    out_global = (x.global_shape[0], weight.shape[0])
    return ShardTensor(local, out_global, x.ctx, x.placements, x.shard_shapes)


# ---------------------------------------------------------------------------
# normalizations


def sharded_softmax(x: ShardTensor, dim: int) -> ShardTensor:
    """Softmax along dim; aggregates max and denominator across the shards."""
    dim = _normalize_dim(dim, x.ndim)
    if x.global_shape[dim] == 0:
        raise DegenerateInputError(
            f"softmax over zero-extent dim {dim} of global {x.global_shape}"
        )
    axis = x.sharded_axis_for_dim(dim)
    if axis is None:
        local = dense.softmax(x.local, dim) if x.local.size else x.local.copy()
        return ShardTensor(local, x.global_shape, x.ctx, x.placements, x.shard_shapes)
    group = _group_for_axis(x, axis)
    x64 = x.local.astype(np.float64, copy=False)
    reduced_shape = list(x.local.shape)
    reduced_shape[dim] = 1
    if x.local.shape[dim] == 0:
        local_max = np.full(reduced_shape, -np.inf)
    else:
        local_max = x64.max(axis=dim, keepdims=True)
    gmax = all_reduce(group, local_max, op="max")
    e = np.exp(x64 - gmax)
    denom = all_reduce(group, e.sum(axis=dim, keepdims=True), op="sum")
    out = (e / denom).astype(x.dtype, copy=False)
    return ShardTensor(out, x.global_shape, x.ctx, x.placements, x.shard_shapes)


def sharded_layer_norm(x: ShardTensor, dim: int, eps: float = 1e-5) -> ShardTensor:
    """Normalize along dim using all-reduced float64 moments."""
    dim = _normalize_dim(dim, x.ndim)
    n = x.global_shape[dim]
    if n == 0:
        raise DegenerateInputError(
            f"layer_norm over zero-extent dim {dim} of global {x.global_shape}"
        )
    axis = x.sharded_axis_for_dim(dim)
    if axis is None:
        local = dense.layer_norm(x.local, dim, eps) if x.local.size else x.local.copy()
        return ShardTensor(local, x.global_shape, x.ctx, x.placements, x.shard_shapes)
    group = _group_for_axis(x, axis)
    x64 = x.local.astype(np.float64, copy=False)
    s1 = x64.sum(axis=dim, keepdims=True)
    s2 = (x64 * x64).sum(axis=dim, keepdims=True)
    # One collective: both moments ride a single stacked all_reduce.
    sums = all_reduce(group, np.stack([s1, s2]), op="sum")
    mean = sums[0] / n
    var = np.maximum(sums[1] / n - mean * mean, 0.0)
    out = ((x64 - mean) / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    return ShardTensor(out, x.global_shape, x.ctx, x.placements, x.shard_shapes)


# ---------------------------------------------------------------------------
# ring attention


@dataclass
class RingSoftmaxState:
    """Online softmax accumulator: running row max m, denominator l, and
    numerator acc, all float64. After feeding score/value blocks in any
    order, output() equals the dense softmax-weighted sum over everything
    fed so far (the ring invariant tests drive this class directly)."""

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def fresh(cls, rows: int, d_out: int) -> "RingSoftmaxState":
        return cls(
            m=np.full(rows, -np.inf),
            l=np.zeros(rows),
            acc=np.zeros((rows, d_out)),
        )

    def update(self, scores: np.ndarray, values: np.ndarray) -> None:
        """Fold one block: scores [rows, b], values [b, d_out]."""
        if scores.shape[1] == 0:
            return
        s64 = scores.astype(np.float64, copy=False)
        v64 = values.astype(np.float64, copy=False)
        block_max = s64.max(axis=1)
        m_new = np.maximum(self.m, block_max)
        rescale = np.exp(self.m - m_new)  # exp(-inf) = 0 on the first block
        p = np.exp(s64 - m_new[:, None])
        self.l = self.l * rescale + p.sum(axis=1)
        self.acc = self.acc * rescale[:, None] + p @ v64
        self.m = m_new

    def output(self) -> np.ndarray:
        return self.acc / self.l[:, None]


def ring_attention(q: ShardTensor, k: ShardTensor, v: ShardTensor) -> ShardTensor:
    """Attention with K/V blocks circulating the sequence-sharding group.

    q, k, v are [seq, head_dim], sequence-sharded on the same mesh axis (or
    all whole). Exactly R-1 ring shifts: each step moves one payload holding
    that rank's current K and V blocks side by side. The online softmax never
    materializes the full score matrix and never overflows: scores enter
    exp() only after subtraction of the running row max.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not isinstance(t, ShardTensor):
            raise TypeError(f"ring_attention {name} must be a ShardTensor")
        if t.ndim != 2:
            raise DimensionError(
                f"ring_attention {name} must be [seq, head_dim], global is "
                f"{t.global_shape}"
            )
        if t.sharded_axis_for_dim(1) is not None:
            raise UnsupportedConfigError(
                f"ring_attention {name} has a sharded head dim"
            )
    if k.ctx is not q.ctx or v.ctx is not q.ctx:
        raise MetadataError("ring_attention operands live on different mesh runs")
    d = q.global_shape[1]
    if k.global_shape[1] != d or v.global_shape[1] != d:
        raise DimensionError(
            f"head dims disagree: q {q.global_shape}, k {k.global_shape}, "
            f"v {v.global_shape}"
        )
    if k.global_shape[0] != v.global_shape[0]:
        raise DimensionError(
            f"k/v lengths disagree: {k.global_shape} vs {v.global_shape}"
        )
    if k.global_shape[0] == 0:
        raise DegenerateInputError("ring_attention over an empty key set")

    q_axis = q.sharded_axis_for_dim(0)
    k_axis = k.sharded_axis_for_dim(0)
    v_axis = v.sharded_axis_for_dim(0)
    if k_axis != v_axis or k.shard_shapes != v.shard_shapes:
        raise MetadataError("k and v must share one sequence sharding")
    if q_axis != k_axis:
        raise MetadataError(
            "q and k/v must be sequence-sharded on the same mesh axis"
        )
    if q_axis is None:
        out = dense.sdpa_dense(q.local, k.local, v.local)
        return ShardTensor(out, q.global_shape, q.ctx, q.placements, q.shard_shapes)

    group = _group_for_axis(q, q_axis)
    r = group.size
    scale = 1.0 / math.sqrt(d)
    state = RingSoftmaxState.fresh(q.local.shape[0], d)
    kv = np.concatenate([k.local, v.local], axis=1)
    for step in range(r):
        kb, vb = kv[:, :d], kv[:, d:]
        if kb.shape[0] > 0:
            scores = (q.local @ kb.T) * scale
            state.update(scores, vb)
        if step < r - 1:
            kv = ring_shift(group, kv)
    out = state.output().astype(q.dtype, copy=False)
    return ShardTensor(out, q.global_shape, q.ctx, q.placements, q.shard_shapes)


# ---------------------------------------------------------------------------
# halo convolution


def _owned_output_range(a: int, b: int, g_in: int, g_out: int, kernel: int,
                        stride: int, padding: int) -> tuple[int, int]:
    """Output rows whose anchor (clamped window start) lies in input [a, b).

    The anchor of output j is clamp(j*stride - padding, 0, g_in - 1); each
    anchor lands in exactly one input interval, so the ranges tile [0, g_out).
    """
    def first_j_with_anchor_at_least(bound: int) -> int:
        if bound <= 0:
            return 0
        if bound >= g_in:
            return g_out  # anchors are clamped below g_in, none qualify
        return min(g_out, max(0, math.ceil((bound + padding) / stride)))

    return first_j_with_anchor_at_least(a), first_j_with_anchor_at_least(b)


def halo_conv(x: ShardTensor, weight, stride=1, padding=0) -> ShardTensor:
    """Convolution over an input sharded along one spatial dim.

    Each rank owns the output rows anchored inside its input interval,
    fetches the (right-side, under this ownership rule) halo it is missing
    in a single halo_exchange round, and runs the dense kernel on the
    extended block. Zero-extent output shards are legal; a halo wider than a
    neighbor's extent is a HaloError (halos never forward through a rank).
    """
    weight = _as_plain_weight(weight, "conv weight")
    n_spatial = weight.ndim - 2
    if n_spatial not in (1, 2):
        raise UnsupportedConfigError(
            f"conv supports 1 or 2 spatial dims, weight is {weight.shape}"
        )
    batched = x.ndim == n_spatial + 2
    if not batched and x.ndim != n_spatial + 1:
        raise DimensionError(
            f"conv input global {x.global_shape} incompatible with weight "
            f"{weight.shape}"
        )
    first_spatial = 2 if batched else 1
    kernel = weight.shape[2:]
    strides, paddings = dense._conv_params(n_spatial, kernel, stride, padding)

    sharded_axes = [
        (axis, p.dim) for axis, p in enumerate(x.placements) if isinstance(p, Shard)
    ]
    if not sharded_axes:
        out = dense.conv(x.local, weight, stride=strides, padding=paddings)
        return ShardTensor(out, out.shape, x.ctx, x.placements, {})
    if len(sharded_axes) > 1:
        raise UnsupportedConfigError(
            "halo_conv supports exactly one sharded mesh axis"
        )
    axis, d = sharded_axes[0]
    if d < first_spatial:
        raise UnsupportedConfigError(
            f"halo_conv input is sharded along non-spatial dim {d}"
        )
    sp = d - first_spatial
    g_in = x.global_shape[d]
    k_d, s_d, p_d = kernel[sp], strides[sp], paddings[sp]

    # Validate every output extent up front (identically on all ranks, so an
    # invalid config raises everywhere instead of desyncing the collective).
    out_spatial = [
        dense.conv_output_extent(g, kk, ss, pp)
        for g, kk, ss, pp in zip(
            x.global_shape[first_spatial:], kernel, strides, paddings
        )
    ]
    g_out = out_spatial[sp]
    c_in = weight.shape[1]
    if x.global_shape[first_spatial - 1] != c_in:
        raise DimensionError(
            f"conv input channels {x.global_shape[first_spatial - 1]} != "
            f"weight c_in {c_in}"
        )

    in_extents = x.shard_shapes[axis]
    bounds = [0]
    for e in in_extents:
        bounds.append(bounds[-1] + e)
    out_extents = []
    for member in range(len(in_extents)):
        j_lo, j_hi = _owned_output_range(
            bounds[member], bounds[member + 1], g_in, g_out, k_d, s_d, p_d
        )
        out_extents.append(j_hi - j_lo)

    group = _group_for_axis(x, axis)
    me = group.index
    a, b = bounds[me], bounds[me + 1]
    j_lo, j_hi = _owned_output_range(a, b, g_in, g_out, k_d, s_d, p_d)
    n_out = j_hi - j_lo
    if n_out > 0:
        w_min = j_lo * s_d - p_d
        w_max = (j_hi - 1) * s_d - p_d + k_d
        left_width = max(0, a - max(w_min, 0))
        right_width = max(0, min(w_max, g_in) - b)
    else:
        left_width = right_width = 0

    ext = halo_exchange(group, x.local, d, left_width, right_width)

    out_global = list(x.global_shape[:first_spatial - 1]) + [weight.shape[0]]
    out_global += out_spatial
    out_global = tuple(out_global)

    if n_out == 0:
        local_shape = list(out_global)
        local_shape[d] = 0
        local = np.zeros(local_shape, dtype=x.dtype)
    else:
        # Trim the extended block to exactly the input span the owned
        # windows read, then zero-pad where that span leaves [0, g_in).
        have_lo = a - left_width
        have_hi = b + right_width
        need_lo = max(w_min, 0)
        need_hi = min(w_max, g_in)
        index = [slice(None)] * x.ndim
        index[d] = slice(need_lo - have_lo, ext.shape[d] - (have_hi - need_hi))
        block = ext[tuple(index)]
        pad = [(0, 0)] * x.ndim
        pad[d] = (max(0, -w_min), max(0, w_max - g_in))
        if pad[d] != (0, 0):
            block = np.pad(block, pad)
        local_paddings = list(paddings)
        local_paddings[sp] = 0  # the sharded dim's padding is materialized
        local = dense.conv(block, weight, stride=strides, padding=tuple(local_paddings))
        assert local.shape[d] == n_out  # ownership arithmetic must agree

    return ShardTensor(
        local,
        out_global,
        x.ctx,
        x.placements,
        {axis: tuple(out_extents)},
    )


# ---------------------------------------------------------------------------
# data-parallel gradient averaging


def ddp_allreduce_grads(group: AxisGroup, grads):
    """Average each gradient across the group (one all_reduce per tensor).

    Accepts a list/tuple or a name->array dict; returns the same container
    type with every entry replaced by the group mean. Deterministic: the sum
    is folded in member order, then scaled by 1/size on every rank.
    """
    inv = 1.0 / group.size

    def mean_of(g):
        return all_reduce(group, np.asarray(g), op="sum") * inv

    if isinstance(grads, dict):
        return {name: mean_of(g) for name, g in grads.items()}
    out = [mean_of(g) for g in grads]
    return tuple(out) if isinstance(grads, tuple) else out


# ---------------------------------------------------------------------------
# transformer block pipeline


@dataclass(frozen=True)
class VitConfig:
    """Shapes for the patch-tokenizer + transformer-block pipeline."""

    image_channels: int = 3
    patch: int = 5  # tokenizer kernel == stride; odd so the conv contract holds
    embed_dim: int = 64
    n_layers: int = 16
    n_heads: int = 4
    mlp_ratio: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        if self.patch % 2 != 1:
            raise UnsupportedConfigError(f"patch must be odd, got {self.patch}")
        if self.embed_dim % self.n_heads != 0:
            raise UnsupportedConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if min(self.image_channels, self.embed_dim, self.n_heads,
               self.mlp_ratio) < 1 or self.n_layers < 0:
            raise UnsupportedConfigError("VitConfig fields must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio


def make_vit_weights(config: VitConfig, seed: int = 0,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded weights for vit_block_pipeline; the dense twin uses the same
    dict, so sharded-vs-dense comparisons share every parameter bit."""
    rng = np.random.default_rng(seed)
    d, h = config.embed_dim, config.mlp_hidden

    def w(*shape):
        return (rng.standard_normal(shape) * 0.05).astype(dtype)

    weights = {
        "tokenizer": w(d, config.image_channels, config.patch, config.patch),
    }
    for i in range(config.n_layers):
        weights[f"layers.{i}.wq"] = w(d, d)
        weights[f"layers.{i}.bq"] = w(d)
        weights[f"layers.{i}.wk"] = w(d, d)
        weights[f"layers.{i}.bk"] = w(d)
        weights[f"layers.{i}.wv"] = w(d, d)
        weights[f"layers.{i}.bv"] = w(d)
        weights[f"layers.{i}.wo"] = w(d, d)
        weights[f"layers.{i}.bo"] = w(d)
        weights[f"layers.{i}.w1"] = w(h, d)
        weights[f"layers.{i}.b1"] = w(h)
        weights[f"layers.{i}.w2"] = w(d, h)
        weights[f"layers.{i}.b2"] = w(d)
    return weights


def image_to_sequence(t: ShardTensor) -> ShardTensor:
    """[channels, h, w] -> [h*w, channels] token sequence, purely local.

    Row-major over (h, w), so sharding along h becomes sharding along the
    token dim with per-rank extents h_r * w.
    """
    if t.ndim != 3:
        raise DimensionError(f"expected [channels, h, w], global {t.global_shape}")
    c, h, w = t.global_shape
    axis = t.sharded_axis_for_dim(1)
    if t.sharded_axis_for_dim(0) is not None or t.sharded_axis_for_dim(2) is not None:
        raise UnsupportedConfigError(
            "image_to_sequence supports sharding along h only"
        )
    local = np.ascontiguousarray(
        np.transpose(t.local, (1, 2, 0)).reshape(-1, c)
    )
    if axis is None:
        placements = t.placements
        shapes = {}
    else:
        placements = tuple(
            Shard(0) if isinstance(p, Shard) else p for p in t.placements
        )
        shapes = {axis: tuple(e * w for e in t.shard_shapes[axis])}
    return ShardTensor(local, (h * w, c), t.ctx, placements, shapes)


def _slice_features(t: ShardTensor, lo: int, hi: int) -> ShardTensor:
    if t.sharded_axis_for_dim(1) is not None:
        raise UnsupportedConfigError("feature dim is sharded")
    local = np.ascontiguousarray(t.local[:, lo:hi])
    return ShardTensor(
        local, (t.global_shape[0], hi - lo), t.ctx, t.placements, t.shard_shapes
    )


def _concat_features(parts: list[ShardTensor]) -> ShardTensor:
    ref = parts[0]
    local = np.concatenate([p.local for p in parts], axis=1)
    width = sum(p.global_shape[1] for p in parts)
    return ShardTensor(
        local, (ref.global_shape[0], width), ref.ctx, ref.placements,
        ref.shard_shapes
    )


def vit_block_pipeline(x: ShardTensor, config: VitConfig, weights,
                       ledger: ActivationLedger | None = None,
                       table=None) -> ShardTensor:
    """Patch tokenizer + n_layers transformer blocks, domain-parallel.

    x is one sample, [channels, h, w], sharded along h. The tokenizer conv
    runs under halo exchange, tokens stay sequence-sharded, attention rides
    the ring, layer norms are over the (whole) embedding dim. Returns the
    [tokens, embed_dim] sequence; with n_layers == 0 that is the tokenizer
    output. The optional ledger records every saved activation's bytes.
    """
    def save(t: ShardTensor):
        if ledger is not None:
            ledger.save(t.local.nbytes)

    def op(name, *args, **kwargs):
        return dispatch_operation(name, *args, table=table, **kwargs)

    save(x)
    tokens = op("conv", x, weights["tokenizer"], stride=config.patch, padding=0)
    seq = image_to_sequence(tokens)
    dh = config.head_dim
    for i in range(config.n_layers):
        p = f"layers.{i}."
        save(seq)
        normed = op("layer_norm", seq, 1, eps=config.eps)
        save(normed)
        q = op("linear", normed, weights[p + "wq"], weights[p + "bq"])
        k = op("linear", normed, weights[p + "wk"], weights[p + "bk"])
        v = op("linear", normed, weights[p + "wv"], weights[p + "bv"])
        save(q), save(k), save(v)
        heads = []
        for hd in range(config.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            heads.append(
                op(
                    "ring_attention",
                    _slice_features(q, lo, hi),
                    _slice_features(k, lo, hi),
                    _slice_features(v, lo, hi),
                )
            )
        attn = _concat_features(heads)
        save(attn)
        proj = op("linear", attn, weights[p + "wo"], weights[p + "bo"])
        seq = op("add", seq, proj)
        save(seq)
        normed2 = op("layer_norm", seq, 1, eps=config.eps)
        save(normed2)
        hidden = op("linear", normed2, weights[p + "w1"], weights[p + "b1"])
        save(hidden)
        mlp = op("linear", hidden, weights[p + "w2"], weights[p + "b2"])
        seq = op("add", seq, mlp)
    return seq


def vit_block_pipeline_dense(x: np.ndarray, config: VitConfig, weights,
                             ledger: ActivationLedger | None = None) -> np.ndarray:
    """Single-device twin of vit_block_pipeline, identical op structure."""
    def save(arr: np.ndarray):
        if ledger is not None:
            ledger.save(arr.nbytes)

    save(x)
    tokens = dense.conv(x, weights["tokenizer"], stride=config.patch, padding=0)
    c = tokens.shape[0]
    seq = np.ascontiguousarray(np.transpose(tokens, (1, 2, 0)).reshape(-1, c))
    dh = config.head_dim
    for i in range(config.n_layers):
        p = f"layers.{i}."
        save(seq)
        normed = dense.layer_norm(seq, 1, eps=config.eps)
        save(normed)
        q = dense.linear_forward(normed, weights[p + "wq"], weights[p + "bq"])
        k = dense.linear_forward(normed, weights[p + "wk"], weights[p + "bk"])
        v = dense.linear_forward(normed, weights[p + "wv"], weights[p + "bv"])
        save(q), save(k), save(v)
        heads = [
            dense.sdpa_dense(
                q[:, hd * dh:(hd + 1) * dh],
                k[:, hd * dh:(hd + 1) * dh],
                v[:, hd * dh:(hd + 1) * dh],
            )
            for hd in range(config.n_heads)
        ]
        attn = np.concatenate(heads, axis=1)
        save(attn)
        proj = dense.linear_forward(attn, weights[p + "wo"], weights[p + "bo"])
        seq = seq + proj
        save(seq)
        normed2 = dense.layer_norm(seq, 1, eps=config.eps)
        save(normed2)
        hidden = dense.linear_forward(normed2, weights[p + "w1"], weights[p + "b1"])
        save(hidden)
        mlp = dense.linear_forward(hidden, weights[p + "w2"], weights[p + "b2"])
        seq = seq + mlp
    return seq


# ---------------------------------------------------------------------------
# default registrations


def _add_handler(a, b):
    return sharded_elementwise("add", a, b)


def _mul_handler(a, b):
    return sharded_elementwise("mul", a, b)


def _scale_handler(a, s):
    return sharded_elementwise("scale", a, s)


def _register_defaults():
    register_handler("aten_like", "add", _add_handler)
    register_handler("aten_like", "mul", _mul_handler)
    register_handler("aten_like", "scale", _scale_handler)
    register_handler("aten_like", "linear", sharded_linear)
    register_handler("aten_like", "softmax", sharded_softmax)
    register_handler("aten_like", "layer_norm", sharded_layer_norm)
    register_handler("aten_like", "conv", halo_conv)
    register_handler("named_function", "ring_attention", ring_attention)

    register_dense_reference("add", dense.add)
    register_dense_reference("mul", dense.mul)
    register_dense_reference("scale", dense.scale)
    register_dense_reference("matmul", dense.matmul)
    register_dense_reference("linear", dense.linear_forward)
    register_dense_reference("softmax", dense.softmax)
    register_dense_reference("layer_norm", dense.layer_norm)
    register_dense_reference("conv", dense.conv)
    register_dense_reference("sdpa", dense.sdpa_dense)
    register_dense_reference("ring_attention", dense.sdpa_dense)


_register_defaults()
