"""ShardTensor: a dense tensor partitioned across a device mesh.

A ShardTensor is four things: the local block, the global logical shape, a
placement per mesh axis (Shard(dim) or Replicate), and the sharding shapes,
which record every member's local extent along each sharded axis. Carrying
the shapes explicitly is what lets uneven and zero-extent shards flow through
collectives without any implicit even-division assumption; every op that
changes a sharded extent must also produce the new shapes.

Invariants enforced on construction and re-checkable via validate():
  - at most one sharded tensor dim per mesh axis, dims distinct across axes
  - per sharded axis, the shapes list has one entry per member and sums to
    the global extent along that dim
  - the local block's extents equal my shapes entry along sharded dims and
    the global extent along all others
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, IntegrityError, MetadataError
from .mesh import RankContext, all_gather_varlen

__all__ = [
    "Placement",
    "Shard",
    "Replicate",
    "ShardTensor",
    "default_chunk",
    "scatter_global",
    "full_tensor",
    "redistribute",
    "rebalance_check",
    "check_replication_coherence",
    "AxisBalance",
]


class Placement:
    """How a tensor relates to one mesh axis."""

    __slots__ = ()


class Shard(Placement):
    """Split along tensor dim `dim` across the members of this mesh axis."""

    __slots__ = ("dim",)

    def __init__(self, dim: int):
        self.dim = int(dim)

    def __repr__(self):
        return f"Shard({self.dim})"

    def __eq__(self, other):
        return isinstance(other, Shard) and other.dim == self.dim

    def __hash__(self):
        return hash(("Shard", self.dim))


class Replicate(Placement):
    """Every member of this mesh axis holds the full tensor."""

    __slots__ = ()

    def __repr__(self):
        return "Replicate"

    def __eq__(self, other):
        return isinstance(other, Replicate)

    def __hash__(self):
        return hash("Replicate")


def default_chunk(extent: int, members: int) -> list[int]:
    """Split extent into `members` contiguous pieces: ceil-sized full chunks,
    then a remainder, then zeros.

    default_chunk(10, 4) == [3, 3, 3, 1]; default_chunk(5, 4) == [2, 2, 1, 0];
    default_chunk(0, r) == [0] * r.
    """
    if extent < 0:
        raise DimensionError(f"extent must be >= 0, got {extent}")
    if members < 1:
        raise DimensionError(f"members must be >= 1, got {members}")
    if extent == 0:
        return [0] * members
    chunk = math.ceil(extent / members)
    out = []
    remaining = extent
    for _ in range(members):
        take = min(chunk, remaining)
        out.append(take)
        remaining -= take
    return out


def _normalize_placements(placements, mesh_ndim: int, tensor_ndim: int):
    placements = tuple(placements)
    if len(placements) != mesh_ndim:
        raise MetadataError(
            f"{len(placements)} placements for a {mesh_ndim}-axis mesh"
        )
    seen_dims = set()
    for p in placements:
        if isinstance(p, Shard):
            if not 0 <= p.dim < tensor_ndim:
                raise MetadataError(
                    f"{p!r} out of range for a rank-{tensor_ndim} tensor"
                )
            if p.dim in seen_dims:
                raise MetadataError(
                    f"tensor dim {p.dim} sharded by more than one mesh axis"
                )
            seen_dims.add(p.dim)
        elif not isinstance(p, Replicate):
            raise MetadataError(f"placement {p!r} is not Shard or Replicate")
    return placements


def _fmt_tuple(t) -> str:
    inner = ",".join(str(x) for x in t)
    if len(t) == 1:
        inner += ","
    return f"({inner})"


class ShardTensor:
    """One rank's view of a mesh-partitioned tensor. See module docstring."""

    __slots__ = ("local", "global_shape", "ctx", "placements", "shard_shapes")

    def __init__(self, local, global_shape, ctx: RankContext, placements,
                 shard_shapes=None):
        global_shape = tuple(int(s) for s in global_shape)
        placements = _normalize_placements(placements, ctx.mesh.ndim, len(global_shape))
        if shard_shapes is None:
            shard_shapes = {
                axis: tuple(default_chunk(global_shape[p.dim], ctx.mesh.shape[axis]))
                for axis, p in enumerate(placements)
                if isinstance(p, Shard)
            }
        else:
            shard_shapes = {int(a): tuple(int(e) for e in ext)
                            for a, ext in shard_shapes.items()}
        self.local = np.asarray(local)
        self.global_shape = global_shape
        self.ctx = ctx
        self.placements = placements
        self.shard_shapes = shard_shapes
        self.validate()

    # -- invariants ------------------------------------------------------

    def validate(self) -> None:
        """Re-check all metadata invariants and the local block against them.

        MetadataError for self-inconsistent metadata, IntegrityError when the
        local block does not match what the metadata promises.
        """
        mesh = self.ctx.mesh
        sharded_axes = {
            axis for axis, p in enumerate(self.placements) if isinstance(p, Shard)
        }
        if set(self.shard_shapes) != sharded_axes:
            raise MetadataError(
                f"shard_shapes keys {sorted(self.shard_shapes)} do not match "
                f"sharded axes {sorted(sharded_axes)}"
            )
        for axis in sharded_axes:
            extents = self.shard_shapes[axis]
            dim = self.placements[axis].dim
            if len(extents) != mesh.shape[axis]:
                raise MetadataError(
                    f"axis {axis}: {len(extents)} extents for "
                    f"{mesh.shape[axis]} members"
                )
            if any(e < 0 for e in extents):
                raise MetadataError(f"axis {axis}: negative extent in {extents}")
            if sum(extents) != self.global_shape[dim]:
                raise MetadataError(
                    f"axis {axis}: extents {extents} sum to {sum(extents)}, "
                    f"global dim {dim} is {self.global_shape[dim]}"
                )
        if self.local.ndim != len(self.global_shape):
            raise IntegrityError(
                f"local rank {self.local.ndim} != global rank "
                f"{len(self.global_shape)}"
            )
        expect = self._expected_local_shape()
        if tuple(self.local.shape) != expect:
            raise IntegrityError(
                f"local shape {tuple(self.local.shape)} != expected {expect} "
                f"for placements {list(self.placements)}"
            )

    def _expected_local_shape(self) -> tuple[int, ...]:
        shape = list(self.global_shape)
        for axis, p in enumerate(self.placements):
            if isinstance(p, Shard):
                shape[p.dim] = self.shard_shapes[axis][self.ctx.coords[axis]]
        return tuple(shape)

    # -- introspection ---------------------------------------------------

    @property
    def mesh(self):
        return self.ctx.mesh

    @property
    def dtype(self):
        return self.local.dtype

    @property
    def ndim(self) -> int:
        return len(self.global_shape)

    def sharded_axis_for_dim(self, dim: int) -> int | None:
        """Mesh axis sharding tensor dim, or None if that dim is whole."""
        for axis, p in enumerate(self.placements):
            if isinstance(p, Shard) and p.dim == dim:
                return axis
        return None

    def shard_interval(self, axis: int) -> tuple[int, int]:
        """My [start, stop) along the tensor dim sharded by mesh axis."""
        if axis not in self.shard_shapes:
            raise MetadataError(f"mesh axis {axis} is not sharded")
        extents = self.shard_shapes[axis]
        c = self.ctx.coords[axis]
        start = sum(extents[:c])
        return start, start + extents[c]

    def debug_line(self) -> str:
        """One line per rank, stable format, safe to grep in mesh logs."""
        shapes = ",".join(
            f"{axis}:[{','.join(str(e) for e in self.shard_shapes[axis])}]"
            for axis in sorted(self.shard_shapes)
        )
        placements = ",".join(repr(p) for p in self.placements)
        return (
            f"rank={self.ctx.rank_id} coords={_fmt_tuple(self.ctx.coords)} "
            f"local_shape={_fmt_tuple(self.local.shape)} "
            f"placements=[{placements}] shard_shapes={{{shapes}}}"
        )

    def __repr__(self):
        return f"ShardTensor({self.debug_line()})"

    # -- conversions -----------------------------------------------------

    def full_tensor(self) -> np.ndarray:
        return full_tensor(self)

    def redistribute(self, new_placements) -> "ShardTensor":
        return redistribute(self, new_placements)


def replicated(ctx: RankContext, value: np.ndarray) -> ShardTensor:
    """Wrap a plain array as fully replicated on ctx's mesh."""
    arr = np.asarray(value)
    return ShardTensor(arr, arr.shape, ctx, (Replicate(),) * ctx.mesh.ndim, {})


def scatter_global(ctx: RankContext, global_tensor, placements,
                   shard_shapes=None) -> ShardTensor:
    """Slice a global tensor on rank 0 and send every rank its block.

    Only rank 0's global_tensor is consulted (other ranks may pass None).
    shard_shapes defaults to default_chunk along each sharded dim; explicit
    shapes must sum to the global extents or rank 0 raises MetadataError
    before anything is sent.
    """
    ctx.collective_count += 1
    deadline = ctx._deadline()
    mesh = ctx.mesh
    if ctx.rank_id == 0:
        g = np.asarray(global_tensor)
        placements = _normalize_placements(placements, mesh.ndim, g.ndim)
        if shard_shapes is None:
            shard_shapes = {
                axis: tuple(default_chunk(g.shape[p.dim], mesh.shape[axis]))
                for axis, p in enumerate(placements)
                if isinstance(p, Shard)
            }
        else:
            shard_shapes = {int(a): tuple(int(e) for e in ext)
                            for a, ext in shard_shapes.items()}
            for axis, p in enumerate(placements):
                if not isinstance(p, Shard):
                    continue
                extents = shard_shapes.get(axis)
                if extents is None or len(extents) != mesh.shape[axis]:
                    raise MetadataError(
                        f"shard_shapes for axis {axis} must list "
                        f"{mesh.shape[axis]} extents, got {extents}"
                    )
                if any(e < 0 for e in extents) or sum(extents) != g.shape[p.dim]:
                    raise MetadataError(
                        f"shard_shapes {extents} do not tile global dim "
                        f"{p.dim} of extent {g.shape[p.dim]}"
                    )
        meta = (g.shape, placements, shard_shapes)
        for dst in range(mesh.world_size):
            block = _block_for(g, mesh.coords_of(dst), placements, shard_shapes)
            if dst == 0:
                mine = block
            else:
                ctx._send(dst, (meta, block))
        global_shape = g.shape
    else:
        _, (meta, mine) = ctx._recv(0, deadline)
        global_shape, placements, shard_shapes = meta
    return ShardTensor(mine, global_shape, ctx, placements, shard_shapes)


def _block_for(g: np.ndarray, coords, placements, shard_shapes) -> np.ndarray:
    index = [slice(None)] * g.ndim
    for axis, p in enumerate(placements):
        if isinstance(p, Shard):
            extents = shard_shapes[axis]
            start = sum(extents[: coords[axis]])
            index[p.dim] = slice(start, start + extents[coords[axis]])
    return np.ascontiguousarray(g[tuple(index)])


def full_tensor(st: ShardTensor) -> np.ndarray:
    """Gather the global tensor onto every rank.

    One all_gather_varlen per sharded mesh axis; a fully replicated tensor
    returns its local block with no communication.
    """
    st.validate()
    cur = st.local
    for axis, p in enumerate(st.placements):
        if isinstance(p, Shard):
            group = st.ctx.axis_group(st.mesh.axis_names[axis])
            cur = all_gather_varlen(group, cur, p.dim)
    return cur


def redistribute(st: ShardTensor, new_placements) -> ShardTensor:
    """Move to new placements.

    Shard -> Replicate gathers; Replicate -> Shard slices locally with
    default_chunk (no communication); Shard(i) -> Shard(j) gathers then
    slices. Axes whose placement is unchanged keep their sharding shapes,
    including non-default ones.
    """
    new_placements = _normalize_placements(new_placements, st.mesh.ndim, st.ndim)
    old_placements = st.placements
    if new_placements == old_placements:
        return st
    cur = st.local
    shapes = dict(st.shard_shapes)
    ctx = st.ctx
    mesh = st.mesh
    # First gather every axis that leaves its old sharded dim, then slice
    # every axis that enters a new one. Two phases so that swaps like
    # (Shard(0), Shard(1)) -> (Shard(1), Shard(0)) never slice a dim that is
    # still sharded elsewhere.
    for axis, (old, new) in enumerate(zip(old_placements, new_placements)):
        if isinstance(old, Shard) and old != new:
            group = ctx.axis_group(mesh.axis_names[axis])
            cur = all_gather_varlen(group, cur, old.dim)
            del shapes[axis]
    for axis, (old, new) in enumerate(zip(old_placements, new_placements)):
        if isinstance(new, Shard) and old != new:
            extents = default_chunk(st.global_shape[new.dim], mesh.shape[axis])
            c = ctx.coords[axis]
            start = sum(extents[:c])
            index = [slice(None)] * st.ndim
            index[new.dim] = slice(start, start + extents[c])
            cur = np.ascontiguousarray(cur[tuple(index)])
            shapes[axis] = tuple(extents)
    return ShardTensor(cur, st.global_shape, ctx, new_placements, shapes)


@dataclass(frozen=True)
class AxisBalance:
    """Load-balance summary for one sharded mesh axis."""

    axis: int
    axis_name: str
    extents: tuple[int, ...]
    ratio: float  # max extent / mean extent; 1.0 is perfectly even
    has_empty: bool


def rebalance_check(st: ShardTensor) -> list[AxisBalance]:
    """Report shard balance per sharded axis (largest/mean extent ratio and
    an empty-shard flag). Raises MetadataError if nothing is sharded."""
    if not st.shard_shapes:
        raise MetadataError("rebalance_check on a fully replicated tensor")
    out = []
    for axis in sorted(st.shard_shapes):
        extents = st.shard_shapes[axis]
        mean = sum(extents) / len(extents)
        ratio = (max(extents) / mean) if mean > 0 else 1.0
        out.append(
            AxisBalance(
                axis=axis,
                axis_name=st.mesh.axis_names[axis],
                extents=extents,
                ratio=ratio,
                has_empty=any(e == 0 for e in extents),
            )
        )
    return out


def check_replication_coherence(st: ShardTensor) -> bool:
    """Verify replicas along every Replicate axis hold bitwise-equal blocks.

    Communicates (one gather per replicated axis), so its collectives do
    count toward the rank's totals; not called from dispatch for that
    reason. Raises IntegrityError naming the diverging members.
    """
    ctx = st.ctx
    digest = hashlib.sha256(np.ascontiguousarray(st.local).tobytes()).digest()
    mine = np.frombuffer(digest[:8], dtype=np.uint64).copy()
    for axis, p in enumerate(st.placements):
        if not isinstance(p, Replicate):
            continue
        group = ctx.axis_group(st.mesh.axis_names[axis])
        if group.size == 1:
            continue
        hashes = all_gather_varlen(group, mine.reshape(1), dim=0)
        if not (hashes == hashes[0]).all():
            diverged = [int(i) for i in range(len(hashes)) if hashes[i] != hashes[0]]
            raise IntegrityError(
                f"replicas diverge along mesh axis {axis} "
                f"({st.mesh.axis_names[axis]!r}): members {diverged} differ "
                f"from member 0"
            )
    return True
