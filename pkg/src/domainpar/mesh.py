"""Simulated device mesh and deterministic collectives.

A mesh run spawns one thread per rank inside the current process. Ranks talk
over per-pair FIFO queues: sends are buffered and never block, receives block
with a poll loop, so the only rendezvous points are the collectives below.
Every message carries an explicit (shape, dtype) header ahead of the payload;
receivers validate against the header and never infer sizes by probing.

Determinism contract: with a fixed seed and rank program, every collective
returns bitwise-identical results on all group members and across repeat
runs. all_reduce achieves this by gathering all contributions and folding
them locally in member order on every rank (O(R^2) messages; the envelope is
R <= 8, so simplicity wins over a reduction tree).

Failure handling: the first rank to raise flips a shared abort flag; every
blocked receive notices within one poll interval and unwinds. A receive also
fails fast when the sending rank has already finished, and gives up after a
configurable timeout (DP_COLLECTIVE_TIMEOUT_SECS, default 30 s) so a lost
peer can never hang the host process. spawn_mesh re-raises one MeshError
naming the originally failing rank(s).
"""

from __future__ import annotations

import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import CollectiveError, DimensionError, HaloError, MeshError

TIMEOUT_ENV = "DP_COLLECTIVE_TIMEOUT_SECS"
DEFAULT_TIMEOUT = 30.0
_POLL_SECS = 0.002

REDUCE_OPS = ("sum", "max")


class _PeerFailure(CollectiveError):
    """Raised on ranks unwound because some other rank failed first."""


@dataclass(frozen=True)
class DeviceMesh:
    """A 1-D or 2-D grid of ranks with named axes, numbered row-major."""

    shape: tuple[int, ...]
    axis_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "axis_names", tuple(self.axis_names))
        if not 1 <= len(self.shape) <= 2:
            raise DimensionError(
                f"mesh must have 1 or 2 axes, got shape {self.shape}"
            )
        if any(s < 1 for s in self.shape):
            raise DimensionError(f"mesh axis extents must be >= 1, got {self.shape}")
        if len(self.axis_names) != len(self.shape):
            raise DimensionError(
                f"{len(self.axis_names)} axis names for {len(self.shape)} axes"
            )
        if len(set(self.axis_names)) != len(self.axis_names):
            raise DimensionError(f"duplicate mesh axis names {self.axis_names}")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def world_size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def axis_index(self, name: str) -> int:
        try:
            return self.axis_names.index(name)
        except ValueError:
            raise DimensionError(
                f"no mesh axis named {name!r}; have {self.axis_names}"
            ) from None

    def coords_of(self, rank_id: int) -> tuple[int, ...]:
        if not 0 <= rank_id < self.world_size:
            raise DimensionError(f"rank {rank_id} out of range for mesh {self.shape}")
        coords = []
        rem = rank_id
        for extent in reversed(self.shape):
            coords.append(rem % extent)
            rem //= extent
        return tuple(reversed(coords))

    def rank_of(self, coords) -> int:
        coords = tuple(coords)
        if len(coords) != self.ndim:
            raise DimensionError(f"coords {coords} for {self.ndim}-D mesh")
        rank = 0
        for c, extent in zip(coords, self.shape):
            if not 0 <= c < extent:
                raise DimensionError(f"coords {coords} out of mesh {self.shape}")
            rank = rank * extent + c
        return rank


class _Runtime:
    """Shared state for one spawn_mesh invocation."""

    def __init__(self, mesh: DeviceMesh, seed: int, timeout: float):
        self.mesh = mesh
        self.seed = seed
        self.timeout = timeout
        n = mesh.world_size
        self.channels = {
            (src, dst): queue.SimpleQueue() for src in range(n) for dst in range(n)
        }
        self.done = [threading.Event() for _ in range(n)]
        self.abort = threading.Event()


def _header_of(payload):
    if isinstance(payload, np.ndarray):
        return ("tensor", payload.shape, payload.dtype.str)
    return ("object", type(payload).__name__)


@dataclass
class RankContext:
    """Per-rank handle passed to the rank program.

    Carries identity (rank_id, coords), the mesh, the run seed, and two
    bookkeeping fields the dispatch layer uses: a monotonically increasing
    collective_count and a bounded trace ring buffer.
    """

    runtime: _Runtime
    rank_id: int

    coords: tuple[int, ...] = field(init=False)
    collective_count: int = field(init=False, default=0)
    trace: deque = field(init=False)

    def __post_init__(self):
        self.coords = self.runtime.mesh.coords_of(self.rank_id)
        self.trace = deque(maxlen=1024)
        self._groups: dict[str, AxisGroup] = {}

    @property
    def mesh(self) -> DeviceMesh:
        return self.runtime.mesh

    @property
    def seed(self) -> int:
        return self.runtime.seed

    def axis_group(self, axis_name: str | None = None) -> "AxisGroup":
        """Group of ranks sharing all coords except the named axis.

        On a 1-D mesh the name may be omitted.
        """
        mesh = self.mesh
        if axis_name is None:
            if mesh.ndim != 1:
                raise DimensionError("axis_name is required on a 2-D mesh")
            axis_name = mesh.axis_names[0]
        if axis_name not in self._groups:
            self._groups[axis_name] = AxisGroup(self, axis_name)
        return self._groups[axis_name]

    def _deadline(self) -> float:
        return time.monotonic() + self.runtime.timeout

    def _send(self, dst: int, payload) -> None:
        self.runtime.channels[(self.rank_id, dst)].put((_header_of(payload), payload))

    def _recv(self, src: int, deadline: float):
        rt = self.runtime
        chan = rt.channels[(src, self.rank_id)]
        while True:
            try:
                header, payload = chan.get(timeout=_POLL_SECS)
                return header, payload
            except queue.Empty:
                pass
            if rt.abort.is_set():
                raise _PeerFailure(
                    f"rank {self.rank_id}: unwinding, another rank failed"
                )
            if rt.done[src].is_set() and chan.empty():
                raise CollectiveError(
                    f"rank {self.rank_id}: rank {src} finished without sending"
                )
            if time.monotonic() > deadline:
                raise CollectiveError(
                    f"rank {self.rank_id}: timed out after {rt.timeout:.3g}s "
                    f"waiting for rank {src}"
                )


class AxisGroup:
    """The ranks along one mesh axis, in coordinate order."""

    def __init__(self, ctx: RankContext, axis_name: str):
        self.ctx = ctx
        self.axis_name = axis_name
        mesh = ctx.mesh
        self.axis = mesh.axis_index(axis_name)
        coords = list(ctx.coords)
        members = []
        for c in range(mesh.shape[self.axis]):
            coords[self.axis] = c
            members.append(mesh.rank_of(coords))
        self.members = tuple(members)
        self.index = self.members.index(ctx.rank_id)

    @property
    def size(self) -> int:
        return len(self.members)

    def __repr__(self):
        return f"AxisGroup(axis={self.axis_name!r}, members={self.members})"


def _exchange_all(group: AxisGroup, payload, deadline: float) -> list:
    """Send payload to every other member; return all payloads with headers,
    ordered by member index."""
    ctx = group.ctx
    me = group.index
    for i, rank in enumerate(group.members):
        if i != me:
            ctx._send(rank, payload)
    out = []
    for i, rank in enumerate(group.members):
        if i == me:
            out.append((_header_of(payload), payload))
        else:
            out.append(ctx._recv(rank, deadline))
    return out


def _require_tensor(op: str, header, member: int):
    if header[0] != "tensor":
        raise CollectiveError(f"{op}: member {member} sent a non-tensor payload")
    return header[1], header[2]  # shape, dtype string


def all_reduce(group: AxisGroup, local: np.ndarray, op: str = "sum") -> np.ndarray:
    """Reduce across the group; bitwise-identical result on every member.

    op is "sum" or "max". All contributions must share shape and dtype.
    """
    if op not in REDUCE_OPS:
        raise DimensionError(f"all_reduce op must be one of {REDUCE_OPS}, got {op!r}")
    ctx = group.ctx
    ctx.collective_count += 1
    deadline = ctx._deadline()
    parts = _exchange_all(group, local, deadline)
    shape0, dtype0 = _require_tensor("all_reduce", parts[0][0], 0)
    for i, (header, _) in enumerate(parts):
        shape, dtype = _require_tensor("all_reduce", header, i)
        if shape != shape0 or dtype != dtype0:
            raise CollectiveError(
                f"all_reduce contribution mismatch: member 0 has {shape0} "
                f"{dtype0}, member {i} has {shape} {dtype}"
            )
    acc = parts[0][1].copy()
    for _, payload in parts[1:]:
        if op == "sum":
            np.add(acc, payload, out=acc)
        else:
            np.maximum(acc, payload, out=acc)
    return acc


def all_gather_varlen(group: AxisGroup, local: np.ndarray, dim: int) -> np.ndarray:
    """Concatenate every member's tensor along dim, in member order.

    Extents along dim may differ per member (zero included); all other
    extents and the dtype must match.
    """
    if not 0 <= dim < local.ndim:
        raise DimensionError(f"gather dim {dim} out of range for shape {local.shape}")
    ctx = group.ctx
    ctx.collective_count += 1
    deadline = ctx._deadline()
    parts = _exchange_all(group, local, deadline)
    shape0, dtype0 = _require_tensor("all_gather_varlen", parts[0][0], 0)
    rest0 = tuple(s for a, s in enumerate(shape0) if a != dim)
    for i, (header, _) in enumerate(parts):
        shape, dtype = _require_tensor("all_gather_varlen", header, i)
        rest = tuple(s for a, s in enumerate(shape) if a != dim)
        if len(shape) != len(shape0) or rest != rest0 or dtype != dtype0:
            raise CollectiveError(
                f"all_gather_varlen mismatch off dim {dim}: member 0 has "
                f"{shape0} {dtype0}, member {i} has {shape} {dtype}"
            )
    return np.concatenate([payload for _, payload in parts], axis=dim)


def ring_shift(group: AxisGroup, payload: np.ndarray) -> np.ndarray:
    """Send to the next member, receive from the previous (wrapping)."""
    ctx = group.ctx
    ctx.collective_count += 1
    r = group.size
    if r == 1:
        return payload
    deadline = ctx._deadline()
    ctx._send(group.members[(group.index + 1) % r], payload)
    _, received = ctx._recv(group.members[(group.index - 1) % r], deadline)
    return received


def halo_exchange(
    group: AxisGroup,
    local: np.ndarray,
    dim: int,
    left_width: int,
    right_width: int,
) -> np.ndarray:
    """Extend local with edge slices from the adjacent members along dim.

    Widths are per-rank: left_width rows come from the previous member's
    right edge, right_width from the next member's left edge. The group is
    not periodic, so the first member gets no left halo and the last no
    right halo. Each member first sends its requested widths, then serves
    the widths requested of it; a request wider than the holder's extent is
    a HaloError (halos are single-hop, never forwarded).
    """
    if not 0 <= dim < local.ndim:
        raise DimensionError(f"halo dim {dim} out of range for shape {local.shape}")
    if left_width < 0 or right_width < 0:
        raise DimensionError(
            f"halo widths must be >= 0, got ({left_width}, {right_width})"
        )
    ctx = group.ctx
    ctx.collective_count += 1
    deadline = ctx._deadline()
    i = group.index
    left = group.members[i - 1] if i > 0 else None
    right = group.members[i + 1] if i < group.size - 1 else None

    if left is not None:
        ctx._send(left, np.asarray(left_width))
    if right is not None:
        ctx._send(right, np.asarray(right_width))

    # What the neighbors want from me: the previous member's right halo is my
    # left edge, the next member's left halo is my right edge.
    want_left_edge = int(ctx._recv(left, deadline)[1]) if left is not None else 0
    want_right_edge = int(ctx._recv(right, deadline)[1]) if right is not None else 0
    extent = local.shape[dim]
    if want_left_edge > extent:
        raise HaloError(
            f"rank {left} requested halo width {want_left_edge} from rank "
            f"{ctx.rank_id}, which holds only {extent} along dim {dim} "
            f"(halos are single-hop)"
        )
    if want_right_edge > extent:
        raise HaloError(
            f"rank {right} requested halo width {want_right_edge} from rank "
            f"{ctx.rank_id}, which holds only {extent} along dim {dim} "
            f"(halos are single-hop)"
        )

    index = [slice(None)] * local.ndim
    if left is not None and want_left_edge > 0:
        index[dim] = slice(0, want_left_edge)
        ctx._send(left, np.ascontiguousarray(local[tuple(index)]))
    if right is not None and want_right_edge > 0:
        index[dim] = slice(extent - want_right_edge, extent)
        ctx._send(right, np.ascontiguousarray(local[tuple(index)]))

    pieces = []
    if left is not None and left_width > 0:
        pieces.append(ctx._recv(left, deadline)[1])
    pieces.append(local)
    if right is not None and right_width > 0:
        pieces.append(ctx._recv(right, deadline)[1])
    if len(pieces) == 1:
        return local
    return np.concatenate(pieces, axis=dim)


def barrier(group: AxisGroup) -> None:
    """Block until every group member has arrived."""
    ctx = group.ctx
    ctx.collective_count += 1
    deadline = ctx._deadline()
    root = group.members[0]
    token = np.asarray(ctx.rank_id)
    if group.index == 0:
        for rank in group.members[1:]:
            ctx._recv(rank, deadline)
        for rank in group.members[1:]:
            ctx._send(rank, token)
    else:
        ctx._send(root, token)
        ctx._recv(root, deadline)


def _resolve_timeout(timeout: float | None) -> float:
    if timeout is not None:
        return float(timeout)
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is not None:
        try:
            return float(raw)
        except ValueError:
            raise DimensionError(
                f"{TIMEOUT_ENV}={raw!r} is not a number"
            ) from None
    return DEFAULT_TIMEOUT


def spawn_mesh(shape, axis_names, fn, *, seed: int = 0, timeout: float | None = None):
    """Run fn(ctx) on every rank of a fresh mesh; return results by rank_id.

    Any rank raising aborts the others, and the first failure(s) surface as
    one MeshError naming the rank. timeout (seconds) bounds every receive;
    None means DP_COLLECTIVE_TIMEOUT_SECS or 30.
    """
    mesh = DeviceMesh(tuple(shape), tuple(axis_names))
    runtime = _Runtime(mesh, seed, _resolve_timeout(timeout))
    n = mesh.world_size
    results: list = [None] * n
    failures: dict[int, BaseException] = {}
    lock = threading.Lock()

    def worker(rank_id: int):
        ctx = RankContext(runtime, rank_id)
        try:
            results[rank_id] = fn(ctx)
        except BaseException as exc:  # noqa: BLE001 - re-raised via MeshError
            with lock:
                failures[rank_id] = exc
            runtime.abort.set()
        finally:
            runtime.done[rank_id].set()

    threads = [
        threading.Thread(target=worker, args=(r,), name=f"mesh-rank-{r}")
        for r in range(n)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if failures:
        primaries = {
            r: e for r, e in failures.items() if not isinstance(e, _PeerFailure)
        }
        if not primaries:
            primaries = failures
        detail = "; ".join(
            f"rank {r}: {type(e).__name__}: {e}" for r, e in sorted(primaries.items())
        )
        err = MeshError(
            f"{len(primaries)} rank(s) failed: {detail}", failures=failures
        )
        raise err from next(iter(primaries.values()))
    return results
