"""Operation dispatch for ShardTensor arguments.

Three registries, consulted in strict precedence order:

  function        wholesale replacements, tried first
  named_function  mid-level named ops (e.g. ring attention)
  aten_like       kernel-grain ops (add, matmul, conv, ...)

A miss at every level falls back to the dense path: gather every ShardTensor
argument, run the registered dense reference implementation, and re-scatter
the result along the dims the first ShardTensor argument was sharded on
(default_chunk of the new global extent; every rank holds the full result,
so re-scattering is a local slice). Correct for any op, pays full gather
cost; the trace makes that cost visible.

Every dispatched call appends one record to the rank's bounded trace ring
buffer: op name, the level that served it (or "fallback"), and how many
collective calls it issued. Results are promoted to ShardTensors and their
metadata re-validated before they are returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import DomainParError, UnsupportedOperationError
from .mesh import RankContext
from .sharding import (
    Replicate,
    Shard,
    ShardTensor,
    default_chunk,
    full_tensor,
    replicated,
)

LEVELS = ("function", "named_function", "aten_like")
FALLBACK = "fallback"

Handler = Callable[..., Any]


@dataclass(frozen=True)
class OpKey:
    """Registry key: a dispatch level plus an op name."""

    level: str
    name: str

    def __post_init__(self):
        if self.level not in LEVELS:
            raise UnsupportedOperationError(
                f"unknown dispatch level {self.level!r}; expected one of {LEVELS}"
            )


@dataclass(frozen=True)
class TraceRecord:
    op: str
    level: str
    collectives: int

    def line(self) -> str:
        return f"op={self.op} level={self.level} collectives={self.collectives}"


class DispatchTable:
    """Mutable mapping of OpKey -> handler with precedence-ordered lookup."""

    def __init__(self):
        self._handlers: dict[OpKey, Handler] = {}

    def register(self, level: str, name: str, impl: Handler) -> Handler | None:
        """Install impl, returning whatever handler it replaced (or None)."""
        key = OpKey(level, name)
        prev = self._handlers.get(key)
        self._handlers[key] = impl
        return prev

    def remove(self, level: str, name: str) -> Handler | None:
        return self._handlers.pop(OpKey(level, name), None)

    def lookup(self, name: str) -> tuple[str, Handler] | None:
        """Highest-precedence handler for name, or None."""
        for level in LEVELS:
            impl = self._handlers.get(OpKey(level, name))
            if impl is not None:
                return level, impl
        return None

    def copy(self) -> "DispatchTable":
        table = DispatchTable()
        table._handlers = dict(self._handlers)
        return table

    def registered(self) -> list[OpKey]:
        return sorted(self._handlers, key=lambda k: (LEVELS.index(k.level), k.name))


DEFAULT_TABLE = DispatchTable()

# Dense reference implementations on plain ndarrays, keyed by the same op
# names as the dispatch registries. The fallback path and several tests use
# these as the ground truth.
DENSE_REFERENCE: dict[str, Handler] = {}


def register_handler(level: str, name: str, impl: Handler,
                     table: DispatchTable | None = None) -> Handler | None:
    """Register into table (default: the process-wide table); returns the
    replaced handler, so callers can restore it."""
    return (table or DEFAULT_TABLE).register(level, name, impl)


def register_dense_reference(name: str, impl: Handler) -> Handler | None:
    prev = DENSE_REFERENCE.get(name)
    DENSE_REFERENCE[name] = impl
    return prev


def _find_ctx(args, kwargs) -> RankContext:
    for a in list(args) + list(kwargs.values()):
        if isinstance(a, ShardTensor):
            return a.ctx
    raise TypeError("dispatch_operation needs at least one ShardTensor argument")


def promote_result(value, ctx: RankContext):
    """Wrap stray dense results as replicated ShardTensors.

    ShardTensors pass through untouched (promotion is idempotent); tuples and
    lists are promoted elementwise; non-tensor values are returned as-is.
    """
    if isinstance(value, ShardTensor):
        return value
    if isinstance(value, np.ndarray):
        return replicated(ctx, value)
    if isinstance(value, tuple):
        return tuple(promote_result(v, ctx) for v in value)
    if isinstance(value, list):
        return [promote_result(v, ctx) for v in value]
    return value


def _validate_result(value) -> None:
    if isinstance(value, ShardTensor):
        value.validate()
    elif isinstance(value, (tuple, list)):
        for v in value:
            _validate_result(v)


def fallback_dispatch(name: str, *args, **kwargs):
    """Gather -> dense reference -> re-scatter. See module docstring."""
    dense_fn = DENSE_REFERENCE.get(name)
    if dense_fn is None:
        raise UnsupportedOperationError(
            f"op {name!r}: no handler at any level and no dense reference"
        )
    tensors = [a for a in list(args) + list(kwargs.values())
               if isinstance(a, ShardTensor)]
    if not tensors:
        return dense_fn(*args, **kwargs)
    ref = tensors[0]
    ctx = ref.ctx
    dense_args = [full_tensor(a) if isinstance(a, ShardTensor) else a for a in args]
    dense_kwargs = {
        k: full_tensor(v) if isinstance(v, ShardTensor) else v
        for k, v in kwargs.items()
    }
    out = dense_fn(*dense_args, **dense_kwargs)
    sharded_dims = [
        (axis, p.dim) for axis, p in enumerate(ref.placements) if isinstance(p, Shard)
    ]

    def rescatter(arr):
        if not isinstance(arr, np.ndarray):
            return arr
        placements: list = [Replicate()] * ctx.mesh.ndim
        shapes: dict[int, tuple[int, ...]] = {}
        index = [slice(None)] * arr.ndim
        for axis, dim in sharded_dims:
            if dim >= arr.ndim:
                continue  # the op dropped this dim; leave the axis replicated
            extents = default_chunk(arr.shape[dim], ctx.mesh.shape[axis])
            c = ctx.coords[axis]
            start = sum(extents[:c])
            index[dim] = slice(start, start + extents[c])
            placements[axis] = Shard(dim)
            shapes[axis] = tuple(extents)
        local = np.ascontiguousarray(arr[tuple(index)])
        return ShardTensor(local, arr.shape, ctx, placements, shapes)

    if isinstance(out, tuple):
        return tuple(rescatter(o) for o in out)
    if isinstance(out, list):
        return [rescatter(o) for o in out]
    return rescatter(out)


def dispatch_operation(name: str, *args, table: DispatchTable | None = None,
                       **kwargs):
    """Route op `name` to the best registered handler (or the fallback),
    promote and validate the result, and append a trace record."""
    ctx = _find_ctx(args, kwargs)
    table = table or DEFAULT_TABLE
    before = ctx.collective_count
    hit = table.lookup(name)
    try:
        if hit is not None:
            level, impl = hit
            result = impl(*args, **kwargs)
        else:
            level = FALLBACK
            result = fallback_dispatch(name, *args, **kwargs)
    except DomainParError as exc:
        raise type(exc)(f"op {name!r}: {exc}") from exc
    result = promote_result(result, ctx)
    _validate_result(result)
    ctx.trace.append(
        TraceRecord(op=name, level=level, collectives=ctx.collective_count - before)
    )
    return result


def trace_lines(ctx: RankContext) -> list[str]:
    """Render the rank's trace ring buffer, oldest first."""
    return [r.line() for r in ctx.trace if isinstance(r, TraceRecord)]
