"""Mesh runtime and collective tests.

Collectives are checked against independently computed expectations (fsum,
stacked max, hand-sliced halos) and for the determinism contract: bitwise
identical results on every member and across repeat runs.
"""

import math
import time

import numpy as np
import pytest

from domainpar.errors import CollectiveError, DimensionError, HaloError, MeshError
from domainpar.mesh import (
    DEFAULT_TIMEOUT,
    TIMEOUT_ENV,
    DeviceMesh,
    all_gather_varlen,
    all_reduce,
    barrier,
    halo_exchange,
    ring_shift,
    spawn_mesh,
)


# ---------------------------------------------------------------------------
# mesh geometry


def test_mesh_coords_round_trip():
    mesh = DeviceMesh((2, 3), ("data", "domain"))
    assert mesh.world_size == 6
    assert mesh.ndim == 2
    assert mesh.rank_of((1, 1)) == 4
    assert mesh.coords_of(4) == (1, 1)
    assert mesh.coords_of(5) == (1, 2)
    for r in range(6):
        assert mesh.rank_of(mesh.coords_of(r)) == r
    assert mesh.axis_index("domain") == 1


def test_mesh_validation():
    with pytest.raises(DimensionError):
        DeviceMesh((2, 2, 2), ("a", "b", "c"))
    with pytest.raises(DimensionError):
        DeviceMesh((2, 0), ("a", "b"))
    with pytest.raises(DimensionError):
        DeviceMesh((2, 2), ("a", "a"))
    with pytest.raises(DimensionError):
        DeviceMesh((2,), ("a", "b"))
    mesh = DeviceMesh((4,), ("domain",))
    with pytest.raises(DimensionError):
        mesh.coords_of(4)
    with pytest.raises(DimensionError):
        mesh.axis_index("nope")


def test_spawn_results_ordered_by_rank():
    out = spawn_mesh((4,), ("domain",), lambda ctx: ctx.rank_id * 10, seed=7)
    assert out == [0, 10, 20, 30]


def test_ctx_identity_and_seed():
    def prog(ctx):
        assert ctx.seed == 99
        assert ctx.coords == ctx.mesh.coords_of(ctx.rank_id)
        return ctx.coords

    out = spawn_mesh((2, 2), ("data", "domain"), prog, seed=99)
    assert out == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_axis_group_members_2d():
    def prog(ctx):
        dom = ctx.axis_group("domain")
        dat = ctx.axis_group("data")
        return dom.members, dat.members, dom.index

    out = spawn_mesh((2, 3), ("data", "domain"), prog)
    # rank 4 = coords (1,1): domain group walks axis 1, data group axis 0
    assert out[4] == ((3, 4, 5), (1, 4), 1)
    assert out[0] == ((0, 1, 2), (0, 3), 0)


def test_axis_group_requires_name_on_2d_mesh():
    with pytest.raises(MeshError, match="axis_name is required"):
        spawn_mesh((2, 2), ("a", "b"), lambda ctx: ctx.axis_group())


# ---------------------------------------------------------------------------
# all_reduce


def test_all_reduce_sum_matches_fsum_and_is_identical_everywhere():
    vals = [3.1, -0.7, 1e-9, 123.456]

    def prog(ctx):
        local = np.full(5, vals[ctx.rank_id], dtype=np.float64)
        out = all_reduce(ctx.axis_group(), local, op="sum")
        assert ctx.collective_count == 1
        return out

    results = spawn_mesh((4,), ("domain",), prog)
    exact = math.fsum(vals)
    for r in results:
        assert abs(r[0] - exact) <= 1e-15 * abs(exact)
    base = results[0].tobytes()
    assert all(r.tobytes() == base for r in results)  # bitwise identical


def test_all_reduce_max():
    def prog(ctx):
        local = np.array([float(ctx.rank_id), -float(ctx.rank_id)], dtype=np.float32)
        return all_reduce(ctx.axis_group(), local, op="max")

    results = spawn_mesh((3,), ("domain",), prog)
    for r in results:
        assert np.array_equal(r, np.array([2.0, 0.0], dtype=np.float32))
        assert r.dtype == np.float32


def test_all_reduce_shape_mismatch_is_a_collective_error():
    def prog(ctx):
        local = np.zeros(2 + ctx.rank_id)
        return all_reduce(ctx.axis_group(), local)

    with pytest.raises(MeshError, match="mismatch"):
        spawn_mesh((2,), ("domain",), prog)


def test_all_reduce_bad_op():
    def prog(ctx):
        return all_reduce(ctx.axis_group(), np.zeros(1), op="min")

    with pytest.raises(MeshError, match="sum"):
        spawn_mesh((2,), ("domain",), prog)


def test_all_reduce_on_one_mesh_axis_only():
    # all_reduce over the "domain" axis must not touch the "data" axis.
    def prog(ctx):
        local = np.array([10.0 * ctx.coords[0] + ctx.coords[1]])
        return all_reduce(ctx.axis_group("domain"), local)[0]

    out = spawn_mesh((2, 2), ("data", "domain"), prog)
    assert out == [1.0, 1.0, 21.0, 21.0]


# ---------------------------------------------------------------------------
# all_gather_varlen


def test_all_gather_varlen_with_empty_shards():
    extents = (3, 0, 2, 1)
    offsets = np.cumsum((0,) + extents)
    full = np.arange(6 * 2, dtype=np.float32).reshape(6, 2)

    def prog(ctx):
        lo, hi = offsets[ctx.rank_id], offsets[ctx.rank_id + 1]
        out = all_gather_varlen(ctx.axis_group(), full[lo:hi].copy(), dim=0)
        assert ctx.collective_count == 1
        return out

    for result in spawn_mesh((4,), ("domain",), prog):
        assert result.dtype == np.float32
        assert np.array_equal(result, full)


def test_all_gather_varlen_inner_dim():
    full = np.arange(12, dtype=np.float64).reshape(3, 4)

    def prog(ctx):
        cols = [slice(0, 3), slice(3, 4)][ctx.rank_id]
        return all_gather_varlen(ctx.axis_group(), full[:, cols].copy(), dim=1)

    for result in spawn_mesh((2,), ("domain",), prog):
        assert np.array_equal(result, full)


def test_all_gather_varlen_off_dim_mismatch():
    def prog(ctx):
        return all_gather_varlen(ctx.axis_group(), np.zeros((2, 3 + ctx.rank_id)), 0)

    with pytest.raises(MeshError, match="mismatch"):
        spawn_mesh((2,), ("domain",), prog)


# ---------------------------------------------------------------------------
# ring_shift


@pytest.mark.parametrize("world", [1, 2, 5])
def test_ring_shift_cycles(world):
    def prog(ctx):
        group = ctx.axis_group()
        payload = np.array([float(ctx.rank_id)])
        once = ring_shift(group, payload)
        # after one shift every rank holds its predecessor's payload
        assert once[0] == float((ctx.rank_id - 1) % world)
        out = once
        for _ in range(world - 1):
            out = ring_shift(group, out)
        assert ctx.collective_count == world
        return out[0]

    results = spawn_mesh((world,), ("domain",), prog)
    assert results == [float(r) for r in range(world)]


# ---------------------------------------------------------------------------
# halo_exchange


def test_halo_exchange_asymmetric_widths():
    full = np.arange(20, dtype=np.float64).reshape(2, 10)
    widths = [(0, 2), (1, 0)]  # per-rank (left, right) along dim 1

    def prog(ctx):
        lo = 5 * ctx.rank_id
        local = full[:, lo : lo + 5].copy()
        lw, rw = widths[ctx.rank_id]
        out = halo_exchange(ctx.axis_group(), local, dim=1, left_width=lw, right_width=rw)
        assert ctx.collective_count == 1
        return out

    r0, r1 = spawn_mesh((2,), ("domain",), prog)
    assert np.array_equal(r0, full[:, 0:7])  # own 0..4 plus neighbor's 5,6
    assert np.array_equal(r1, full[:, 4:10])  # neighbor's 4 plus own 5..9


def test_halo_exchange_interior_rank_gets_both_sides():
    full = np.arange(12, dtype=np.float64)
    widths = [(0, 1), (2, 1), (1, 0)]

    def prog(ctx):
        lo = 4 * ctx.rank_id
        lw, rw = widths[ctx.rank_id]
        return halo_exchange(ctx.axis_group(), full[lo : lo + 4].copy(), 0, lw, rw)

    r0, r1, r2 = spawn_mesh((3,), ("domain",), prog)
    assert np.array_equal(r0, full[0:5])
    assert np.array_equal(r1, full[2:9])
    assert np.array_equal(r2, full[7:12])


def test_halo_exchange_zero_widths_are_local():
    def prog(ctx):
        local = np.full(3, float(ctx.rank_id))
        out = halo_exchange(ctx.axis_group(), local, 0, 0, 0)
        return np.array_equal(out, local)

    assert spawn_mesh((3,), ("domain",), prog) == [True, True, True]


def test_halo_exchange_single_rank():
    def prog(ctx):
        return halo_exchange(ctx.axis_group(), np.arange(4.0), 0, 0, 0)

    assert np.array_equal(spawn_mesh((1,), ("domain",), prog)[0], np.arange(4.0))


def test_halo_wider_than_neighbor_is_an_error():
    extents = (5, 2)
    widths = [(0, 3), (0, 0)]  # rank 0 wants 3 rows from rank 1's 2

    def prog(ctx):
        local = np.zeros(extents[ctx.rank_id])
        lw, rw = widths[ctx.rank_id]
        return halo_exchange(ctx.axis_group(), local, 0, lw, rw)

    with pytest.raises(MeshError) as info:
        spawn_mesh((2,), ("domain",), prog)
    msg = str(info.value)
    assert "rank 0 requested halo width 3 from rank 1" in msg
    assert "holds only 2" in msg
    assert "single-hop" in msg
    assert isinstance(info.value.failures[1], HaloError)


def test_halo_negative_width_rejected():
    def prog(ctx):
        return halo_exchange(ctx.axis_group(), np.zeros(3), 0, -1, 0)

    with pytest.raises(MeshError, match="widths must be >= 0"):
        spawn_mesh((2,), ("domain",), prog)


# ---------------------------------------------------------------------------
# barrier / failure semantics / timeout


def test_barrier_releases_after_all_arrive():
    flags = [False] * 4

    def prog(ctx):
        time.sleep(0.01 * ctx.rank_id)  # stagger arrivals
        flags[ctx.rank_id] = True
        barrier(ctx.axis_group())
        return all(flags)

    assert spawn_mesh((4,), ("domain",), prog) == [True] * 4


def test_failing_rank_aborts_the_mesh_and_is_named():
    def prog(ctx):
        if ctx.rank_id == 2:
            raise ValueError("injected fault")
        barrier(ctx.axis_group())  # would wait on rank 2 forever

    t0 = time.monotonic()
    with pytest.raises(MeshError) as info:
        spawn_mesh((3,), ("domain",), prog)
    elapsed = time.monotonic() - t0
    msg = str(info.value)
    assert "1 rank(s) failed" in msg
    assert "rank 2" in msg and "injected fault" in msg
    assert isinstance(info.value.failures[2], ValueError)
    assert elapsed < 10.0  # unwound via abort flag, not the 30s timeout


def test_peer_that_finished_without_sending_fails_fast():
    def prog(ctx):
        if ctx.rank_id == 1:
            return None  # exits without joining the collective
        return all_reduce(ctx.axis_group(), np.zeros(2))

    t0 = time.monotonic()
    with pytest.raises(MeshError, match="finished without sending"):
        spawn_mesh((2,), ("domain",), prog)
    assert time.monotonic() - t0 < 10.0


def test_receive_timeout_fires():
    def prog(ctx):
        if ctx.rank_id == 1:
            time.sleep(1.0)  # alive but silent
            return None
        return all_reduce(ctx.axis_group(), np.zeros(1))

    with pytest.raises(MeshError, match="timed out"):
        spawn_mesh((2,), ("domain",), prog, timeout=0.2)


def test_timeout_env_var_is_honored(monkeypatch):
    monkeypatch.setenv(TIMEOUT_ENV, "0.2")

    def prog(ctx):
        assert ctx.runtime.timeout == 0.2
        if ctx.rank_id == 1:
            time.sleep(1.0)
            return None
        return all_reduce(ctx.axis_group(), np.zeros(1))

    t0 = time.monotonic()
    with pytest.raises(MeshError, match="timed out"):
        spawn_mesh((2,), ("domain",), prog)
    assert time.monotonic() - t0 < 5.0


def test_timeout_default_and_bad_env(monkeypatch):
    monkeypatch.delenv(TIMEOUT_ENV, raising=False)

    def prog(ctx):
        return ctx.runtime.timeout

    assert spawn_mesh((1,), ("domain",), prog) == [DEFAULT_TIMEOUT]
    monkeypatch.setenv(TIMEOUT_ENV, "soon")
    with pytest.raises(DimensionError, match="not a number"):
        spawn_mesh((1,), ("domain",), prog)


def test_collectives_are_deterministic_across_runs():
    def prog(ctx):
        rng = np.random.default_rng([ctx.seed, ctx.rank_id])
        local = rng.standard_normal(64).astype(np.float32)
        summed = all_reduce(ctx.axis_group(), local)
        gathered = all_gather_varlen(ctx.axis_group(), local[: ctx.rank_id + 1], 0)
        return summed.tobytes(), gathered.tobytes()

    first = spawn_mesh((4,), ("domain",), prog, seed=13)
    second = spawn_mesh((4,), ("domain",), prog, seed=13)
    assert first == second
    assert len({s for s, _ in first}) == 1  # one reduce result, all ranks
