"""Micro-tile derivation, cover counting, and kernel plan selection.

A plan pairs a dense tile with one permutable axis of the sparse operand.
The micro-tile is the tile's sparse-operand projection with extent 1
along that axis, so surviving data can be gathered strip by strip into
the tile buffer. Selection enumerates every (tile, axis) pair plus the
plain dense tiling, prices each one as
``launches(sample coverage) * profiled tile cost`` summed over the
sparsity samples, and returns the cheapest. Ties go to the dense plan,
then the larger tile, then the lexicographically smallest impl id, so
selection is a pure deterministic function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .expr import TensorExpr, operator_kind, pit_axes
from .index import _pit_dim
from .sparsity import SparsityAnnotation
from .tiles import COL_MAJOR, ROW_MAJOR, KernelRegistry, ProfileTable, TileKernelDescriptor

DENSE = "dense"

# Default tiles for forced plans when no profile is consulted.
DEFAULT_TILES = {"matmul": (32, 64, 32), "reduce_sum": (16, 64)}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SparseKernelPlan:
    op_kind: str
    pit_axis: str  # permuted axis symbol, or "dense"
    micro_tile: Optional[tuple[int, int]]
    tile: TileKernelDescriptor
    tile_cost: float  # seconds per tile launch
    estimated_cost: float  # mean modelled seconds per sample
    sparse_layout: str  # required memory layout of the sparse operand
    extents: Mapping[str, int]

    @property
    def is_dense(self) -> bool:
        return self.pit_axis == DENSE


@dataclass(frozen=True)
class PlanCandidate:
    plan: SparseKernelPlan
    total_micro_tiles: int
    total_launches: int
    total_cost: float


def sparse_operand_axes(op_kind: str) -> tuple[str, str]:
    """Axis symbols of the sparse operand (the first input), in order."""
    if op_kind == "matmul":
        return ("m", "k")
    if op_kind == "reduce_sum":
        return ("p", "l")
    raise PlanError(f"op kind {op_kind!r} is not plannable (matmul and reduce_sum only)")


def get_micro_tile(
    op_kind: str,
    tile_shape: Sequence[int],
    pit_axis: str,
    sparse_layout: str = ROW_MAJOR,
) -> tuple[tuple[int, int], str]:
    """Micro-tile shape over the sparse operand, plus the operand layout
    the plan requires.

    The tile is projected onto the sparse operand and the permuted axis
    extent drops to 1. Strips must be contiguous in memory, so the
    permuted axis has to be the strided one: leading-axis plans need
    row-major data, trailing-axis plans need column-major, and a plan
    whose requirement differs from ``sparse_layout`` records the change
    rather than hiding it.

    For reduce_sum along ``l`` the orthogonal extent collapses too: the
    removed prevalent axis lets every row carry its own gather order, so
    the covering unit is a single block per row.
    """
    tile_shape = tuple(int(d) for d in tile_shape)
    axes = sparse_operand_axes(op_kind)
    if pit_axis not in axes:
        raise PlanError(f"axis {pit_axis!r} is not on the sparse operand of {op_kind}")
    if op_kind == "matmul":
        m, k, _ = tile_shape
        proj = (m, k)
    else:
        proj = tile_shape
    dim = axes.index(pit_axis)
    if op_kind == "reduce_sum" and pit_axis == "l":
        micro = (1, 1)
        required = ROW_MAJOR
    else:
        micro = tuple(1 if i == dim else proj[i] for i in range(2))
        required = ROW_MAJOR if dim == 0 else COL_MAJOR
    return micro, required  # type: ignore[return-value]


def _micro_occupancy(ann: SparsityAnnotation, micro_tile: tuple[int, int]) -> np.ndarray:
    """Non-zero flag per grid-anchored micro-tile, via prefix sums over
    the block grid (handles micro edges that straddle block boundaries)."""
    t0, t1 = micro_tile
    g0, g1 = ann.granularity
    s0, s1 = ann.tensor_shape
    grid0, grid1 = -(-s0 // t0), -(-s1 // t1)
    counts = ann.bits().astype(np.int32)

    def pool(c: np.ndarray, n_micro: int, t: int, g: int, extent: int) -> np.ndarray:
        i = np.arange(n_micro)
        lo = (i * t) // g
        hi = -(-np.minimum((i + 1) * t, extent) // g)
        prefix = np.concatenate([np.zeros((1,) + c.shape[1:], dtype=np.int32), np.cumsum(c, axis=0, dtype=np.int32)])
        return prefix[hi] - prefix[lo]

    pooled = pool(counts, grid0, t0, g0, s0)
    pooled = pool(pooled.T, grid1, t1, g1, s1).T
    return pooled > 0


def cover_group_counts(
    ann: SparsityAnnotation, micro_tile, pit_axis: Union[str, int]
) -> np.ndarray:
    """Surviving micro-tiles per dense-tile slot (per position along the
    non-permuted grid)."""
    dim = _pit_dim(pit_axis)
    occ = _micro_occupancy(ann, tuple(int(t) for t in micro_tile))
    return occ.sum(axis=dim, dtype=np.int64)


def cover_count(ann: SparsityAnnotation, micro_tile, pit_axis: Union[str, int] = 0) -> int:
    """Number of grid-anchored micro-tiles overlapping any non-zero
    block. The total is orientation-independent; the axis argument only
    mirrors the selection loop's call shape."""
    _pit_dim(pit_axis)
    return int(_micro_occupancy(ann, tuple(int(t) for t in micro_tile)).sum())


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _dense_launches(plan: SparseKernelPlan) -> int:
    ext = plan.extents
    if plan.op_kind == "matmul":
        m_, k_, n_ = plan.tile.tile_shape
        return _ceil_div(ext["m"], m_) * _ceil_div(ext["k"], k_) * _ceil_div(ext["n"], n_)
    p_, l_ = plan.tile.tile_shape
    return _ceil_div(ext["p"], p_) * _ceil_div(ext["l"], l_)


def plan_launches(plan: SparseKernelPlan, ann: Optional[SparsityAnnotation]) -> int:
    """Tile launches the plan needs to cover one sample.

    Each launch consumes a full chunk of survivors along the permuted
    axis (the tile's extent on that axis, short chunks padded with
    zeros) and is repeated over the grids of axes the sparse operand
    does not carry (the N sweep for matmul).
    """
    if plan.is_dense:
        return _dense_launches(plan)
    assert ann is not None and plan.micro_tile is not None
    axes = sparse_operand_axes(plan.op_kind)
    dim = axes.index(plan.pit_axis) if plan.pit_axis in axes else 0
    counts = cover_group_counts(ann, plan.micro_tile, dim)
    if plan.op_kind == "matmul":
        m_, k_, n_ = plan.tile.tile_shape
        chunk = m_ if plan.pit_axis == "m" else k_
        orth = _ceil_div(plan.extents["n"], n_)
        return int(np.sum(-(-counts // chunk))) * orth
    p_, l_ = plan.tile.tile_shape
    if plan.pit_axis == "p":
        return int(np.sum(-(-counts // p_)))
    # per-row gather: rows are batched p_ at a time, each row feeding its
    # own survivor chunks of length l_
    return _ceil_div(int(np.sum(-(-counts // l_))), p_)


def estimate_plan_cost(plan: SparseKernelPlan, ann: Optional[SparsityAnnotation]) -> float:
    """Modelled seconds for one sample: launches times profiled tile cost."""
    if not plan.is_dense and ann is not None:
        sparse_shape = sparse_operand_shape(plan.op_kind, plan.extents)
        if tuple(ann.tensor_shape) != sparse_shape:
            raise PlanError(
                f"annotation shape {ann.tensor_shape} does not match operand {sparse_shape}"
            )
    return plan_launches(plan, ann) * plan.tile_cost


def sparse_operand_shape(op_kind: str, extents: Mapping[str, int]) -> tuple[int, int]:
    a0, a1 = sparse_operand_axes(op_kind)
    return (extents[a0], extents[a1])


def _candidate(
    expr_extents: Mapping[str, int],
    op_kind: str,
    tile: TileKernelDescriptor,
    pit_axis: str,
    tile_cost: float,
    samples: Sequence[SparsityAnnotation],
) -> PlanCandidate:
    if pit_axis == DENSE:
        plan = SparseKernelPlan(
            op_kind, DENSE, None, tile, tile_cost, 0.0, ROW_MAJOR, dict(expr_extents)
        )
        per_sample = _dense_launches(plan)
        n = max(len(samples), 1)
        launches = per_sample * len(samples) if samples else per_sample
        total_cost = launches * tile_cost
        plan = replace(plan, estimated_cost=total_cost / n)
        grid = per_sample  # dense covers the full grid each launch sweep
        return PlanCandidate(plan, grid * max(len(samples), 1), launches, total_cost)
    micro, layout = get_micro_tile(op_kind, tile.tile_shape, pit_axis)
    plan = SparseKernelPlan(
        op_kind, pit_axis, micro, tile, tile_cost, 0.0, layout, dict(expr_extents)
    )
    total_cost = 0.0
    launches = 0
    micro_tiles = 0
    for ann in samples:
        total_cost += estimate_plan_cost(plan, ann)
        launches += plan_launches(plan, ann)
        micro_tiles += cover_count(ann, micro, pit_axis)
    plan = replace(plan, estimated_cost=total_cost / max(len(samples), 1))
    return PlanCandidate(plan, micro_tiles, launches, total_cost)


def _tie_key(c: PlanCandidate):
    return (c.total_cost, 0 if c.plan.is_dense else 1, -c.plan.tile.flops, c.plan.tile.impl_id)


def selection_candidates(
    expr: TensorExpr,
    samples: Sequence[SparsityAnnotation],
    registry: KernelRegistry,
    profile: ProfileTable,
    allow_dense: bool = True,
) -> list[PlanCandidate]:
    """Every costed (tile, axis) plan plus the dense fallbacks, in the
    deterministic preference order used by :func:`kernel_selection`."""
    op_kind = operator_kind(expr)
    if op_kind not in ("matmul", "reduce_sum"):
        raise PlanError(f"selection supports matmul and reduce_sum, got {op_kind}")
    extents = {s: expr.extent(s) for s in expr.symbols()}
    tiles = sorted(registry.by_op(op_kind), key=lambda d: d.impl_id)
    if not tiles:
        raise PlanError(f"registry has no {op_kind} tiles")
    operand_shape = sparse_operand_shape(op_kind, extents)
    for ann in samples:
        if tuple(ann.tensor_shape) != operand_shape:
            raise PlanError(
                f"sample shape {ann.tensor_shape} does not match operand {operand_shape}"
            )
    axes = [a for a in sparse_operand_axes(op_kind) if a in pit_axes(expr)]
    if not axes and not allow_dense:
        raise PlanError("no applicable permuted axis and dense fallback disabled")
    cands: list[PlanCandidate] = []
    for tile in tiles:
        cost = profile.cost(tile)
        if samples:
            for axis in axes:
                cands.append(_candidate(extents, op_kind, tile, axis, cost, samples))
        if allow_dense:
            cands.append(_candidate(extents, op_kind, tile, DENSE, cost, samples))
    if not cands:
        raise PlanError("no viable plan candidates")
    return sorted(cands, key=_tie_key)


def kernel_selection(
    expr: TensorExpr,
    samples: Sequence[SparsityAnnotation],
    registry: KernelRegistry,
    profile: ProfileTable,
    allow_dense: bool = True,
) -> SparseKernelPlan:
    """Pick the cheapest plan over the sparsity samples.

    Scaling every profiled cost by a positive constant cannot change the
    winner, and all-dense samples fall back to the plain dense tiling
    through the tie-break.
    """
    return selection_candidates(expr, samples, registry, profile, allow_dense)[0].plan


def forced_plan(
    expr: TensorExpr,
    pit_axis: str,
    registry: KernelRegistry,
    profile: Optional[ProfileTable] = None,
    tile_shape: Optional[Sequence[int]] = None,
) -> SparseKernelPlan:
    """Build a plan for an explicitly chosen axis (or "dense") without
    running selection. Uses the op's default tile unless one is given."""
    op_kind = operator_kind(expr)
    if op_kind not in DEFAULT_TILES:
        raise PlanError(f"cannot execute op kind {op_kind!r}")
    shape = tuple(tile_shape) if tile_shape is not None else DEFAULT_TILES[op_kind]
    tile = registry.get(op_kind, shape)
    if tile is None:
        raise PlanError(f"no registered {op_kind} tile {shape}")
    cost = profile.cost(tile) if profile is not None else 0.0
    extents = {s: expr.extent(s) for s in expr.symbols()}
    if pit_axis == DENSE:
        return SparseKernelPlan(op_kind, DENSE, None, tile, cost, 0.0, ROW_MAJOR, extents)
    micro, layout = get_micro_tile(op_kind, shape, pit_axis)
    return SparseKernelPlan(op_kind, pit_axis, micro, tile, cost, 0.0, layout, extents)


def format_plan(plan: SparseKernelPlan) -> str:
    micro = "-" if plan.micro_tile is None else "x".join(str(t) for t in plan.micro_tile)
    tile = "x".join(str(d) for d in plan.tile.tile_shape)
    return (
        f"plan op={plan.op_kind} pit_axis={plan.pit_axis} microtile={micro} "
        f"tile={tile} impl={plan.tile.impl_id} cost={plan.estimated_cost:.6e}"
    )
