"""Online sparsity detection: unordered micro-tile indexes.

The index lists the grid-anchored micro-tiles that overlap at least one
non-zero block, grouped by position along the non-permuted grid (one
group per dense-tile slot). Construction never copies or reformats the
source data: workers scan disjoint spans of the permuted axis and claim
output slots through a fetch-and-add on a shared per-group counter, so
the coordinate order inside a group depends on scheduling and is
deliberately unspecified. Group storage is pre-sized to the grid extent
along the permuted axis, so claiming a slot never reallocates.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .sparsity import SparsityAnnotation, from_mask

# Sparse-operand axis convention for the 2-D operators: the first symbol
# of each pair is the leading operand dimension.
PIT_DIMS = {"m": 0, "p": 0, "k": 1, "l": 1}


class IndexBuildError(ValueError):
    pass


@dataclass(frozen=True)
class MicroTileIndex:
    micro_tile: tuple[int, int]
    pit_axis: str
    pit_dim: int  # operand dimension the gather order runs along
    pit_grid: int  # micro-tile grid extent along pit_dim
    counts: np.ndarray  # int64 [n_groups], live entries per group
    slots: np.ndarray  # int64 [n_groups, pit_grid], first counts[g] valid

    @property
    def n_groups(self) -> int:
        return self.slots.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def group(self, g: int) -> np.ndarray:
        return self.slots[g, : self.counts[g]]


def _pit_dim(pit_axis: Union[str, int]) -> int:
    if isinstance(pit_axis, int):
        if pit_axis not in (0, 1):
            raise IndexBuildError(f"pit dimension must be 0 or 1, got {pit_axis}")
        return pit_axis
    try:
        return PIT_DIMS[pit_axis]
    except KeyError:
        raise IndexBuildError(f"unknown permuted axis {pit_axis!r}") from None


def _micro_grid(shape: tuple[int, int], micro_tile: tuple[int, int]) -> tuple[int, int]:
    return (-(-shape[0] // micro_tile[0]), -(-shape[1] // micro_tile[1]))


def _occupancy_span(
    ann: SparsityAnnotation, micro_tile: tuple[int, int], dim: int, lo: int, hi: int
) -> np.ndarray:
    """Micro-tile occupancy for grid positions [lo, hi) along ``dim``.

    Expands the scanned slab of the block grid to element resolution and
    pools it over micro-tiles; tails beyond the tensor extent count as
    zeros. Returns a bool array over (span along dim) x (full other grid).
    """
    t0, t1 = micro_tile
    g0, g1 = ann.granularity
    s0, s1 = ann.tensor_shape
    grid0, grid1 = _micro_grid(ann.tensor_shape, micro_tile)
    bits = ann.bits()
    if dim == 0:
        e_lo, e_hi = lo * t0, min(hi * t0, s0)
        b_lo, b_hi = e_lo // g0, -(-e_hi // g0)
        slab = np.repeat(np.repeat(bits[b_lo:b_hi], g0, axis=0), g1, axis=1)
        off = e_lo - b_lo * g0
        slab = slab[off : off + (e_hi - e_lo), :s1]
        pad0, pad1 = (hi - lo) * t0, grid1 * t1
    else:
        e_lo, e_hi = lo * t1, min(hi * t1, s1)
        b_lo, b_hi = e_lo // g1, -(-e_hi // g1)
        slab = np.repeat(np.repeat(bits[:, b_lo:b_hi], g0, axis=0), g1, axis=1)
        off = e_lo - b_lo * g1
        slab = slab[:s0, off : off + (e_hi - e_lo)]
        pad0, pad1 = grid0 * t0, (hi - lo) * t1
    padded = np.zeros((pad0, pad1), dtype=bool)
    padded[: slab.shape[0], : slab.shape[1]] = slab
    occ = padded.reshape(pad0 // t0, t0, pad1 // t1, t1).any(axis=(1, 3))
    return occ if dim == 0 else occ.T


def build_index(
    ann: SparsityAnnotation,
    micro_tile,
    pit_axis: Union[str, int],
    workers: int = 1,
) -> MicroTileIndex:
    """Detect non-zero micro-tiles and index them per dense-tile slot.

    With ``workers > 1`` the permuted-axis grid is split into contiguous
    spans scanned concurrently; each detected coordinate lands in a slot
    claimed via fetch-and-add on the group counter, so groups hold the
    exact survivor set in an arbitrary order.
    """
    micro_tile = tuple(int(t) for t in micro_tile)
    if len(micro_tile) != 2:
        raise IndexBuildError(f"micro-tile rank {len(micro_tile)} does not match annotation rank 2")
    if any(t <= 0 for t in micro_tile):
        raise IndexBuildError(f"micro-tile edges must be positive, got {micro_tile}")
    if workers < 1:
        raise IndexBuildError("workers must be >= 1")
    dim = _pit_dim(pit_axis)
    axis = pit_axis if isinstance(pit_axis, str) else ("m" if dim == 0 else "k")
    grid = _micro_grid(ann.tensor_shape, micro_tile)
    pit_grid, n_groups = grid[dim], grid[1 - dim]

    counts = [0] * n_groups
    slots = np.empty((n_groups, pit_grid), dtype=np.int64)
    lock = threading.Lock()

    def scan(lo: int, hi: int) -> None:
        occ = _occupancy_span(ann, micro_tile, dim, lo, hi)  # [hi-lo, n_groups]
        for g in range(n_groups):
            coords = np.nonzero(occ[:, g])[0] + lo
            if coords.size == 0:
                continue
            with lock:  # fetch-and-add claims a span of unique slots
                base = counts[g]
                counts[g] = base + coords.size
            slots[g, base : base + coords.size] = coords

    if workers == 1 or pit_grid <= 1:
        scan(0, pit_grid)
    else:
        workers = min(workers, pit_grid)
        step = -(-pit_grid // workers)
        bounds = [(w * step, min((w + 1) * step, pit_grid)) for w in range(workers)]
        threads = [threading.Thread(target=scan, args=b) for b in bounds if b[0] < b[1]]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    return MicroTileIndex(
        micro_tile=micro_tile,
        pit_axis=axis,
        pit_dim=dim,
        pit_grid=pit_grid,
        counts=np.asarray(counts, dtype=np.int64),
        slots=slots,
    )


def build_index_from_tensor(
    values: np.ndarray, micro_tile, pit_axis: Union[str, int], workers: int = 1
) -> MicroTileIndex:
    """As :func:`build_index`, detecting directly on raw values with the
    exact test ``value != 0.0`` (sparsity is structural, no epsilon)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise IndexBuildError("tensor detection supports rank-2 values")
    ann = from_mask(values != 0.0, (1, 1))
    return build_index(ann, micro_tile, pit_axis, workers=workers)


def canonicalize(idx: MicroTileIndex) -> MicroTileIndex:
    """Deterministic form: coordinates ascending within each group."""
    slots = idx.slots.copy()
    for g in range(idx.n_groups):
        c = idx.counts[g]
        slots[g, :c] = np.sort(slots[g, :c])
    return replace(idx, slots=slots, counts=idx.counts.copy())


def dump_index(idx: MicroTileIndex) -> str:
    """Serialize in canonical form (coordinates ascending per group), so
    the dump of an index is the same regardless of construction order."""
    lines = [
        f"microtile {idx.micro_tile[0]} {idx.micro_tile[1]}",
        f"pit_axis {idx.pit_axis}",
    ]
    for g in range(idx.n_groups):
        coords = " ".join(str(int(c)) for c in np.sort(idx.group(g)))
        lines.append(f"group {g} {int(idx.counts[g])}:" + (f" {coords}" if coords else ""))
    return "\n".join(lines) + "\n"
