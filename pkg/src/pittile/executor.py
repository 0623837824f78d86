"""Sparse operator execution: gather, dense tile compute, scatter.

A plan runs as a sweep of fixed-shape dense tile launches. Surviving
micro-tiles are copied from the source tensor into a contiguous tile
buffer in whatever order the index stores them (the staging copy exists
in the dense path too, so the gather replaces it rather than adding a
pass), the tile kernel computes on dense data only, and results are
scattered back through the same coordinates. Output rows no index entry
names are never touched and stay exactly 0.0.

Workers split the output column grid, so each worker owns a disjoint
slab of the output and per-element accumulation order does not depend
on the worker count.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .index import PIT_DIMS, MicroTileIndex, build_index
from .policy import SparseKernelPlan
from .sparsity import SparsityAnnotation
from .tiles import COL_MAJOR, ROW_MAJOR, run_tile


class ExecError(ValueError):
    pass


class LayoutError(ExecError):
    pass


_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_CODES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
_MAGIC = b"PITT"


@dataclass
class DenseTensor:
    """Contiguous n-d value buffer; layout names the memory order."""

    array: np.ndarray

    def __post_init__(self):
        if self.array.dtype not in _DTYPES:
            raise ExecError(f"unsupported dtype {self.array.dtype}")
        if not (self.array.flags.c_contiguous or self.array.flags.f_contiguous):
            raise ExecError("tensor buffer must be contiguous")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def dtype(self) -> np.dtype:
        return self.array.dtype

    @property
    def layout(self) -> str:
        return ROW_MAJOR if self.array.flags.c_contiguous else COL_MAJOR

    @classmethod
    def from_array(cls, arr, layout: str = ROW_MAJOR, dtype=None) -> "DenseTensor":
        arr = np.asarray(arr, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        order = "C" if layout == ROW_MAJOR else "F"
        return cls(np.array(arr, order=order, copy=True))

    @classmethod
    def zeros(cls, shape, dtype=np.float32, layout: str = ROW_MAJOR) -> "DenseTensor":
        order = "C" if layout == ROW_MAJOR else "F"
        return cls(np.zeros(shape, dtype=dtype, order=order))


def convert_layout(t: DenseTensor, layout: str) -> DenseTensor:
    """Copy to the requested memory order. Never done implicitly by the
    engine: the cost of a layout change stays visible to the caller."""
    if layout not in (ROW_MAJOR, COL_MAJOR):
        raise LayoutError(f"unknown layout {layout!r}")
    if t.layout == layout:
        return t
    return DenseTensor.from_array(t.array, layout=layout, dtype=t.dtype)


def save_tensor(t: DenseTensor, path: Union[str, Path]) -> None:
    arr = t.array
    header = _MAGIC + struct.pack(
        "<BBB9x", _DTYPES[arr.dtype], arr.ndim, 0 if t.layout == ROW_MAJOR else 1
    )
    extents = struct.pack(f"<{arr.ndim}q", *arr.shape)
    order = "C" if t.layout == ROW_MAJOR else "F"
    data = np.ascontiguousarray(arr.reshape(-1, order=order)).astype(arr.dtype.newbyteorder("<"))
    Path(path).write_bytes(header + extents + data.tobytes())


def load_tensor(path: Union[str, Path]) -> DenseTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise ExecError(f"{path}: not a tensor file (bad magic)")
    dtype_code, rank, layout_code = struct.unpack("<BBB9x", raw[4:16])
    if dtype_code not in _DTYPE_CODES:
        raise ExecError(f"{path}: unknown dtype code {dtype_code}")
    shape = struct.unpack(f"<{rank}q", raw[16 : 16 + 8 * rank])
    dtype = _DTYPE_CODES[dtype_code].newbyteorder("<")
    values = np.frombuffer(raw[16 + 8 * rank :], dtype=dtype, count=int(np.prod(shape)))
    order = "C" if layout_code == 0 else "F"
    arr = values.astype(_DTYPE_CODES[dtype_code]).reshape(shape, order=order)
    return DenseTensor(np.array(arr, order=order, copy=True))


@dataclass(frozen=True)
class Permutation:
    axis: str
    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ExecError(f"mapping is not a bijection on [0,{m.size})")

    @property
    def extent(self) -> int:
        return self.mapping.size


def invert(p: Permutation) -> Permutation:
    inv = np.empty_like(p.mapping)
    inv[p.mapping] = np.arange(p.mapping.size)
    return Permutation(p.axis, inv)


def apply_permutation(t, p: Permutation, dim: Optional[int] = None):
    """out[..., mapping[i], ...] = in[..., i, ...] along the given dim
    (defaults to the operand dimension of the permuted axis symbol)."""
    arr = t.array if isinstance(t, DenseTensor) else np.asarray(t)
    if dim is None:
        if p.axis not in PIT_DIMS:
            raise ExecError(f"cannot infer dimension for axis {p.axis!r}; pass dim")
        dim = PIT_DIMS[p.axis]
    if arr.shape[dim] != p.extent:
        raise ExecError(f"extent {arr.shape[dim]} does not match permutation {p.extent}")
    out = np.empty_like(arr)
    sel: list = [slice(None)] * arr.ndim
    sel[dim] = p.mapping
    out[tuple(sel)] = arr
    if isinstance(t, DenseTensor):
        return DenseTensor.from_array(out, layout=t.layout, dtype=t.dtype)
    return out


@dataclass
class ExecStats:
    launches: int = 0
    gathered_micro_tiles: int = 0


def _as_array(src) -> np.ndarray:
    return src.array if isinstance(src, DenseTensor) else np.asarray(src)


def sread(src, idx: MicroTileIndex, group: int, tile_buffer: np.ndarray, start: int = 0) -> int:
    """Gather micro-tiles of one group into consecutive tile slots.

    Copies coordinates ``start:start+slots`` in the group's stored order;
    slots left over (and tails past the tensor edge) are zeroed. The
    source is read only. Returns the number of live slots filled.
    """
    arr = _as_array(src)
    t0, t1 = idx.micro_tile
    d = idx.pit_dim
    if group < 0 or group >= idx.n_groups:
        raise ExecError(f"group {group} out of range [0,{idx.n_groups})")
    t_d, t_o = (t0, t1) if d == 0 else (t1, t0)
    n_slots = tile_buffer.shape[d] // t_d
    coords = idx.group(group)[start : start + n_slots]
    off_o = group * t_o
    if off_o >= arr.shape[1 - d]:
        raise ExecError(f"group {group} window outside tensor")
    v_o = min(t_o, arr.shape[1 - d] - off_o)
    if coords.size and int(coords.max()) * t_d >= arr.shape[d]:
        raise ExecError("micro-tile coordinate out of range")
    full = coords.size == n_slots and v_o == tile_buffer.shape[1 - d]
    edge_d = coords.size and (int(coords.max()) + 1) * t_d > arr.shape[d]
    if not full or edge_d:
        tile_buffer.fill(0.0)
    if t_d == 1 and not edge_d:
        if d == 0:
            tile_buffer[: coords.size, :v_o] = arr[coords, off_o : off_o + v_o]
        else:
            tile_buffer[:v_o, : coords.size] = arr[off_o : off_o + v_o][:, coords]
        return coords.size
    for s, c in enumerate(map(int, coords)):
        e = c * t_d
        v_d = min(t_d, arr.shape[d] - e)
        if d == 0:
            tile_buffer[s * t_d : s * t_d + v_d, :v_o] = arr[e : e + v_d, off_o : off_o + v_o]
        else:
            tile_buffer[:v_o, s * t_d : s * t_d + v_d] = arr[off_o : off_o + v_o, e : e + v_d]
    return coords.size


def swrite(
    tile_buffer: np.ndarray,
    dst,
    idx: MicroTileIndex,
    group: int,
    start: int = 0,
    accumulate: bool = False,
) -> int:
    """Scatter tile slots back to their micro-tile locations (mirror of
    :func:`sread`). Padded slots are not written."""
    arr = _as_array(dst)
    t0, t1 = idx.micro_tile
    d = idx.pit_dim
    if group < 0 or group >= idx.n_groups:
        raise ExecError(f"group {group} out of range [0,{idx.n_groups})")
    t_d, t_o = (t0, t1) if d == 0 else (t1, t0)
    n_slots = tile_buffer.shape[d] // t_d
    coords = idx.group(group)[start : start + n_slots]
    off_o = group * t_o
    v_o = min(t_o, arr.shape[1 - d] - off_o)
    if v_o <= 0:
        raise ExecError(f"group {group} window outside tensor")
    if coords.size and int(coords.max()) * t_d >= arr.shape[d]:
        raise ExecError("micro-tile coordinate out of range")
    edge_d = coords.size and (int(coords.max()) + 1) * t_d > arr.shape[d]
    if t_d == 1 and not edge_d:
        if d == 0:
            if accumulate:
                arr[coords, off_o : off_o + v_o] += tile_buffer[: coords.size, :v_o]
            else:
                arr[coords, off_o : off_o + v_o] = tile_buffer[: coords.size, :v_o]
        else:
            sub = arr[off_o : off_o + v_o]
            if accumulate:
                sub[:, coords] += tile_buffer[:v_o, : coords.size]
            else:
                sub[:, coords] = tile_buffer[:v_o, : coords.size]
        return coords.size
    for s, c in enumerate(map(int, coords)):
        e = c * t_d
        v_d = min(t_d, arr.shape[d] - e)
        if d == 0:
            piece = tile_buffer[s * t_d : s * t_d + v_d, :v_o]
            if accumulate:
                arr[e : e + v_d, off_o : off_o + v_o] += piece
            else:
                arr[e : e + v_d, off_o : off_o + v_o] = piece
        else:
            piece = tile_buffer[:v_o, s * t_d : s * t_d + v_d]
            if accumulate:
                arr[off_o : off_o + v_o, e : e + v_d] += piece
            else:
                arr[off_o : off_o + v_o, e : e + v_d] = piece
    return coords.size


def run_dense_reference(a, b) -> np.ndarray:
    """Dense matmul oracle: float64 accumulation in ascending reduction
    order. Per element this performs exactly the scalar triple loop's
    operation sequence (multiply then add, k ascending); the inner two
    loops are vectorized, which cannot change any per-element result."""
    A = _as_array(a).astype(np.float64)
    B = _as_array(b).astype(np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ExecError(f"shape mismatch {A.shape} @ {B.shape}")
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n), dtype=np.float64)
    scratch = np.empty((m, n), dtype=np.float64)
    for kk in range(k):
        np.multiply(A[:, kk, None], B[kk], out=scratch)
        C += scratch
    return C


def reduce_sum_reference(a) -> np.ndarray:
    """Row-sum oracle in float64."""
    A = _as_array(a).astype(np.float64)
    if A.ndim != 2:
        raise ExecError("reduce_sum oracle expects rank 2")
    return A.sum(axis=1)


def max_rel_error(result, oracle, floor: float = 1e-6) -> float:
    """Normwise relative error: peak absolute deviation over the oracle's
    peak magnitude (floored for near-zero oracles)."""
    x = _as_array(result).astype(np.float64)
    y = np.asarray(oracle, dtype=np.float64)
    scale = max(float(np.max(np.abs(y))) if y.size else 0.0, floor)
    return float(np.max(np.abs(x - y))) / scale if y.size else 0.0


def verify_close(result, oracle, rtol: float = 1e-5, atol: float = 1e-6) -> bool:
    x = _as_array(result).astype(np.float64)
    y = np.asarray(oracle, dtype=np.float64)
    scale = float(np.max(np.abs(y))) if y.size else 0.0
    return bool(np.max(np.abs(x - y)) <= atol + rtol * scale) if y.size else True


def _check_matmul_operands(plan: SparseKernelPlan, A: DenseTensor, B: DenseTensor) -> None:
    if A.array.ndim != 2 or B.array.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ExecError(f"shape mismatch {A.shape} @ {B.shape}")
    if A.dtype != B.dtype:
        raise ExecError(f"mixed dtypes {A.dtype} and {B.dtype}")
    ext = plan.extents
    if (ext["m"], ext["k"]) != A.shape or ext["n"] != B.shape[1]:
        raise ExecError(f"plan bound to {ext} but got A{A.shape} B{B.shape}")
    if not plan.is_dense:
        flags = A.array.flags
        ok = flags.c_contiguous if plan.sparse_layout == ROW_MAJOR else flags.f_contiguous
        if not ok:
            raise LayoutError(
                f"plan requires the sparse operand in {plan.sparse_layout}, got {A.layout}; "
                "use convert_layout first"
            )


def _worker_ranges(n_blocks: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, n_blocks))
    step = -(-n_blocks // workers)
    return [(w * step, min((w + 1) * step, n_blocks)) for w in range(workers) if w * step < n_blocks]


def _stage_b_panel(Barr: np.ndarray, panel: np.ndarray, k0: int, nlo_e: int) -> None:
    """Fill a per-worker [nb, K, N] panel from B[k0:, nlo_e:], zero-padding
    edges. Two strided assignments; no temporaries."""
    nbs, K, N = panel.shape
    k = Barr.shape[0]
    kv = min(K, k - k0)
    width = min(nbs * N, Barr.shape[1] - nlo_e)
    panel.fill(0.0)
    src = Barr[k0 : k0 + kv, nlo_e : nlo_e + width]
    view = panel.transpose(1, 0, 2)  # [K, nb, N]
    full = width // N
    if full:
        view[:kv, :full, :] = src[:, : full * N].reshape(kv, full, N)
    rem = width - full * N
    if rem:
        view[:kv, full, :rem] = src[:, full * N :]


def _matmul_pit_m(plan, A, B, idx, C, wlo, whi, stats) -> None:
    M, K, N = plan.tile.tile_shape
    Aarr, Barr, Carr = A.array, B.array, C.array
    m, k = Aarr.shape
    n = Barr.shape[1]
    kgrid = -(-k // K)
    nbs = whi - wlo
    nlo_e = wlo * N
    width = min(nbs * N, n - nlo_e)
    dt = Aarr.dtype
    a_buf = np.empty((M, K), dt)
    panel = np.empty((nbs, K, N), dt)
    out = np.zeros((nbs, M, N), dt)
    flat = np.empty((M, nbs * N), dt)
    flat_v = flat.reshape(M, nbs, N)
    scratch = np.empty((M, N), dt)
    launches = 0
    for kb in range(kgrid):
        _stage_b_panel(Barr, panel, kb * K, nlo_e)
        count = int(idx.counts[kb])
        for off in range(0, count, M):
            nr = sread(A, idx, kb, a_buf, start=off)
            out.fill(0.0)
            for j in range(nbs):
                run_tile(plan.tile, (a_buf, panel[j]), out[j], scratch)
            launches += nbs
            np.copyto(flat_v, out.transpose(1, 0, 2))
            rows = idx.group(kb)[off : off + nr]
            Carr[rows, nlo_e : nlo_e + width] += flat[:nr, :width]
    if stats is not None:
        stats.launches += launches
        stats.gathered_micro_tiles += idx.total


def _matmul_pit_k(plan, A, B, idx, C, wlo, whi, stats) -> None:
    M, K, N = plan.tile.tile_shape
    Aarr, Barr, Carr = A.array, B.array, C.array
    m, k = Aarr.shape
    n = Barr.shape[1]
    nbs = whi - wlo
    nlo_e = wlo * N
    width = min(nbs * N, n - nlo_e)
    dt = Aarr.dtype
    a_buf = np.empty((M, K), dt)
    b_gather = np.zeros((K, nbs * N), dt)
    panel = np.empty((nbs, K, N), dt)
    c_buf = np.empty((M, N), dt)
    scratch = np.empty((M, N), dt)
    launches = 0
    for mg in range(idx.n_groups):
        m0 = mg * M
        mv = min(M, m - m0)
        coords = idx.group(mg)
        for off in range(0, coords.size, K):
            ks = coords[off : off + K]
            nk = sread(A, idx, mg, a_buf, start=off)
            b_gather.fill(0.0)
            b_gather[:nk, :width] = Barr[ks, nlo_e : nlo_e + width]
            view = panel.transpose(1, 0, 2)
            view[:] = b_gather.reshape(K, nbs, N)
            for j in range(nbs):
                n0 = nlo_e + j * N
                nv = min(N, n - n0)
                if nv <= 0:
                    break
                c_buf.fill(0.0)
                run_tile(plan.tile, (a_buf, panel[j]), c_buf, scratch)
                Carr[m0 : m0 + mv, n0 : n0 + nv] += c_buf[:mv, :nv]
                launches += 1
    if stats is not None:
        stats.launches += launches
        stats.gathered_micro_tiles += idx.total


def _matmul_dense(plan, A, B, C, wlo, whi, stats) -> None:
    M, K, N = plan.tile.tile_shape
    Aarr, Barr, Carr = A.array, B.array, C.array
    m, k = Aarr.shape
    n = Barr.shape[1]
    kgrid = -(-k // K)
    mgrid = -(-m // M)
    nbs = whi - wlo
    nlo_e = wlo * N
    width = min(nbs * N, n - nlo_e)
    dt = Aarr.dtype
    a_buf = np.empty((M, K), dt)
    panel = np.empty((nbs, K, N), dt)
    out = np.zeros((nbs, M, N), dt)
    flat = np.empty((M, nbs * N), dt)
    flat_v = flat.reshape(M, nbs, N)
    scratch = np.empty((M, N), dt)
    launches = 0
    for kb in range(kgrid):
        k0 = kb * K
        kv = min(K, k - k0)
        _stage_b_panel(Barr, panel, k0, nlo_e)
        for mb in range(mgrid):
            m0 = mb * M
            mv = min(M, m - m0)
            if mv < M or kv < K:
                a_buf.fill(0.0)
            a_buf[:mv, :kv] = Aarr[m0 : m0 + mv, k0 : k0 + kv]
            out.fill(0.0)
            for j in range(nbs):
                run_tile(plan.tile, (a_buf, panel[j]), out[j], scratch)
            launches += nbs
            np.copyto(flat_v, out.transpose(1, 0, 2))
            Carr[m0 : m0 + mv, nlo_e : nlo_e + width] += flat[:mv, :width]
    if stats is not None:
        stats.launches += launches


def run_matmul_with_index(
    plan: SparseKernelPlan,
    A: DenseTensor,
    B: DenseTensor,
    idx: Optional[MicroTileIndex],
    workers: int = 1,
    stats: Optional[ExecStats] = None,
) -> DenseTensor:
    """Run a matmul plan against a prebuilt micro-tile index (ignored for
    the dense plan). Gather order is the index's stored order."""
    _check_matmul_operands(plan, A, B)
    if plan.op_kind != "matmul":
        raise ExecError(f"not a matmul plan: {plan.op_kind}")
    if not plan.is_dense:
        if idx is None:
            raise ExecError("sparse plan needs a micro-tile index")
        if idx.pit_axis != plan.pit_axis or tuple(idx.micro_tile) != tuple(plan.micro_tile):
            raise ExecError(
                f"index ({idx.pit_axis}, {idx.micro_tile}) does not match plan "
                f"({plan.pit_axis}, {plan.micro_tile})"
            )
    m, n = A.shape[0], B.shape[1]
    C = DenseTensor.zeros((m, n), dtype=A.dtype)
    N = plan.tile.tile_shape[2]
    ranges = _worker_ranges(-(-n // N), workers)

    def work(lo: int, hi: int, st: Optional[ExecStats]) -> None:
        if plan.is_dense:
            _matmul_dense(plan, A, B, C, lo, hi, st)
        elif plan.pit_axis == "m":
            _matmul_pit_m(plan, A, B, idx, C, lo, hi, st)
        elif plan.pit_axis == "k":
            _matmul_pit_k(plan, A, B, idx, C, lo, hi, st)
        else:
            raise ExecError(f"matmul axis {plan.pit_axis!r} is not executable (m and k only)")

    if len(ranges) == 1:
        work(*ranges[0], stats)
    else:
        parts = [ExecStats() if stats is not None else None for _ in ranges]
        threads = [
            threading.Thread(target=work, args=(lo, hi, st))
            for (lo, hi), st in zip(ranges, parts)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if stats is not None:
            for st in parts:
                stats.launches += st.launches
            stats.gathered_micro_tiles += parts[0].gathered_micro_tiles
    return C


def run_sparse_matmul(
    plan: SparseKernelPlan,
    A: DenseTensor,
    B: DenseTensor,
    ann: Optional[SparsityAnnotation],
    workers: int = 1,
    stats: Optional[ExecStats] = None,
) -> DenseTensor:
    """Detect, index, and execute in one call. The annotation describes
    the sparse operand A; the dense plan needs none."""
    _check_matmul_operands(plan, A, B)
    idx = None
    if not plan.is_dense:
        if ann is None:
            raise ExecError("sparse plan needs a sparsity annotation")
        if tuple(ann.tensor_shape) != A.shape:
            raise ExecError(f"annotation {ann.tensor_shape} does not describe A {A.shape}")
        idx = build_index(ann, plan.micro_tile, plan.pit_axis, workers=workers)
    return run_matmul_with_index(plan, A, B, idx, workers=workers, stats=stats)


def run_sparse_reduce_sum(
    plan: SparseKernelPlan,
    A: DenseTensor,
    ann: Optional[SparsityAnnotation],
    workers: int = 1,
    stats: Optional[ExecStats] = None,
) -> DenseTensor:
    """Row reduction with per-row survivor gathering.

    The leading axis is present in every operand, so each row may gather
    its surviving blocks in its own order; a tile batches rows whose
    gathered chunks are unrelated. Rows with no survivors stay 0.0."""
    if plan.op_kind != "reduce_sum":
        raise ExecError(f"not a reduce_sum plan: {plan.op_kind}")
    Aarr = A.array
    if Aarr.ndim != 2:
        raise ExecError("reduce_sum expects a rank-2 operand")
    ext = plan.extents
    if (ext["p"], ext["l"]) != A.shape:
        raise ExecError(f"plan bound to {ext} but got A{A.shape}")
    P, L = plan.tile.tile_shape
    p, l = Aarr.shape
    C = DenseTensor.zeros((p,), dtype=A.dtype)
    Carr = C.array
    a_buf = np.empty((P, L), Aarr.dtype)
    o_buf = np.empty((P,), Aarr.dtype)
    launches = 0
    if plan.is_dense:
        for p0 in range(0, p, P):
            pv = min(P, p - p0)
            for l0 in range(0, l, L):
                lv = min(L, l - l0)
                if pv < P or lv < L:
                    a_buf.fill(0.0)
                a_buf[:pv, :lv] = Aarr[p0 : p0 + pv, l0 : l0 + lv]
                o_buf.fill(0.0)
                run_tile(plan.tile, (a_buf,), o_buf)
                Carr[p0 : p0 + pv] += o_buf[:pv]
                launches += 1
    else:
        if ann is None or tuple(ann.tensor_shape) != A.shape:
            raise ExecError("per-row plan needs an annotation matching A")
        idx = build_index(ann, plan.micro_tile, plan.pit_axis, workers=workers)
        if plan.pit_axis == "p":
            for g in range(idx.n_groups):
                count = int(idx.counts[g])
                for off in range(0, count, P):
                    nr = sread(A, idx, g, a_buf, start=off)
                    o_buf.fill(0.0)
                    run_tile(plan.tile, (a_buf,), o_buf)
                    rows = idx.group(g)[off : off + nr]
                    Carr[rows] += o_buf[:nr]
                    launches += 1
        else:  # per-row gather along l
            for p0 in range(0, p, P):
                rows = range(p0, min(p0 + P, p))
                chunks = max(
                    (-(-int(idx.counts[r]) // L) for r in rows), default=0
                )
                for c in range(chunks):
                    a_buf.fill(0.0)
                    for s, r in enumerate(rows):
                        seg = idx.group(r)[c * L : (c + 1) * L]
                        if seg.size:
                            a_buf[s, : seg.size] = Aarr[r, seg]
                    o_buf.fill(0.0)
                    run_tile(plan.tile, (a_buf,), o_buf)
                    Carr[p0 : p0 + len(rows)] += o_buf[: len(rows)]
                    launches += 1
        if stats is not None:
            stats.gathered_micro_tiles += idx.total
    if stats is not None:
        stats.launches += launches
    return C
