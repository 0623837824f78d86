"""Dense tile microkernels and the offline per-tile cost table.

The registry holds small fixed-shape kernels (matmul tiles accumulate,
``C += A @ B``). Profiling measures amortized hot-cache wall time per
invocation, once per machine, and the resulting lookup table drives plan
selection. Costs are persisted as text with 9 significant digits so a
save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import platform
import statistics
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

ROW_MAJOR = "row_major"
COL_MAJOR = "col_major"


class TileError(ValueError):
    pass


class ProfileParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TileKernelDescriptor:
    op_kind: str  # matmul | reduce_sum | vec_add
    tile_shape: tuple[int, ...]  # matmul: (M, K, N); reduce_sum: (P, L); vec_add: (P,)
    impl_id: str
    layouts: tuple[str, ...] = ()  # per operand, inputs then output

    def __post_init__(self):
        if any(d <= 0 for d in self.tile_shape):
            raise TileError(f"tile dims must be positive, got {self.tile_shape}")
        ranks = {"matmul": 3, "reduce_sum": 2, "vec_add": 1}
        if self.op_kind not in ranks:
            raise TileError(f"unknown op kind {self.op_kind!r}")
        if len(self.tile_shape) != ranks[self.op_kind]:
            raise TileError(f"{self.op_kind} tile needs {ranks[self.op_kind]} dims")

    @property
    def flops(self) -> int:
        if self.op_kind == "matmul":
            m, k, n = self.tile_shape
            return 2 * m * k * n
        if self.op_kind == "reduce_sum":
            p, l = self.tile_shape
            return p * l
        return self.tile_shape[0]

    def buffer_shapes(self) -> tuple[tuple[tuple[int, ...], ...], tuple[int, ...]]:
        """(input shapes, output shape) of the tile buffers."""
        if self.op_kind == "matmul":
            m, k, n = self.tile_shape
            return ((m, k), (k, n)), (m, n)
        if self.op_kind == "reduce_sum":
            p, l = self.tile_shape
            return ((p, l),), (p,)
        p = self.tile_shape[0]
        return ((p,), (p,)), (p,)

    def __str__(self) -> str:
        return f"{self.op_kind} {'x'.join(str(d) for d in self.tile_shape)} [{self.impl_id}]"


class KernelRegistry:
    def __init__(self):
        self._by_impl: dict[str, TileKernelDescriptor] = {}

    def register(self, desc: TileKernelDescriptor) -> None:
        if desc.impl_id in self._by_impl:
            raise TileError(f"duplicate impl_id {desc.impl_id!r}")
        self._by_impl[desc.impl_id] = desc

    def by_op(self, op_kind: str) -> list[TileKernelDescriptor]:
        return [d for d in self._by_impl.values() if d.op_kind == op_kind]

    def get(self, op_kind: str, tile_shape) -> Optional[TileKernelDescriptor]:
        tile_shape = tuple(tile_shape)
        for d in self._by_impl.values():
            if d.op_kind == op_kind and d.tile_shape == tile_shape:
                return d
        return None

    def __iter__(self) -> Iterator[TileKernelDescriptor]:
        return iter(self._by_impl.values())

    def __len__(self) -> int:
        return len(self._by_impl)


_MM_LAYOUTS = (ROW_MAJOR, ROW_MAJOR, ROW_MAJOR)


def register_builtin_kernels() -> KernelRegistry:
    """Built-in dense tiles: blocked kernels whose inner loop runs over
    contiguous buffers (BLAS-backed for matmul)."""
    reg = KernelRegistry()
    for shape in ((16, 32, 128), (8, 32, 128), (32, 64, 32), (32, 32, 32)):
        reg.register(
            TileKernelDescriptor("matmul", shape, f"mm{shape[0]}x{shape[1]}x{shape[2]}", _MM_LAYOUTS)
        )
    reg.register(TileKernelDescriptor("reduce_sum", (16, 64), "rs16x64", (ROW_MAJOR, ROW_MAJOR)))
    reg.register(TileKernelDescriptor("vec_add", (256,), "va256", (ROW_MAJOR,) * 3))
    return reg


def run_tile(
    desc: TileKernelDescriptor,
    inputs: Sequence[np.ndarray],
    out: np.ndarray,
    scratch: Optional[np.ndarray] = None,
) -> None:
    """Execute one dense tile on pre-shaped contiguous buffers.

    Matmul and reduce_sum accumulate into ``out``; vec_add assigns. For
    matmul an optional (M, N) scratch keeps the hot path allocation-free.
    """
    in_shapes, out_shape = desc.buffer_shapes()
    if len(inputs) != len(in_shapes):
        raise TileError(f"{desc.op_kind} takes {len(in_shapes)} inputs, got {len(inputs)}")
    for buf, want in zip(inputs, in_shapes):
        if buf.shape != want:
            raise TileError(f"input shape {buf.shape} does not match tile {want}")
    if out.shape != out_shape:
        raise TileError(f"output shape {out.shape} does not match tile {out_shape}")
    if desc.op_kind == "matmul":
        a, b = inputs
        if scratch is not None:
            np.dot(a, b, out=scratch)
            out += scratch
        else:
            out += a @ b
    elif desc.op_kind == "reduce_sum":
        out += inputs[0].sum(axis=1)
    else:
        np.add(inputs[0], inputs[1], out=out)


@dataclass(frozen=True)
class ProfileTable:
    costs: dict[TileKernelDescriptor, float]
    fingerprint: str
    reps: int
    foreign: bool = False  # loaded table measured on another machine

    def cost(self, desc: TileKernelDescriptor) -> float:
        try:
            return self.costs[desc]
        except KeyError:
            raise TileError(f"no profiled cost for {desc}") from None

    def scaled(self, factor: float) -> "ProfileTable":
        return replace(self, costs={d: c * factor for d, c in self.costs.items()})

    def __len__(self) -> int:
        return len(self.costs)


def machine_fingerprint() -> str:
    return f"{platform.machine()}/{platform.system()}/python{platform.python_version()}"


def flop_proportional_profile(
    registry: KernelRegistry, seconds_per_flop: float = 1e-9
) -> ProfileTable:
    """Synthetic table with cost proportional to tile FLOPs. Useful for
    deterministic selection tests and as a stand-in before profiling."""
    return ProfileTable(
        costs={d: d.flops * seconds_per_flop for d in registry},
        fingerprint="synthetic/flop-proportional",
        reps=0,
    )


def profile(
    registry: KernelRegistry,
    reps: int = 5,
    warmup: int = 2,
    reps_inner: int = 200,
    dtype=np.float32,
) -> ProfileTable:
    """Measure amortized per-invocation cost for every registered tile.

    Each measurement times ``reps_inner`` back-to-back invocations on hot
    buffers; the reported cost is the median over ``reps`` measurements.
    Runs single-threaded to keep contention out of the numbers.
    """
    if reps < 1:
        raise TileError("reps must be >= 1")
    rng = np.random.default_rng(0)
    costs: dict[TileKernelDescriptor, float] = {}
    for desc in registry:
        in_shapes, out_shape = desc.buffer_shapes()
        ins = [np.ascontiguousarray(rng.standard_normal(s).astype(dtype)) for s in in_shapes]
        out = np.zeros(out_shape, dtype=dtype)
        scratch = np.empty(out_shape, dtype=dtype) if desc.op_kind == "matmul" else None
        for _ in range(warmup):
            run_tile(desc, ins, out, scratch)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(reps_inner):
                run_tile(desc, ins, out, scratch)
            samples.append((time.perf_counter() - t0) / reps_inner)
        cost = statistics.median(samples)
        if cost <= 0.0:
            raise TileError(f"clock returned non-positive cost for {desc}")
        costs[desc] = cost
    return ProfileTable(costs=costs, fingerprint=machine_fingerprint(), reps=reps)


def _fmt_cost(cost: float) -> str:
    return f"{cost:.8e}"  # 9 significant digits


def save_profile(table: ProfileTable, path: Union[str, Path]) -> None:
    lines = ["pit-profile v1", f"fingerprint {table.fingerprint}", f"reps {table.reps}"]
    entries = sorted(table.costs.items(), key=lambda kv: (kv[0].op_kind, kv[0].impl_id))
    for desc, cost in entries:
        dims = " ".join(str(d) for d in desc.tile_shape)
        lines.append(f"{desc.op_kind} {dims} {desc.impl_id} {_fmt_cost(cost)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_profile(path: Union[str, Path]) -> ProfileTable:
    """Parse a profile file. A fingerprint from another machine sets the
    ``foreign`` flag and warns instead of failing."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "pit-profile v1":
        raise ProfileParseError("expected header 'pit-profile v1'", line=1)
    if len(lines) < 3 or not lines[1].startswith("fingerprint ") or not lines[2].startswith("reps "):
        raise ProfileParseError("expected 'fingerprint <s>' then 'reps <n>'", line=2)
    fingerprint = lines[1][len("fingerprint ") :]
    try:
        reps = int(lines[2].split()[1])
    except (IndexError, ValueError):
        raise ProfileParseError("bad reps line", line=3) from None
    ranks = {"matmul": 3, "reduce_sum": 2, "vec_add": 1}
    costs: dict[TileKernelDescriptor, float] = {}
    for ln, raw in enumerate(lines[3:], start=4):
        if not raw.strip():
            continue
        parts = raw.split()
        if parts[0] not in ranks or len(parts) != ranks[parts[0]] + 3:
            raise ProfileParseError(f"malformed entry {raw!r}", line=ln)
        op = parts[0]
        try:
            dims = tuple(int(x) for x in parts[1 : 1 + ranks[op]])
            cost = float(parts[-1])
        except ValueError:
            raise ProfileParseError(f"malformed entry {raw!r}", line=ln) from None
        operands = {"matmul": 3, "reduce_sum": 2, "vec_add": 3}[op]
        layouts = (ROW_MAJOR,) * operands
        costs[TileKernelDescriptor(op, dims, parts[-2], layouts)] = cost
    foreign = fingerprint != machine_fingerprint()
    if foreign:
        warnings.warn(f"profile fingerprint {fingerprint!r} is not this machine", stacklevel=2)
    return ProfileTable(costs=costs, fingerprint=fingerprint, reps=reps, foreign=foreign)
