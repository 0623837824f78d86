"""Dynamic sparsity annotations: block granularity plus a bit matrix.

An annotation marks, for every ``g0 x g1`` block of a 2-D tensor, whether
the block contains any non-zero element. The bit matrix is stored packed
(one bit per block, row-major over the block grid) so a 4096x4096
single-element-granularity annotation fits in 2 MiB. Granularities that
do not divide the tensor extent are padded virtually with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class AnnotationError(ValueError):
    pass


def _grid_shape(shape: tuple[int, int], granularity: tuple[int, int]) -> tuple[int, int]:
    return (-(-shape[0] // granularity[0]), -(-shape[1] // granularity[1]))


@dataclass(frozen=True)
class SparsityAnnotation:
    tensor_shape: tuple[int, int]
    granularity: tuple[int, int]
    packed: np.ndarray  # uint8, packbits of the row-major block grid

    @property
    def grid_shape(self) -> tuple[int, int]:
        return _grid_shape(self.tensor_shape, self.granularity)

    def bits(self) -> np.ndarray:
        """Block-grid occupancy as a fresh bool array."""
        g0, g1 = self.grid_shape
        flat = np.unpackbits(self.packed, count=g0 * g1).astype(bool)
        return flat.reshape(g0, g1)

    def bit(self, i: int, j: int) -> bool:
        g0, g1 = self.grid_shape
        if not (0 <= i < g0 and 0 <= j < g1):
            raise IndexError(f"block ({i},{j}) outside grid {self.grid_shape}")
        flat = i * g1 + j
        return bool((self.packed[flat >> 3] >> (7 - (flat & 7))) & 1)

    @property
    def nnz_blocks(self) -> int:
        g0, g1 = self.grid_shape
        return int(np.unpackbits(self.packed, count=g0 * g1).sum())

    @property
    def sparsity_ratio(self) -> float:
        """Fraction of zero blocks, in [0, 1]."""
        g0, g1 = self.grid_shape
        return 1.0 - self.nnz_blocks / (g0 * g1)

    def materialize(self, dtype=np.float32) -> np.ndarray:
        """Expand to an element-space 0/1 mask of ``tensor_shape``."""
        g0, g1 = self.granularity
        elem = np.repeat(np.repeat(self.bits(), g0, axis=0), g1, axis=1)
        return elem[: self.tensor_shape[0], : self.tensor_shape[1]].astype(dtype)


def _check_rank2(shape, granularity) -> tuple[tuple[int, int], tuple[int, int]]:
    shape = tuple(int(s) for s in shape)
    granularity = tuple(int(g) for g in granularity)
    if len(shape) != len(granularity):
        raise AnnotationError(
            f"granularity rank {len(granularity)} does not match shape rank {len(shape)}"
        )
    if len(shape) != 2:
        raise AnnotationError("only rank-2 annotations are supported")
    if any(g <= 0 for g in granularity):
        raise AnnotationError(f"granularity must be positive, got {granularity}")
    if any(s <= 0 for s in shape):
        raise AnnotationError(f"shape must be positive, got {shape}")
    return shape, granularity


def from_bits(bits: np.ndarray, shape, granularity) -> SparsityAnnotation:
    """Build an annotation from an explicit block-grid bool matrix."""
    shape, granularity = _check_rank2(shape, granularity)
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != _grid_shape(shape, granularity):
        raise AnnotationError(
            f"bit grid {bits.shape} does not match expected {_grid_shape(shape, granularity)}"
        )
    return SparsityAnnotation(shape, granularity, np.packbits(bits.reshape(-1)))


def from_mask(mask: np.ndarray, granularity) -> SparsityAnnotation:
    """Annotate a dense mask: a block bit is 1 iff the block has any
    non-zero element. The tail of a non-dividing granularity counts as
    zero padding."""
    mask = np.asarray(mask)
    shape, granularity = _check_rank2(mask.shape, granularity)
    g0, g1 = granularity
    grid = _grid_shape(shape, granularity)
    padded = np.zeros((grid[0] * g0, grid[1] * g1), dtype=bool)
    padded[: shape[0], : shape[1]] = mask != 0
    bits = padded.reshape(grid[0], g0, grid[1], g1).any(axis=(1, 3))
    return from_bits(bits, shape, granularity)


def from_ragged_lengths(lengths: Sequence[int], padded_shape) -> SparsityAnnotation:
    """Per-row prefix annotation for variable-length rows padded to a
    common width: row b is non-zero in columns < lengths[b]."""
    shape, _ = _check_rank2(padded_shape, (1, 1))
    if len(lengths) != shape[0]:
        raise AnnotationError(f"{len(lengths)} lengths for {shape[0]} rows")
    bits = np.zeros(shape, dtype=bool)
    for b, n in enumerate(lengths):
        n = int(n)
        if n < 0 or n > shape[1]:
            raise AnnotationError(f"length {n} of row {b} exceeds padded width {shape[1]}")
        bits[b, :n] = True
    return from_bits(bits, shape, (1, 1))


def random_annotation(shape, granularity, zero_ratio: float, seed: int) -> SparsityAnnotation:
    """Each block independently zero with probability ``zero_ratio``.
    Deterministic for a given seed."""
    shape, granularity = _check_rank2(shape, granularity)
    if not 0.0 <= zero_ratio <= 1.0:
        raise AnnotationError(f"zero_ratio must be in [0,1], got {zero_ratio}")
    rng = np.random.default_rng(seed)
    bits = rng.random(_grid_shape(shape, granularity)) >= zero_ratio
    return from_bits(bits, shape, granularity)


def save_annotation(ann: SparsityAnnotation, path: Union[str, Path]) -> None:
    g0, g1 = ann.grid_shape
    bits = ann.bits()
    lines = [
        f"shape {ann.tensor_shape[0]} {ann.tensor_shape[1]}",
        f"granularity {ann.granularity[0]} {ann.granularity[1]}",
    ]
    for i in range(g0):
        lines.append("".join("1" if b else "0" for b in bits[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotation(path: Union[str, Path]) -> SparsityAnnotation:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 1 or not lines[0].startswith("shape "):
        raise AnnotationError(f"{path}: line 1: expected 'shape d0 d1'")
    if len(lines) < 2 or not lines[1].startswith("granularity "):
        raise AnnotationError(f"{path}: line 2: expected 'granularity g0 g1'")
    try:
        shape = tuple(int(x) for x in lines[0].split()[1:])
        granularity = tuple(int(x) for x in lines[1].split()[1:])
        if len(shape) != 2 or len(granularity) != 2:
            raise ValueError("need two extents")
    except ValueError as e:
        raise AnnotationError(f"{path}: line {1 if 'shape' in str(e) else 2}: {e}") from e
    grid = _grid_shape(shape, granularity)  # type: ignore[arg-type]
    rows = []
    for ln in range(2, 2 + grid[0]):
        if ln >= len(lines) or len(lines[ln]) != grid[1] or set(lines[ln]) - {"0", "1"}:
            raise AnnotationError(f"{path}: line {ln + 1}: expected {grid[1]} bits of 0/1")
        rows.append(lines[ln])
    bits = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
    return from_bits(bits, shape, granularity)
