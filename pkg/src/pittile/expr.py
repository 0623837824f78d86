"""Tensor expression mini-language and permutation-invariance analysis.

An expression is a line like ``C[m,n] += A[m,k] * B[k,n]``: one output
operand, one or two input operands, ``+=`` for additive reduction or ``=``
for plain assignment, and ``*`` or ``+`` combining two inputs elementwise.
Subscripts are plain axis symbols or two-symbol sums such as ``x+i``
(inputs only).

Axis classification drives everything downstream: an axis is permutable
(its index order can be shuffled without changing the result, up to an
inverse shuffle of the output) exactly when it is not part of an
arithmetic subscript and its computation is commutative and associative.
Spatial axes only move data, so they always qualify; additive reduction
qualifies as well.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Optional

REDUCTION_OPS = ("sum",)
ELEMENTWISE_OPS = ("multiply", "add", "identity")

SPATIAL = "spatial"
REDUCTION = "reduction"
SPORADIC = "sporadic"
PREVALENT = "prevalent"
COMPOUND = "compound-member"


class ExprError(ValueError):
    """Malformed expression text or inconsistent operand structure."""

    def __init__(self, message: str, position: Optional[int] = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Axis:
    """One operand subscript: a single symbol, or two symbols summed."""

    syms: tuple[str, ...]

    def __post_init__(self):
        if len(self.syms) not in (1, 2):
            raise ExprError(f"subscript must have 1 or 2 symbols, got {self.syms}")

    @property
    def is_compound(self) -> bool:
        return len(self.syms) == 2

    def __str__(self) -> str:
        return "+".join(self.syms)


@dataclass(frozen=True)
class Operand:
    name: str
    axes: tuple[Axis, ...]

    def symbols(self) -> tuple[str, ...]:
        """Symbols in subscript order; compound terms contribute both."""
        out: list[str] = []
        for ax in self.axes:
            out.extend(ax.syms)
        return tuple(out)

    def __str__(self) -> str:
        return f"{self.name}[{','.join(str(a) for a in self.axes)}]"


@dataclass(frozen=True)
class TensorExpr:
    """Parsed operator expression. Immutable; extents bound separately."""

    output: Operand
    inputs: tuple[Operand, ...]
    elementwise_op: str = "identity"
    reduction_op: str = "sum"
    accumulate: bool = True
    extents: Mapping[str, int] = field(default_factory=dict)

    def operands(self) -> tuple[Operand, ...]:
        return (self.output,) + self.inputs

    def symbols(self) -> tuple[str, ...]:
        """All axis symbols in first-appearance order (output first)."""
        seen: list[str] = []
        for op in self.operands():
            for s in op.symbols():
                if s not in seen:
                    seen.append(s)
        return tuple(seen)

    def extent(self, sym: str) -> int:
        try:
            return self.extents[sym]
        except KeyError:
            raise ExprError(f"axis {sym!r} has no bound extent") from None

    def text(self) -> str:
        assign = "+=" if self.accumulate else "="
        joiner = {"multiply": " * ", "add": " + ", "identity": ""}[self.elementwise_op]
        rhs = joiner.join(str(op) for op in self.inputs)
        return f"{self.output} {assign} {rhs}"


@dataclass(frozen=True)
class AxisInfo:
    name: str
    kind: str  # spatial | reduction
    category: str  # sporadic | prevalent | compound-member
    is_pit: bool
    extent: Optional[int] = None


_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|\+=|[=,\[\]+*])")


def _tokenize(text: str) -> Iterator[tuple[str, int]]:
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                return
            bad = len(text) - len(text[pos:].lstrip())
            raise ExprError(f"unexpected character {text[bad]!r}", position=bad)
        yield m.group(1), m.start(1)
        pos = m.end()


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = list(_tokenize(text))
        self.i = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.i][0] if self.i < len(self.tokens) else None

    def pos(self) -> int:
        return self.tokens[self.i][1] if self.i < len(self.tokens) else len(self.text)

    def take(self, expected: Optional[str] = None) -> str:
        if self.i >= len(self.tokens):
            raise ExprError(
                f"unexpected end of expression, expected {expected or 'token'}",
                position=len(self.text),
            )
        tok, pos = self.tokens[self.i]
        if expected is not None and tok != expected:
            raise ExprError(f"expected {expected!r}, got {tok!r}", position=pos)
        self.i += 1
        return tok

    def name(self) -> str:
        tok = self.take()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
            raise ExprError(f"expected name, got {tok!r}", position=self.tokens[self.i - 1][1])
        return tok

    def operand(self, allow_compound: bool) -> Operand:
        name = self.name()
        self.take("[")
        axes: list[Axis] = []
        if self.peek() != "]":
            while True:
                first = self.name()
                if self.peek() == "+":
                    self.take("+")
                    second = self.name()
                    if not allow_compound:
                        raise ExprError(
                            f"compound term {first}+{second} not allowed in output",
                            position=self.tokens[self.i - 1][1],
                        )
                    axes.append(Axis((first, second)))
                else:
                    axes.append(Axis((first,)))
                if self.peek() == ",":
                    self.take(",")
                    continue
                break
        self.take("]")
        return Operand(name, tuple(axes))


def parse_expr(text: str) -> TensorExpr:
    """Parse expression text into a :class:`TensorExpr`.

    Grammar: ``OUT[axes] (+= | =) IN1[axes] ((* | +) IN2[axes])?`` with
    axes a comma-separated list of symbols or ``sym+sym`` terms.
    Whitespace-insensitive, ASCII only. Raises :class:`ExprError` with a
    character position on bad syntax, on a compound term in the output,
    and on the same operand name reappearing with different subscripts.
    """
    if not text.isascii():
        raise ExprError("expression must be ASCII")
    p = _Parser(text)
    output = p.operand(allow_compound=False)
    assign = p.take()
    if assign not in ("+=", "="):
        raise ExprError(f"expected '+=' or '=', got {assign!r}", position=p.tokens[p.i - 1][1])
    inputs = [p.operand(allow_compound=True)]
    elementwise = "identity"
    if p.peek() in ("*", "+"):
        op_tok = p.take()
        elementwise = "multiply" if op_tok == "*" else "add"
        inputs.append(p.operand(allow_compound=True))
    if p.peek() is not None:
        raise ExprError(f"trailing input after expression: {p.peek()!r}", position=p.pos())

    expr = TensorExpr(
        output=output,
        inputs=tuple(inputs),
        elementwise_op=elementwise,
        accumulate=(assign == "+="),
    )
    _validate(expr)
    return expr


def _validate(expr: TensorExpr) -> None:
    seen: dict[str, tuple[Axis, ...]] = {}
    for op in expr.operands():
        if op.name in seen and seen[op.name] != op.axes:
            raise ExprError(f"operand {op.name!r} repeated with different subscripts")
        seen[op.name] = op.axes
    in_syms = set()
    for op in expr.inputs:
        in_syms.update(op.symbols())
    for s in expr.output.symbols():
        if s not in in_syms:
            raise ExprError(f"output axis {s!r} appears in no input")


def classify_axes(expr: TensorExpr) -> tuple[AxisInfo, ...]:
    """Assign kind, category, and the permutability flag to every axis.

    Category: a symbol inside any arithmetic subscript is a compound
    member; otherwise it is prevalent when present in every operand
    (output included) and sporadic when present in only some.
    """
    out_syms = set(expr.output.symbols())
    compound = {
        s for op in expr.operands() for ax in op.axes if ax.is_compound for s in ax.syms
    }
    per_operand = [set(op.symbols()) for op in expr.operands()]
    infos = []
    for sym in expr.symbols():
        kind = SPATIAL if sym in out_syms else REDUCTION
        if sym in compound:
            category = COMPOUND
        elif all(sym in syms for syms in per_operand):
            category = PREVALENT
        else:
            category = SPORADIC
        if category == COMPOUND:
            pit = False
        elif kind == SPATIAL:
            pit = True
        else:
            pit = expr.reduction_op in REDUCTION_OPS  # additive reduction commutes
        infos.append(AxisInfo(sym, kind, category, pit, expr.extents.get(sym)))
    return tuple(infos)


def pit_axes(expr: TensorExpr) -> frozenset[str]:
    """Set of permutable axes: spatial and commutative-reduction axes
    that are not compound members."""
    return frozenset(info.name for info in classify_axes(expr) if info.is_pit)


def simplify(expr: TensorExpr) -> tuple[TensorExpr, dict[str, str]]:
    """Drop prevalent axes from every operand.

    Returns the reduced expression plus a mapping recording, for each
    removed axis, that every slice along it may carry its own independent
    permutation (slices have no data dependency on each other).
    """
    prevalent = {i.name for i in classify_axes(expr) if i.category == PREVALENT}
    if not prevalent:
        return expr, {}

    def strip(op: Operand) -> Operand:
        kept = tuple(ax for ax in op.axes if ax.is_compound or ax.syms[0] not in prevalent)
        return Operand(op.name, kept)

    reduced = replace(
        expr,
        output=strip(expr.output),
        inputs=tuple(strip(op) for op in expr.inputs),
        extents={k: v for k, v in expr.extents.items() if k not in prevalent},
    )
    return reduced, {sym: "independent-per-slice" for sym in sorted(prevalent)}


def bind_extents(expr: TensorExpr, extents: Mapping[str, int]) -> TensorExpr:
    """Attach axis extents; every symbol must be bound and positive."""
    for sym in expr.symbols():
        if sym not in extents:
            raise ExprError(f"no extent bound for axis {sym!r}")
        if int(extents[sym]) <= 0:
            raise ExprError(f"extent for axis {sym!r} must be positive")
    return replace(expr, extents={s: int(extents[s]) for s in expr.symbols()})


def operator_kind(expr: TensorExpr) -> str:
    """Structural operator classification.

    Matches the reduced form (prevalent axes removed): two-input multiply
    with a shared reduction axis is a matmul (batch_matmul before
    reduction if a prevalent axis was removed), one input with reduction
    axes is a reduce_sum, two-input add with identical subscripts is a
    vec_add. Anything with compound subscripts is convolution-like.
    """
    if any(ax.is_compound for op in expr.operands() for ax in op.axes):
        return "convolution"
    core, removed = simplify(expr)
    out = [a.syms[0] for a in core.output.axes]
    ins = [[a.syms[0] for a in op.axes] for op in core.inputs]
    if core.elementwise_op == "multiply" and len(ins) == 2:
        if (
            len(out) == 2
            and ins[0] == [out[0], ins[0][-1]]
            and ins[1] == [ins[0][-1], out[1]]
            and core.accumulate
        ):
            return "batch_matmul" if removed else "matmul"
    if core.elementwise_op == "identity" and len(ins) == 1 and core.accumulate:
        if set(out) <= set(ins[0]) and set(ins[0]) - set(out):
            return "reduce_sum"
        if not set(ins[0]) - set(out) and removed:
            # fully prevalent single-input accumulation, e.g. C[p] += A[p,l]
            return "reduce_sum"
    if core.elementwise_op == "add" and len(ins) == 2 and ins[0] == ins[1] == out:
        return "vec_add"
    return "custom"
