"""Command-line front end.

Subcommands: analyze (axis classification), profile (build the per-tile
cost table), select (plan choice with a per-candidate audit), run
(execute with optional oracle verification), bench (sparsity sweep CSV).

Exit codes: 0 ok, 1 verification failure, 2 usage or expression error,
3 I/O error. All randomness derives from --seed.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import executor, policy, sparsity, tiles
from .expr import ExprError, bind_extents, classify_axes, operator_kind, parse_expr, pit_axes, simplify
from .policy import DENSE, PlanError, SparseKernelPlan, format_plan
from .sparsity import AnnotationError, SparsityAnnotation
from .tiles import ProfileParseError, ProfileTable

ENV_PROFILE = "PIT_PROFILE"

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    expr_text: str
    shapes: dict[str, int]
    sparsity_file: list[str] = field(default_factory=list)
    random_spec: Optional[str] = None
    ragged: Optional[list[int]] = None
    seed: int = 0
    workers: int = 1
    dtype: str = "f32"
    profile_path: Optional[str] = None
    plan: str = "auto"
    verify: bool = False
    out_path: Optional[str] = None
    csv_path: Optional[str] = None

    def __post_init__(self):
        sources = sum(bool(x) for x in (self.sparsity_file, self.random_spec, self.ragged))
        if sources > 1:
            raise CliError("choose exactly one sparsity source")
        if self.workers < 1:
            raise CliError("workers must be >= 1")


def _parse_shapes(text: str) -> dict[str, int]:
    shapes = {}
    for part in text.split(","):
        if "=" not in part:
            raise CliError(f"bad shape binding {part!r}, expected sym=extent")
        sym, _, val = part.partition("=")
        try:
            shapes[sym.strip()] = int(val)
        except ValueError:
            raise CliError(f"bad extent in {part!r}") from None
    return shapes


def _parse_random_spec(spec: str) -> tuple[tuple[int, int], float]:
    try:
        gran_text, _, ratio_text = spec.partition(":")
        g0, _, g1 = gran_text.partition("x")
        return (int(g0), int(g1)), float(ratio_text)
    except ValueError:
        raise CliError(f"bad --random spec {spec!r}, expected g0xg1:ratio") from None


def _np_dtype(name: str):
    return np.float32 if name == "f32" else np.float64


def _bound_expr(expr_text: str, shapes: dict[str, int]):
    expr = parse_expr(expr_text)
    return bind_extents(expr, shapes)


def _load_profile_or_die(path: Optional[str], required: bool) -> Optional[ProfileTable]:
    path = path or os.environ.get(ENV_PROFILE)
    if path is None:
        if required:
            raise CliError("no profile: pass --profile or set PIT_PROFILE", EXIT_IO)
        return None
    try:
        return tiles.load_profile(path)
    except (OSError, ProfileParseError) as e:
        raise CliError(f"cannot load profile {path}: {e}", EXIT_IO) from e


def _annotation_for(cfg: RunConfig, shape: tuple[int, int]) -> list[SparsityAnnotation]:
    if cfg.sparsity_file:
        anns = []
        for path in cfg.sparsity_file:
            try:
                anns.append(sparsity.load_annotation(path))
            except OSError as e:
                raise CliError(f"cannot read {path}: {e}", EXIT_IO) from e
            except AnnotationError as e:
                raise CliError(str(e), EXIT_IO) from e
        return anns
    if cfg.ragged is not None:
        return [sparsity.from_ragged_lengths(cfg.ragged, shape)]
    if cfg.random_spec is not None:
        gran, ratio = _parse_random_spec(cfg.random_spec)
        return [sparsity.random_annotation(shape, gran, ratio, seed=cfg.seed)]
    raise CliError("a sparsity source is required (--sparsity-file, --random, or --ragged)")


def _pick_plan(cfg: RunConfig, expr, samples, registry) -> SparseKernelPlan:
    if cfg.plan == "auto":
        profile = _load_profile_or_die(cfg.profile_path, required=True)
        return policy.kernel_selection(expr, samples, registry, profile)
    profile = _load_profile_or_die(cfg.profile_path, required=False)
    if cfg.plan == DENSE:
        return policy.forced_plan(expr, DENSE, registry, profile)
    if cfg.plan.startswith("pit:"):
        return policy.forced_plan(expr, cfg.plan[4:], registry, profile)
    raise CliError(f"bad --plan {cfg.plan!r}, expected auto|dense|pit:<axis>")


def _gen_operands(expr, ann: Optional[SparsityAnnotation], dtype, seed: int):
    """Seeded random operands; the sparse operand is zeroed outside the
    annotation's non-zero blocks so data and annotation agree."""
    rng = np.random.default_rng(seed + 1000)
    kind = operator_kind(expr)
    if kind == "matmul":
        m, k, n = expr.extent("m"), expr.extent("k"), expr.extent("n")
        a = rng.standard_normal((m, k)).astype(dtype)
        if ann is not None:
            a *= ann.materialize(dtype)
        b = rng.standard_normal((k, n)).astype(dtype)
        return executor.DenseTensor.from_array(a, dtype=dtype), executor.DenseTensor.from_array(
            b, dtype=dtype
        )
    if kind == "reduce_sum":
        p, l = expr.extent("p"), expr.extent("l")
        a = rng.standard_normal((p, l)).astype(dtype)
        if ann is not None:
            a *= ann.materialize(dtype)
        return (executor.DenseTensor.from_array(a, dtype=dtype),)
    raise CliError(f"execution supports matmul and reduce_sum, not {kind}")


def cmd_analyze(args) -> int:
    expr = parse_expr(args.expr)
    print(f"expression: {expr.text()}")
    print(f"operator: {operator_kind(expr)}")
    for info in classify_axes(expr):
        flag = "pit" if info.is_pit else "no-pit"
        print(f"axis {info.name}: {info.kind} {info.category} {flag}")
    print(f"pit axes: {','.join(sorted(pit_axes(expr)))}")
    _, freedom = simplify(expr)
    if freedom:
        print(f"independent per slice: {','.join(sorted(freedom))}")
    return EXIT_OK


def cmd_profile(args) -> int:
    registry = tiles.register_builtin_kernels()
    table = tiles.profile(
        registry, reps=args.reps, warmup=args.warmup, reps_inner=args.reps_inner
    )
    try:
        tiles.save_profile(table, args.out)
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e}", EXIT_IO) from e
    print(f"profiled {len(table)} kernels -> {args.out}")
    for desc in sorted(table.costs, key=lambda d: (d.op_kind, d.impl_id)):
        print(f"  {desc}: {table.costs[desc]:.3e} s/launch")
    return EXIT_OK


def cmd_select(args, cfg: RunConfig) -> int:
    expr = _bound_expr(cfg.expr_text, cfg.shapes)
    registry = tiles.register_builtin_kernels()
    profile = _load_profile_or_die(cfg.profile_path, required=True)
    kind = operator_kind(expr)
    shape = policy.sparse_operand_shape(kind, {s: expr.extent(s) for s in expr.symbols()})
    samples = _annotation_for(cfg, shape)
    if cfg.random_spec is not None:
        gran, ratio = _parse_random_spec(cfg.random_spec)
        for i in range(1, args.samples):
            samples.append(sparsity.random_annotation(shape, gran, ratio, seed=cfg.seed + i))
    cands = policy.selection_candidates(expr, samples, registry, profile)
    print(format_plan(cands[0].plan))
    print(f"{'tile':>14} {'axis':>6} {'microtile':>10} {'num_tiles':>10} {'launches':>9} {'cost_s':>12}")
    for c in cands:
        micro = "-" if c.plan.micro_tile is None else "x".join(map(str, c.plan.micro_tile))
        tile = "x".join(map(str, c.plan.tile.tile_shape))
        print(
            f"{tile:>14} {c.plan.pit_axis:>6} {micro:>10} {c.total_micro_tiles:>10} "
            f"{c.total_launches:>9} {c.total_cost:>12.6e}"
        )
    return EXIT_OK


def _timed(fn, reps: int = 1) -> tuple[float, object]:
    best = []
    result = None
    for _ in range(reps):
        t0 = time.perf_counter()
        result = fn()
        best.append(time.perf_counter() - t0)
    return statistics.median(best), result


def cmd_run(args, cfg: RunConfig) -> int:
    expr = _bound_expr(cfg.expr_text, cfg.shapes)
    kind = operator_kind(expr)
    registry = tiles.register_builtin_kernels()
    shape = policy.sparse_operand_shape(kind, {s: expr.extent(s) for s in expr.symbols()})
    ann = _annotation_for(cfg, shape)[0]
    if tuple(ann.tensor_shape) != shape:
        raise CliError(f"annotation shape {ann.tensor_shape} does not match operand {shape}")
    plan = _pick_plan(cfg, expr, [ann], registry)
    dtype = _np_dtype(cfg.dtype)
    operands = _gen_operands(expr, ann, dtype, cfg.seed)
    stats = executor.ExecStats()
    if kind == "matmul":
        A, B = operands
        if not plan.is_dense and plan.sparse_layout != A.layout:
            print(f"converting sparse operand to {plan.sparse_layout}")
            A = executor.convert_layout(A, plan.sparse_layout)
        wall, C = _timed(
            lambda: executor.run_sparse_matmul(plan, A, B, ann, workers=cfg.workers, stats=stats)
        )
        oracle = executor.run_dense_reference(A, B) if cfg.verify else None
    else:
        (A,) = operands
        wall, C = _timed(
            lambda: executor.run_sparse_reduce_sum(plan, A, ann, workers=cfg.workers, stats=stats)
        )
        oracle = executor.reduce_sum_reference(A) if cfg.verify else None
    print(format_plan(plan))
    print(f"wall_ms={wall * 1e3:.3f} launches={stats.launches}")
    if cfg.out_path:
        try:
            executor.save_tensor(C, cfg.out_path)
        except OSError as e:
            raise CliError(f"cannot write {cfg.out_path}: {e}", EXIT_IO) from e
        print(f"wrote {cfg.out_path}")
    if cfg.verify:
        err = executor.max_rel_error(C, oracle)
        ok = executor.verify_close(C, oracle)
        print(f"max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    expr = _bound_expr(cfg.expr_text, cfg.shapes)
    kind = operator_kind(expr)
    if kind != "matmul":
        raise CliError("bench supports matmul expressions")
    registry = tiles.register_builtin_kernels()
    profile = _load_profile_or_die(cfg.profile_path, required=True)
    try:
        ratios = [float(r) for r in args.ratios.split(",")]
    except ValueError:
        raise CliError(f"bad --ratios {args.ratios!r}") from None
    gran_text = (cfg.random_spec or "1x1").partition(":")[0]
    try:
        g0, _, g1 = gran_text.partition("x")
        gran = (int(g0), int(g1))
    except ValueError:
        raise CliError(f"bad --random granularity {gran_text!r}") from None
    shape = policy.sparse_operand_shape(kind, {s: expr.extent(s) for s in expr.symbols()})
    dtype = _np_dtype(cfg.dtype)
    shape_txt = "x".join(str(expr.extent(s)) for s in ("m", "k", "n"))
    rows = []
    for ratio in ratios:
        ann = sparsity.random_annotation(shape, gran, ratio, seed=cfg.seed)
        A, B = _gen_operands(expr, ann, dtype, cfg.seed)
        auto = policy.kernel_selection(expr, [ann], registry, profile)
        dense = policy.forced_plan(expr, DENSE, registry, profile, tile_shape=auto.tile.tile_shape)

        def measure(plan):
            As = A
            if not plan.is_dense and plan.sparse_layout != A.layout:
                As = executor.convert_layout(A, plan.sparse_layout)
            executor.run_sparse_matmul(plan, As, B, ann, workers=cfg.workers)  # warmup
            wall, _ = _timed(
                lambda: executor.run_sparse_matmul(plan, As, B, ann, workers=cfg.workers),
                reps=args.bench_reps,
            )
            return wall

        # one dense measurement per ratio serves as baseline and dense row
        dense_wall = measure(dense)
        auto_wall = dense_wall if auto.is_dense else measure(auto)
        for plan, wall in ((auto, auto_wall), (dense, dense_wall)):
            micro = "-" if plan.micro_tile is None else "x".join(map(str, plan.micro_tile))
            tile = "x".join(map(str, plan.tile.tile_shape))
            rows.append(
                (
                    kind,
                    shape_txt,
                    f"{gran[0]}x{gran[1]}",
                    f"{ratio:g}",
                    plan.pit_axis if plan.is_dense else f"pit:{plan.pit_axis}",
                    micro,
                    tile,
                    str(policy.plan_launches(plan, ann)),
                    f"{wall * 1e3:.3f}",
                    f"{dense_wall * 1e3:.3f}",
                    f"{dense_wall / wall:.3f}",
                )
            )
    header = "op,shape,granularity,zero_ratio,plan,microtile,tile,launches,wall_ms,dense_wall_ms,speedup"
    lines = [header] + [",".join(r) for r in rows]
    text = "\n".join(lines) + "\n"
    if cfg.csv_path:
        try:
            with open(cfg.csv_path, "w") as f:
                f.write(text)
        except OSError as e:
            raise CliError(f"cannot write {cfg.csv_path}: {e}", EXIT_IO) from e
        print(f"wrote {cfg.csv_path} ({len(rows)} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, shapes_required: bool = True) -> None:
    p.add_argument("--expr", required=True, help="tensor expression, e.g. 'C[m,n] += A[m,k] * B[k,n]'")
    p.add_argument("--shape", required=shapes_required, help="axis extents, e.g. m=512,k=512,n=512")
    p.add_argument("--sparsity-file", action="append", default=[], help="annotation file (repeatable)")
    p.add_argument("--random", default=None, help="random annotation spec g0xg1:ratio")
    p.add_argument("--ragged", default=None, help="comma-separated row lengths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--profile", default=None, help=f"profile path (default ${ENV_PROFILE})")


def _config_from(args) -> RunConfig:
    ragged = None
    if args.ragged is not None:
        try:
            ragged = [int(x) for x in args.ragged.split(",")]
        except ValueError:
            raise CliError(f"bad --ragged {args.ragged!r}") from None
    return RunConfig(
        expr_text=args.expr,
        shapes=_parse_shapes(args.shape),
        sparsity_file=list(args.sparsity_file),
        random_spec=args.random,
        ragged=ragged,
        seed=args.seed,
        workers=args.workers,
        dtype=args.dtype,
        profile_path=args.profile,
        plan=getattr(args, "plan", "auto"),
        verify=getattr(args, "verify", False),
        out_path=getattr(args, "out", None),
        csv_path=getattr(args, "csv", None),
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pittile", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="classify axes and report permutable ones")
    p.add_argument("--expr", required=True)

    p = sub.add_parser("profile", help="measure per-tile costs and write the lookup table")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps-inner", type=int, default=200)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("select", help="choose a plan and print the candidate cost table")
    _add_common(p)
    p.add_argument("--samples", type=int, default=1, help="random samples drawn from --random")

    p = sub.add_parser("run", help="execute a plan, optionally verifying against the oracle")
    _add_common(p)
    p.add_argument("--plan", default="auto", help="auto | dense | pit:<axis>")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--out", default=None, help="write the output tensor here")

    p = sub.add_parser("bench", help="sparsity sweep; emits a CSV report")
    _add_common(p)
    p.add_argument("--ratios", default="0.5,0.9,0.95,0.99")
    p.add_argument("--bench-reps", type=int, default=3)
    p.add_argument("--csv", default=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "profile":
            return cmd_profile(args)
        cfg = _config_from(args)
        if args.command == "select":
            return cmd_select(args, cfg)
        if args.command == "run":
            return cmd_run(args, cfg)
        return cmd_bench(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ExprError, PlanError, AnnotationError, executor.ExecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
