"""Dynamic-sparsity tensor compute engine.

Pipeline: parse a tensor expression and find its permutable axes, cover
runtime-detected non-zero blocks with micro-tiles, pick the cheapest
dense tile kernel from a profiled cost table, and execute the sparse
operator as gather, dense tile compute, scatter.
"""

from .expr import (
    AxisInfo,
    ExprError,
    TensorExpr,
    bind_extents,
    classify_axes,
    operator_kind,
    parse_expr,
    pit_axes,
    simplify,
)
from .sparsity import (
    AnnotationError,
    SparsityAnnotation,
    from_mask,
    from_ragged_lengths,
    load_annotation,
    random_annotation,
    save_annotation,
)
from .index import MicroTileIndex, build_index, build_index_from_tensor, canonicalize, dump_index
from .tiles import (
    KernelRegistry,
    ProfileTable,
    TileKernelDescriptor,
    flop_proportional_profile,
    load_profile,
    profile,
    register_builtin_kernels,
    run_tile,
    save_profile,
)
from .policy import (
    PlanError,
    SparseKernelPlan,
    cover_count,
    cover_group_counts,
    estimate_plan_cost,
    forced_plan,
    format_plan,
    get_micro_tile,
    kernel_selection,
    plan_launches,
    selection_candidates,
)
from .executor import (
    DenseTensor,
    ExecError,
    ExecStats,
    LayoutError,
    Permutation,
    apply_permutation,
    convert_layout,
    invert,
    load_tensor,
    max_rel_error,
    reduce_sum_reference,
    run_dense_reference,
    run_matmul_with_index,
    run_sparse_matmul,
    run_sparse_reduce_sum,
    save_tensor,
    sread,
    swrite,
    verify_close,
)

__version__ = "0.1.0"
