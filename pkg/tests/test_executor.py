import numpy as np
import pytest

from pittile import (
    DenseTensor,
    ExecError,
    ExecStats,
    LayoutError,
    Permutation,
    apply_permutation,
    bind_extents,
    build_index,
    canonicalize,
    convert_layout,
    forced_plan,
    from_mask,
    from_ragged_lengths,
    invert,
    load_tensor,
    max_rel_error,
    parse_expr,
    random_annotation,
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

MATMUL = "C[m,n] += A[m,k] * B[k,n]"


def bound(m, k, n):
    return bind_extents(parse_expr(MATMUL), dict(m=m, k=k, n=n))


def scalar_triple_loop(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n))
    for kk in range(k):  # reduction outermost, matching the oracle's order
        for i in range(m):
            for j in range(n):
                C[i, j] += A[i, kk] * B[kk, j]
    return C


def row_index(nonzero_rows, shape, width):
    bits = np.zeros(shape, dtype=bool)
    bits[list(nonzero_rows)] = True
    return build_index(from_mask(bits, (1, 1)), (1, width), "m")


class TestOracle:
    def test_hand_case(self):
        C = run_dense_reference([[1.0, 2.0], [3.0, 4.0]], np.eye(2))
        assert C.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_zero_a(self):
        assert np.all(run_dense_reference(np.zeros((3, 4)), np.ones((4, 2))) == 0.0)

    def test_bit_identical_to_scalar_triple_loop(self, rng):
        A = rng.standard_normal((8, 8))
        B = rng.standard_normal((8, 8))
        assert np.array_equal(run_dense_reference(A, B), scalar_triple_loop(A, B))

    def test_matches_tiled_dense_plan(self, registry, rng):
        expr = bound(64, 64, 64)
        A = DenseTensor.from_array(rng.standard_normal((64, 64)), dtype=np.float32)
        B = DenseTensor.from_array(rng.standard_normal((64, 64)), dtype=np.float32)
        plan = forced_plan(expr, "dense", registry, tile_shape=(32, 32, 32))
        C = run_sparse_matmul(plan, A, B, None)
        assert verify_close(C, run_dense_reference(A, B))

    def test_shape_mismatch(self):
        with pytest.raises(ExecError, match="shape"):
            run_dense_reference(np.zeros((3, 4)), np.zeros((5, 2)))


class TestGatherScatter:
    def test_sread_gathers_in_stored_order(self):
        idx = row_index([5, 1], (8, 4), 4)
        src = np.zeros((8, 4), np.float32)
        src[5] = [1, 2, 3, 4]
        src[1] = [10, 20, 30, 40]
        buf = np.empty((2, 4), np.float32)
        sread(src, idx, 0, buf)
        rows = {tuple(buf[0]), tuple(buf[1])}
        assert rows == {(1, 2, 3, 4), (10, 20, 30, 40)}

    def test_sread_empty_group_zero_tile(self):
        idx = row_index([], (8, 4), 4)
        buf = np.full((2, 4), 9.0, np.float32)
        sread(np.ones((8, 4), np.float32), idx, 0, buf)
        assert np.all(buf == 0.0)

    def test_sread_pads_partial_group(self):
        idx = row_index([3], (8, 4), 4)
        buf = np.full((4, 4), 7.0, np.float32)
        src = np.arange(32, dtype=np.float32).reshape(8, 4)
        n = sread(src, idx, 0, buf)
        assert n == 1
        assert np.array_equal(buf[0], src[3])
        assert np.all(buf[1:] == 0.0)

    def test_round_trip_restores_nonzero_rows(self, rng):
        src = np.zeros((16, 8), np.float32)
        live = [2, 9, 14]
        src[live] = rng.standard_normal((3, 8))
        idx = build_index(from_mask(src, (1, 1)), (1, 8), "m")
        buf = np.empty((4, 8), np.float32)
        sread(src, idx, 0, buf)
        dst = np.zeros_like(src)
        swrite(buf, dst, idx, 0)
        assert np.array_equal(dst, src)

    def test_swrite_does_not_touch_padded_slots(self):
        idx = row_index([0], (4, 4), 4)
        buf = np.full((2, 4), 5.0, np.float32)
        dst = np.zeros((4, 4), np.float32)
        swrite(buf, dst, idx, 0)
        assert np.all(dst[1:] == 0.0)
        assert np.all(dst[0] == 5.0)

    def test_column_micro_tiles(self, rng):
        src = np.zeros((6, 10), np.float32)
        src[:, 7] = rng.standard_normal(6)
        src[:, 2] = rng.standard_normal(6)
        idx = build_index(from_mask(src, (1, 1)), (6, 1), "k")
        buf = np.empty((6, 4), np.float32)
        sread(src, idx, 0, buf)
        dst = np.zeros_like(src)
        swrite(buf, dst, idx, 0)
        assert np.array_equal(dst, src)

    def test_out_of_range_coordinate(self):
        idx = row_index([5, 1], (8, 4), 4)
        bad = canonicalize(idx)
        bad.slots[0, 0] = 99
        with pytest.raises(ExecError, match="out of range"):
            sread(np.zeros((8, 4), np.float32), bad, 0, np.empty((2, 4), np.float32))
        with pytest.raises(ExecError, match="group"):
            sread(np.zeros((8, 4), np.float32), idx, 3, np.empty((2, 4), np.float32))


class TestSparseMatmul:
    def test_sparse_rows_match_oracle_others_exact_zero(self, registry, rng):
        m, k, n = 32, 64, 48
        A = np.zeros((m, k), np.float32)
        A[1] = rng.standard_normal(k)
        A[5] = rng.standard_normal(k)
        At = DenseTensor.from_array(A)
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        ann = from_mask(A, (1, 1))
        plan = forced_plan(bound(m, k, n), "m", registry, tile_shape=(16, 32, 128))
        C = run_sparse_matmul(plan, At, Bt, ann)
        assert verify_close(C, run_dense_reference(At, Bt))
        zero_rows = [r for r in range(m) if r not in (1, 5)]
        assert np.all(C.array[zero_rows] == 0.0)

    def test_all_zero_annotation_zero_launches(self, registry, rng):
        m, k, n = 32, 32, 32
        At = DenseTensor.from_array(np.zeros((m, k), np.float32))
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        ann = from_mask(At.array, (1, 1))
        plan = forced_plan(bound(m, k, n), "m", registry)
        stats = ExecStats()
        C = run_sparse_matmul(plan, At, Bt, ann, stats=stats)
        assert np.all(C.array == 0.0)
        assert stats.launches == 0

    def test_fully_dense_annotation_matches_dense_plan_bitwise(self, registry, rng):
        m, k, n = 96, 96, 96
        At = DenseTensor.from_array(rng.standard_normal((m, k)).astype(np.float32))
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        ann = from_mask(np.ones((m, k)), (1, 1))
        expr = bound(m, k, n)
        sparse = run_sparse_matmul(forced_plan(expr, "m", registry), At, Bt, ann)
        dense = run_sparse_matmul(forced_plan(expr, "dense", registry), At, Bt, None)
        assert np.array_equal(sparse.array, dense.array)

    def test_pit_k_needs_col_major(self, registry, rng):
        m, k, n = 64, 64, 64
        expr = bound(m, k, n)
        At = DenseTensor.from_array(rng.standard_normal((m, k)).astype(np.float32))
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        ann = random_annotation((m, k), (m, 1), 0.5, seed=2)
        plan = forced_plan(expr, "k", registry)
        with pytest.raises(LayoutError, match="col_major"):
            run_sparse_matmul(plan, At, Bt, ann)
        Ak = convert_layout(At, "col_major")
        masked = DenseTensor.from_array(Ak.array * ann.materialize(), layout="col_major")
        C = run_sparse_matmul(plan, masked, Bt, ann)
        assert verify_close(C, run_dense_reference(masked, Bt))

    def test_awkward_shapes_with_tails(self, registry, rng):
        m, k, n = 45, 70, 51  # nothing divides the tile edges
        expr = bound(m, k, n)
        Aarr = rng.standard_normal((m, k)).astype(np.float32)
        ann = random_annotation((m, k), (3, 2), 0.6, seed=4)
        Aarr *= ann.materialize()
        At = DenseTensor.from_array(Aarr)
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        oracle = run_dense_reference(At, Bt)
        for axis, tile in (("m", (16, 32, 128)), ("dense", (32, 64, 32))):
            plan = forced_plan(expr, axis, registry, tile_shape=tile)
            C = run_sparse_matmul(plan, At, Bt, ann)
            assert verify_close(C, oracle), (axis, max_rel_error(C, oracle))
        plan = forced_plan(expr, "k", registry, tile_shape=(16, 32, 128))
        C = run_sparse_matmul(plan, convert_layout(At, "col_major"), Bt, ann)
        assert verify_close(C, oracle)

    def test_worker_count_does_not_change_bits(self, registry, rng):
        m, k, n = 128, 96, 160
        expr = bound(m, k, n)
        ann = random_annotation((m, k), (1, k), 0.5, seed=9)
        Aarr = rng.standard_normal((m, k)).astype(np.float32) * ann.materialize()
        At = DenseTensor.from_array(Aarr)
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        for axis in ("m", "dense"):
            plan = forced_plan(expr, axis, registry, tile_shape=(16, 32, 128))
            ref = run_sparse_matmul(plan, At, Bt, ann, workers=1)
            for w in (2, 4):
                got = run_sparse_matmul(plan, At, Bt, ann, workers=w)
                assert np.array_equal(got.array, ref.array)

    def test_shuffled_group_order_m_axis_bit_exact(self, registry, rng):
        m, k, n = 64, 64, 64
        expr = bound(m, k, n)
        ann = random_annotation((m, k), (1, k), 0.4, seed=3)
        Aarr = rng.standard_normal((m, k)).astype(np.float32) * ann.materialize()
        At = DenseTensor.from_array(Aarr)
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
        plan = forced_plan(expr, "m", registry, tile_shape=(16, 32, 128))
        idx = build_index(ann, plan.micro_tile, "m")
        ref = run_matmul_with_index(plan, At, Bt, idx)
        shuffled = canonicalize(idx)
        for g in range(shuffled.n_groups):
            c = shuffled.counts[g]
            shuffled.slots[g, :c] = rng.permutation(shuffled.slots[g, :c])
        got = run_matmul_with_index(plan, At, Bt, shuffled)
        assert np.array_equal(got.array, ref.array)

    def test_shuffled_group_order_k_axis_f64(self, registry, rng):
        m, k, n = 64, 96, 64
        expr = bound(m, k, n)
        ann = random_annotation((m, k), (m, 1), 0.4, seed=6)
        Aarr = rng.standard_normal((m, k)) * ann.materialize(np.float64)
        At = DenseTensor.from_array(Aarr, layout="col_major", dtype=np.float64)
        Bt = DenseTensor.from_array(rng.standard_normal((k, n)), dtype=np.float64)
        plan = forced_plan(expr, "k", registry, tile_shape=(16, 32, 128))
        idx = build_index(ann, plan.micro_tile, "k")
        ref = run_matmul_with_index(plan, At, Bt, idx)
        shuffled = canonicalize(idx)
        for g in range(shuffled.n_groups):
            c = shuffled.counts[g]
            shuffled.slots[g, :c] = rng.permutation(shuffled.slots[g, :c])
        got = run_matmul_with_index(plan, At, Bt, shuffled)
        assert max_rel_error(got, ref.array) <= 1e-12

    def test_degenerate_single_element_shapes(self, registry, rng):
        for m, k, n in [(1, 1, 1), (1, 200, 1), (200, 1, 1), (1, 1, 200)]:
            expr = bound(m, k, n)
            ann = random_annotation((m, k), (1, 1), 0.4, seed=m * k + n)
            Aarr = rng.standard_normal((m, k)).astype(np.float32) * ann.materialize()
            B = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
            oracle = run_dense_reference(Aarr, B)
            for axis in ("m", "k", "dense"):
                plan = forced_plan(expr, axis, registry, tile_shape=(16, 32, 128))
                A = DenseTensor.from_array(Aarr, layout=plan.sparse_layout)
                C = run_sparse_matmul(plan, A, B, ann)
                assert verify_close(C, oracle), (m, k, n, axis)

    def test_executed_launches_match_cost_model(self, registry, rng):
        from pittile import plan_launches

        for trial in range(10):
            m, k, n = (int(x) for x in rng.integers(10, 200, size=3))
            expr = bound(m, k, n)
            ann = random_annotation((m, k), (2, 3), 0.7, seed=trial)
            Aarr = rng.standard_normal((m, k)).astype(np.float32) * ann.materialize()
            B = DenseTensor.from_array(rng.standard_normal((k, n)).astype(np.float32))
            for axis, tile in (("m", (16, 32, 128)), ("k", (32, 64, 32)), ("dense", (8, 32, 128))):
                plan = forced_plan(expr, axis, registry, tile_shape=tile)
                A = DenseTensor.from_array(Aarr, layout=plan.sparse_layout)
                stats = ExecStats()
                run_sparse_matmul(plan, A, B, ann, stats=stats)
                assert stats.launches == plan_launches(plan, ann), (trial, axis)

    def test_operand_validation(self, registry, rng):
        expr = bound(32, 32, 32)
        plan = forced_plan(expr, "dense", registry)
        A = DenseTensor.from_array(rng.standard_normal((32, 16)).astype(np.float32))
        B = DenseTensor.from_array(rng.standard_normal((32, 32)).astype(np.float32))
        with pytest.raises(ExecError, match="shape"):
            run_sparse_matmul(plan, A, B, None)
        A = DenseTensor.from_array(rng.standard_normal((32, 32)).astype(np.float32))
        bad_ann = random_annotation((16, 32), (1, 1), 0.5, seed=0)
        sparse_plan = forced_plan(expr, "m", registry)
        with pytest.raises(ExecError, match="annotation"):
            run_sparse_matmul(sparse_plan, A, B, bad_ann)
        with pytest.raises(ExecError, match="needs a sparsity annotation"):
            run_sparse_matmul(sparse_plan, A, B, None)


class TestReduceSum:
    def test_zero_row_exact_and_survivor_value(self, registry):
        p, l = 8, 16
        expr = bind_extents(parse_expr("C[p] += A[p,l]"), dict(p=p, l=l))
        A = np.zeros((p, l), np.float32)
        A[2, 3] = 7.5
        ann = from_mask(A, (1, 1))
        plan = forced_plan(expr, "l", registry)
        C = run_sparse_reduce_sum(plan, DenseTensor.from_array(A), ann)
        assert C.array[2] == np.float32(7.5)
        others = [i for i in range(p) if i != 2]
        assert np.all(C.array[others] == 0.0)

    @pytest.mark.parametrize("axis", ["l", "p", "dense"])
    def test_random_vs_oracle(self, registry, rng, axis):
        p, l = 70, 200
        expr = bind_extents(parse_expr("C[p] += A[p,l]"), dict(p=p, l=l))
        lengths = [int(x) for x in rng.integers(0, l + 1, p)]
        ann = from_ragged_lengths(lengths, [p, l])
        A = DenseTensor.from_array(
            rng.standard_normal((p, l)).astype(np.float32) * ann.materialize()
        )
        plan = forced_plan(expr, axis, registry)
        C = run_sparse_reduce_sum(plan, A, ann)
        assert verify_close(C, reduce_sum_reference(A))
        if axis != "dense":
            empty = [i for i, ln in enumerate(lengths) if ln == 0]
            assert np.all(C.array[empty] == 0.0)


class TestPermutation:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 3))
        p = Permutation("m", np.arange(5))
        assert np.array_equal(apply_permutation(x, p), x)

    def test_double_invert(self, rng):
        p = Permutation("k", rng.permutation(9))
        assert np.array_equal(invert(invert(p)).mapping, p.mapping)

    def test_reverse_twice_is_identity(self, rng):
        x = rng.standard_normal((6, 2))
        rev = Permutation("m", np.arange(6)[::-1])
        assert np.array_equal(apply_permutation(apply_permutation(x, rev), rev), x)

    def test_non_bijective_rejected(self):
        with pytest.raises(ExecError, match="bijection"):
            Permutation("m", np.array([0, 0, 1]))

    def test_extent_mismatch(self, rng):
        with pytest.raises(ExecError, match="extent"):
            apply_permutation(rng.standard_normal((4, 2)), Permutation("m", np.arange(5)))


class TestTensorFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("layout", ["row_major", "col_major"])
    def test_round_trip(self, tmp_path, rng, dtype, layout):
        t = DenseTensor.from_array(rng.standard_normal((7, 5)), layout=layout, dtype=dtype)
        path = tmp_path / "t.bin"
        save_tensor(t, path)
        back = load_tensor(path)
        assert back.dtype == t.dtype
        assert back.layout == layout
        assert np.array_equal(back.array, t.array)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ExecError, match="magic"):
            load_tensor(p)

    def test_header_is_16_bytes_plus_extents(self, tmp_path, rng):
        t = DenseTensor.from_array(rng.standard_normal((3, 2)), dtype=np.float32)
        path = tmp_path / "t.bin"
        save_tensor(t, path)
        raw = path.read_bytes()
        assert raw[:4] == b"PITT"
        assert len(raw) == 16 + 2 * 8 + 6 * 4


def test_convert_layout_round_trip(rng):
    t = DenseTensor.from_array(rng.standard_normal((6, 4)), dtype=np.float32)
    c = convert_layout(t, "col_major")
    assert c.layout == "col_major"
    assert np.array_equal(c.array, t.array)
    assert convert_layout(c, "row_major").layout == "row_major"
