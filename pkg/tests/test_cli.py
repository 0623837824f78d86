import re

import numpy as np
import pytest

from pittile import (
    estimate_plan_cost,
    flop_proportional_profile,
    load_tensor,
    random_annotation,
    register_builtin_kernels,
    save_annotation,
    save_profile,
)
from pittile.cli import main

MATMUL = "C[m,n] += A[m,k] * B[k,n]"


@pytest.fixture(scope="module")
def profile_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("prof") / "profile.txt"
    rc = main(["profile", "--reps", "5", "--reps-inner", "200", "-o", str(path)])
    assert rc == 0
    return str(path)


@pytest.fixture(scope="module")
def flop_profile_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("prof") / "flop.txt"
    save_profile(flop_proportional_profile(register_builtin_kernels()), path)
    return str(path)


class TestAnalyze:
    def test_matmul(self, capsys):
        assert main(["analyze", "--expr", MATMUL]) == 0
        out = capsys.readouterr().out
        assert "operator: matmul" in out
        assert "pit axes: k,m,n" in out

    def test_convolution_flags_compound(self, capsys):
        rc = main(["analyze", "--expr", "C[n,f,x,y] += A[n,m,x+i,y+j] * B[f,m,i,j]"])
        assert rc == 0
        out = capsys.readouterr().out
        for sym in "xyij":
            assert f"axis {sym}: " in out
            assert re.search(rf"axis {sym}: \S+ compound-member no-pit", out)
        assert "pit axes: f,m,n" in out

    def test_bad_syntax_exits_2(self, capsys):
        assert main(["analyze", "--expr", "C[m,n] += A[m k]"]) == 2
        assert "error:" in capsys.readouterr().err


class TestProfile:
    def test_writes_at_least_four_entries(self, profile_file):
        entries = [
            ln for ln in open(profile_file).read().splitlines()[3:] if ln.strip()
        ]
        assert len(entries) >= 4

    def test_reps_one_is_valid(self, tmp_path):
        out = tmp_path / "p.txt"
        assert main(["profile", "--reps", "1", "--reps-inner", "10", "-o", str(out)]) == 0
        assert out.exists()

    def test_rerun_costs_within_band(self, tmp_path):
        def costs(path):
            out = {}
            for ln in open(path).read().splitlines()[3:]:
                parts = ln.split()
                if parts:
                    out[parts[-2]] = float(parts[-1])
            return out

        # shared-box contention flips wall time between two stable states
        # for seconds at a stretch; interleaving the runs and keeping each
        # side's best compares the steady-state costs the table is meant
        # to capture
        sides = {"a": [], "b": []}
        for round_ in range(6):
            for side in sides:
                path = tmp_path / f"{side}{round_}.txt"
                assert main(["profile", "--reps", "7", "--reps-inner", "300", "-o", str(path)]) == 0
                sides[side].append(costs(path))
        a = {k: min(run[k] for run in sides["a"]) for k in sides["a"][0]}
        b = {k: min(run[k] for run in sides["b"]) for k in sides["b"][0]}
        for impl in a:
            assert abs(a[impl] - b[impl]) <= 0.25 * max(a[impl], b[impl]), (impl, a, b)


class TestSelect:
    def test_zero_ratio_selects_dense(self, capsys, flop_profile_file):
        rc = main(
            ["select", "--expr", MATMUL, "--shape", "m=256,k=256,n=256",
             "--random", "8x1:0.0", "--profile", flop_profile_file]
        )
        assert rc == 0
        first = capsys.readouterr().out.splitlines()[0]
        assert "pit_axis=dense" in first

    def test_flop_proportional_aligned_plan(self, capsys, flop_profile_file):
        rc = main(
            ["select", "--expr", MATMUL, "--shape", "m=4096,k=4096,n=4096",
             "--random", "8x1:0.95", "--profile", flop_profile_file, "--seed", "3"]
        )
        assert rc == 0
        first = capsys.readouterr().out.splitlines()[0]
        assert "microtile=8x1" in first
        assert "tile=8x32x128" in first

    def test_candidate_costs_sum_check(self, capsys, flop_profile_file):
        rc = main(
            ["select", "--expr", MATMUL, "--shape", "m=256,k=256,n=256",
             "--random", "4x1:0.9", "--samples", "2", "--profile", flop_profile_file,
             "--seed", "5"]
        )
        assert rc == 0
        out = capsys.readouterr().out.splitlines()
        # recompute each printed candidate cost independently
        from pittile import bind_extents, forced_plan, parse_expr

        expr = bind_extents(parse_expr(MATMUL), dict(m=256, k=256, n=256))
        registry = register_builtin_kernels()
        samples = [random_annotation((256, 256), (4, 1), 0.9, seed=5 + i) for i in range(2)]
        profile = flop_proportional_profile(registry)
        for line in out[2:]:
            tile_s, axis, micro, _ntiles, _launch, cost_s = line.split()
            tile = tuple(int(x) for x in tile_s.split("x"))
            plan = forced_plan(expr, axis if axis != "dense" else "dense", registry,
                               profile, tile_shape=tile)
            want = sum(estimate_plan_cost(plan, a) for a in samples)
            assert float(cost_s) == pytest.approx(want, rel=1e-6)

    def test_missing_profile_exits_3(self, capsys, monkeypatch):
        monkeypatch.delenv("PIT_PROFILE", raising=False)
        rc = main(
            ["select", "--expr", MATMUL, "--shape", "m=64,k=64,n=64", "--random", "1x1:0.5"]
        )
        assert rc == 3

    def test_malformed_sample_file_reports_line(self, capsys, tmp_path, flop_profile_file):
        bad = tmp_path / "bad.txt"
        bad.write_text("shape 8 8\ngranularity 1 1\n0101\n")
        rc = main(
            ["select", "--expr", MATMUL, "--shape", "m=8,k=8,n=8",
             "--sparsity-file", str(bad), "--profile", flop_profile_file]
        )
        assert rc == 3
        assert "line 3" in capsys.readouterr().err


class TestRun:
    def test_auto_plan_verify_pass(self, capsys, profile_file):
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=512,k=512,n=512",
             "--random", "1x512:0.99", "--profile", profile_file, "--verify"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "max_rel_err" in out

    def test_forced_dense_verify_pass(self, capsys):
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=128,k=128,n=128",
             "--random", "1x1:0.5", "--plan", "dense", "--verify"]
        )
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_forced_pit_k_converts_layout(self, capsys):
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=128,k=128,n=128",
             "--random", "128x1:0.9", "--plan", "pit:k", "--verify"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "converting sparse operand to col_major" in out
        assert "PASS" in out

    def test_all_zero_annotation_writes_zero_tensor(self, capsys, tmp_path):
        out_file = tmp_path / "C.bin"
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=64,k=64,n=64",
             "--random", "1x1:1.0", "--plan", "pit:m", "--out", str(out_file)]
        )
        assert rc == 0
        C = load_tensor(out_file)
        assert C.shape == (64, 64)
        assert np.all(C.array == 0.0)

    def test_f64_run_verifies(self, capsys):
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=96,k=96,n=96",
             "--random", "2x1:0.9", "--dtype", "f64", "--plan", "pit:m", "--verify"]
        )
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_ragged_reduce_sum(self, capsys):
        rc = main(
            ["run", "--expr", "C[p] += A[p,l]", "--shape", "p=4,l=16",
             "--ragged", "3,0,16,7", "--plan", "pit:l", "--verify"]
        )
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_verification_failure_exits_1(self, capsys, monkeypatch):
        import pittile.cli as cli_mod

        monkeypatch.setattr(cli_mod.executor, "verify_close", lambda *a, **k: False)
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=64,k=64,n=64",
             "--random", "1x1:0.5", "--plan", "dense", "--verify"]
        )
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out

    def test_two_sparsity_sources_rejected(self, capsys):
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=64,k=64,n=64",
             "--random", "1x1:0.5", "--ragged", "1,2", "--plan", "dense"]
        )
        assert rc == 2

    def test_unexecutable_operator_exits_2(self, capsys):
        rc = main(
            ["run", "--expr", "C[n,f,x,y] += A[n,m,x+i,y+j] * B[f,m,i,j]",
             "--shape", "n=4,f=4,x=4,y=4,m=4,i=2,j=2", "--random", "1x1:0.5",
             "--plan", "dense"]
        )
        assert rc == 2


class TestBench:
    def test_csv_shape_and_speedups(self, tmp_path, profile_file, monkeypatch, capsys):
        monkeypatch.setenv("PIT_PROFILE", profile_file)
        csv = tmp_path / "bench.csv"
        rc = main(
            ["bench", "--expr", MATMUL, "--shape", "m=256,k=256,n=256",
             "--random", "1x256", "--ratios", "0.5,0.9,0.95,0.99",
             "--bench-reps", "2", "--csv", str(csv), "--seed", "7"]
        )
        assert rc == 0
        lines = csv.read_text().splitlines()
        header = lines[0].split(",")
        assert header == ["op", "shape", "granularity", "zero_ratio", "plan", "microtile",
                          "tile", "launches", "wall_ms", "dense_wall_ms", "speedup"]
        rows = [ln.split(",") for ln in lines[1:]]
        assert len(rows) == 8  # 4 ratios x (selected plan + dense)
        for row in rows:
            if row[4] == "dense":
                assert float(row[10]) == pytest.approx(1.0)
            if row[3] == "0.99" and row[4] != "dense":
                assert float(row[10]) > 1.0  # sparse plan wins at high sparsity
        ratios = [row[3] for row in rows]
        assert ratios == sorted(ratios, key=float)
        assert any(row[3] == "0.99" and row[4] != "dense" for row in rows)

    def test_annotation_file_source(self, tmp_path, capsys, flop_profile_file):
        ann = random_annotation((64, 64), (1, 64), 0.9, seed=1)
        path = tmp_path / "ann.txt"
        save_annotation(ann, path)
        rc = main(
            ["run", "--expr", MATMUL, "--shape", "m=64,k=64,n=64",
             "--sparsity-file", str(path), "--plan", "pit:m", "--verify"]
        )
        assert rc == 0
        assert "PASS" in capsys.readouterr().out


def test_select_is_deterministic_given_seed_and_profile(capsys, flop_profile_file):
    argv = ["select", "--expr", MATMUL, "--shape", "m=256,k=256,n=256",
            "--random", "4x1:0.9", "--samples", "2", "--profile", flop_profile_file,
            "--seed", "11"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "pittile", "analyze", "--expr", MATMUL],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "pit axes: k,m,n" in proc.stdout
