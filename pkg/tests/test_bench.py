import numpy as np
import pytest

from voxfuse.bench import (
    CSV_HEADER,
    BenchResult,
    read_bench_csv,
    run_complexity_sweep,
    sweep_summary,
    write_bench_csv,
)


def result(op="deformable", h=64, w=64, median=1e-3, **kw):
    base = dict(
        operator=op,
        h=h,
        w=w,
        n_voxels=100,
        heads=4,
        points=8,
        median_s=median,
        iqr_s=1e-5,
        reps=10,
        inner_loops=1,
    )
    base.update(kw)
    return BenchResult(**base)


class TestBenchResult:
    def test_area(self):
        assert result(h=32, w=48).area == 32 * 48

    def test_rejects_too_few_reps(self):
        with pytest.raises(ValueError):
            result(reps=9)

    def test_rejects_nonpositive_median(self):
        with pytest.raises(ValueError):
            result(median=0.0)

    def test_rejects_negative_or_nonfinite_iqr(self):
        with pytest.raises(ValueError):
            result(iqr_s=-1e-9)
        with pytest.raises(ValueError):
            result(iqr_s=float("nan"))

    def test_rejects_zero_inner_loops(self):
        with pytest.raises(ValueError):
            result(inner_loops=0)


class TestSweep:
    def test_tiny_sweep_schema(self):
        rows = run_complexity_sweep(
            sizes=((16, 16), (32, 32)),
            n_voxels=64,
            heads=2,
            points=4,
            reps=10,
            channels=4,
            warmup=1,
            seed=5,
        )
        assert len(rows) == 4  # two operators per size
        ops = {(r.operator, r.area) for r in rows}
        assert ops == {
            ("deformable", 256),
            ("dense", 256),
            ("deformable", 1024),
            ("dense", 1024),
        }
        for r in rows:
            assert r.median_s > 0 and np.isfinite(r.median_s)
            assert r.reps == 10
            assert r.n_voxels == 64

    def test_sweep_rejects_too_few_reps(self):
        with pytest.raises(ValueError):
            run_complexity_sweep(sizes=((16, 16), (32, 32)), n_voxels=8, reps=5)


class TestSummary:
    def fabricate(self, deform_ms, dense_ms, sizes=(64, 128, 256)):
        rows = []
        for s, dfm, dns in zip(sizes, deform_ms, dense_ms):
            rows.append(result("deformable", h=s, w=s, median=dfm))
            rows.append(result("dense", h=s, w=s, median=dns))
        return rows

    def test_ideal_scaling_summary(self):
        # deform flat at 1ms; dense grows with area
        rows = self.fabricate([1e-3, 1.1e-3, 1.05e-3], [2e-3, 8e-3, 32e-3])
        s = sweep_summary(rows)
        assert s["areas"] == [64 * 64, 128 * 128, 256 * 256]
        assert s["deform_spread"] == pytest.approx(1.1)
        assert s["dense_scaling"] == pytest.approx(16.0)
        assert s["dense_over_deform"][256 * 256] == pytest.approx(32e-3 / 1.05e-3)
        assert s["ratio_inversions"] == 0
        assert s["ratio_monotone"] is True

    def test_single_inversion_tolerated(self):
        rows = self.fabricate(
            [1e-3, 1e-3, 1e-3, 1e-3],
            [4e-3, 3.9e-3, 8e-3, 16e-3],  # one dip
            sizes=(32, 64, 128, 256),
        )
        s = sweep_summary(rows)
        assert s["ratio_inversions"] == 1
        assert s["ratio_monotone"] is True

    def test_two_inversions_flagged(self):
        rows = self.fabricate(
            [1e-3, 1e-3, 1e-3, 1e-3],
            [4e-3, 3.9e-3, 3.8e-3, 16e-3],
            sizes=(32, 64, 128, 256),
        )
        s = sweep_summary(rows)
        assert s["ratio_inversions"] == 2
        assert s["ratio_monotone"] is False

    def test_requires_matched_pairs(self):
        rows = self.fabricate([1e-3, 1e-3], [2e-3, 4e-3])[:-1]
        with pytest.raises(ValueError):
            sweep_summary(rows)


class TestCsvRoundTrip:
    def test_round_trip_exact(self, tmp_path):
        rows = [
            result("deformable", h=17, w=19, median=0.12345678901234567, iqr_s=1e-9),
            result("dense", h=17, w=19, median=3.3e-5, inner_loops=76),
        ]
        path = tmp_path / "bench.csv"
        write_bench_csv(path, rows)
        back = read_bench_csv(path)
        assert back == rows  # dataclass equality covers every field

    def test_header_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("operator,h,w\ndeform,1,1\n")
        with pytest.raises(ValueError):
            read_bench_csv(path)

    def test_header_constant_matches_fields(self, tmp_path):
        path = tmp_path / "bench.csv"
        write_bench_csv(path, [result()])
        first = path.read_text().splitlines()[0]
        assert first == ",".join(CSV_HEADER)
