"""RSS tracing: integral math, invariants, and the sampler thread."""

import csv
import time

import numpy as np
import pytest

from recistseg.memtrace import (
    GB,
    EfficiencyReport,
    MemoryTrace,
    report_from_trace,
    trace_memory,
)


class TestTraceMath:
    def test_constant_rss_auc_is_rectangle(self):
        rss = 3 * (1 << 30)
        trace = MemoryTrace([(0.0, rss), (0.5, rss), (2.0, rss)], 0.1)
        assert trace.auc_gbs() == pytest.approx(3.0 * 2.0, rel=1e-12)
        assert trace.max_rss_gb() == 3.0
        assert trace.duration_s() == 2.0

    def test_linear_ramp_auc_is_triangle(self):
        # rises from 0 to 4 GB over 2 s: area = 4 GB * 2 s / 2
        trace = MemoryTrace([(0.0, 0), (1.0, 2 << 30), (2.0, 4 << 30)], 1.0)
        assert trace.auc_gbs() == pytest.approx(4.0, rel=1e-12)

    def test_empty_and_single_sample(self):
        assert MemoryTrace([], 0.1).auc_gbs() == 0.0
        assert MemoryTrace([], 0.1).max_rss_gb() == 0.0
        one = MemoryTrace([(0.2, 1 << 30)], 0.1)
        assert one.auc_gbs() == 0.0
        assert one.max_rss_gb() == 1.0
        assert one.duration_s() == 0.0

    def test_timestamps_must_increase(self):
        with pytest.raises(ValueError):
            MemoryTrace([(0.0, 1), (0.0, 2)], 0.1)
        with pytest.raises(ValueError):
            MemoryTrace([(1.0, 1), (0.5, 2)], 0.1)

    def test_csv_round_trip(self, tmp_path):
        trace = MemoryTrace([(0.0, 100), (0.25, 250)], 0.25)
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t_s", "rss_bytes"]
        assert [(float(t), int(r)) for t, r in rows[1:]] == trace.samples


class TestReport:
    def test_auc_cannot_exceed_peak_times_duration(self):
        with pytest.raises(ValueError, match="exceeds"):
            EfficiencyReport("c1", (4, 4, 4), running_time_s=2.0, max_ram_gb=1.0, total_ram_gbs=2.5)

    def test_rectangle_trace_report_is_exact(self):
        rss = 2 * (1 << 30)
        trace = MemoryTrace([(0.0, rss), (1.5, rss)], 0.1)
        rep = report_from_trace("c2", (8, 8, 8), 1.5, trace)
        assert rep.max_ram_gb == 2.0
        assert rep.total_ram_gbs == pytest.approx(3.0, rel=1e-12)
        d = rep.to_dict()
        assert d["case_id"] == "c2"
        assert d["image_shape"] == [8, 8, 8]
        assert d["total_ram_gbs"] == 3.0


class TestSampler:
    def test_captures_run_result_and_samples(self):
        def work():
            time.sleep(0.35)
            return 41 + 1

        result, trace = trace_memory(work, period_s=0.05)
        assert result == 42
        # one entry sample, one exit sample, and a few periodic ones between
        assert len(trace.samples) >= 4
        assert trace.duration_s() >= 0.3
        times = [t for t, _ in trace.samples]
        assert times == sorted(times)
        assert all(rss > 0 for _, rss in trace.samples)

    def test_sees_a_large_allocation(self):
        def work():
            block = np.ones(64 << 20, dtype=np.uint8)  # 64 MiB held across samples
            time.sleep(0.3)
            return int(block[0])

        _, busy = trace_memory(work, period_s=0.05)
        idle_rss = busy.samples[0][1]
        assert busy.max_rss_gb() * GB >= idle_rss + (48 << 20)

    def test_invariant_holds_on_real_trace(self):
        _, trace = trace_memory(lambda: time.sleep(0.25), period_s=0.05)
        report = report_from_trace("case", (1, 1, 1), trace.duration_s(), trace)
        assert report.total_ram_gbs <= report.max_ram_gb * report.running_time_s + 1e-9
