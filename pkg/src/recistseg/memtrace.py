"""Resident-memory tracing for the efficiency harness.

A sampler thread polls the process RSS at a fixed period while the measured
computation runs on the calling thread. The RAM-time area under the curve is
the trapezoid integral of the samples; "GB" throughout means 2^30 bytes.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field

import psutil

GB = float(1 << 30)


@dataclass
class MemoryTrace:
    """(seconds since start, rss bytes) samples at a fixed period."""

    samples: list[tuple[float, int]]
    sample_period_s: float

    def __post_init__(self):
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trace timestamps must be strictly increasing")

    def max_rss_gb(self) -> float:
        if not self.samples:
            return 0.0
        return max(rss for _, rss in self.samples) / GB

    def auc_gbs(self) -> float:
        """Trapezoid integral of RSS over time, in GB*s."""
        total = 0.0
        for (t0, r0), (t1, r1) in zip(self.samples, self.samples[1:]):
            total += (t1 - t0) * (r0 + r1) / 2.0
        return total / GB

    def duration_s(self) -> float:
        if len(self.samples) < 2:
            return 0.0
        return self.samples[-1][0] - self.samples[0][0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t_s", "rss_bytes"])
            writer.writerows(self.samples)


@dataclass
class EfficiencyReport:
    """Per-case efficiency summary; AUC can never exceed max RSS x time."""

    case_id: str
    image_shape: tuple[int, int, int]
    running_time_s: float
    max_ram_gb: float
    total_ram_gbs: float

    def __post_init__(self):
        if self.total_ram_gbs > self.max_ram_gb * self.running_time_s + 1e-9:
            raise ValueError(
                f"RAM-time AUC {self.total_ram_gbs} exceeds "
                f"max {self.max_ram_gb} GB x {self.running_time_s} s"
            )

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "image_shape": list(self.image_shape),
            "running_time_s": round(self.running_time_s, 3),
            "max_ram_gb": round(self.max_ram_gb, 4),
            "total_ram_gbs": round(self.total_ram_gbs, 6),
        }


@dataclass
class _Sampler:
    period_s: float
    samples: list = field(default_factory=list)

    def __post_init__(self):
        self._stop = threading.Event()
        self._proc = psutil.Process()
        self._t0 = time.perf_counter()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _sample_once(self):
        t = time.perf_counter() - self._t0
        rss = self._proc.memory_info().rss
        if self.samples and t <= self.samples[-1][0]:
            return  # clock did not advance measurably; drop the sample
        self.samples.append((t, rss))

    def _run(self):
        while not self._stop.wait(self.period_s):
            self._sample_once()

    def __enter__(self):
        self._sample_once()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._sample_once()


def trace_memory(run, period_s: float = 0.1):
    """Execute run() while sampling RSS; returns (result, MemoryTrace)."""
    sampler = _Sampler(period_s)
    with sampler:
        result = run()
    return result, MemoryTrace(samples=sampler.samples, sample_period_s=period_s)


def report_from_trace(
    case_id: str,
    image_shape: tuple[int, int, int],
    running_time_s: float,
    trace: MemoryTrace,
) -> EfficiencyReport:
    return EfficiencyReport(
        case_id=case_id,
        image_shape=tuple(int(v) for v in image_shape),
        running_time_s=float(running_time_s),
        max_ram_gb=trace.max_rss_gb(),
        total_ram_gbs=trace.auc_gbs(),
    )
