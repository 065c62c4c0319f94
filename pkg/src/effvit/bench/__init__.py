"""Runtime profiling by op category and throughput measurement."""

from effvit.bench.profile import (
    COMPUTE_BOUND,
    MEMORY_BOUND,
    BenchReport,
    ThroughputReport,
    compare_throughput,
    profile_model,
    throughput,
)

__all__ = ["BenchReport", "COMPUTE_BOUND", "MEMORY_BOUND", "ThroughputReport", "compare_throughput", "profile_model", "throughput"]
