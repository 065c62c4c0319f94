"""Op-category runtime profiling and throughput measurement.

Every op invocation is attributed to exactly one category through the op
hook. ``reshape`` (reshape/transpose/split/concat copies), ``elementwise``,
``normalization`` and ``softmax`` together form the memory-bound share;
``matmul`` (matmul, linear, conv2d) is the compute-bound share; pooling and
reductions land in ``other``.
"""

from __future__ import annotations

import os
import platform
import statistics
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from effvit.analysis.reports import dumps
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.errors import ContractError, ParameterError

MEMORY_BOUND = ("reshape", "elementwise", "normalization", "softmax")
COMPUTE_BOUND = ("matmul",)


@dataclass
class BenchReport:
    categories: dict[str, dict] = field(default_factory=dict)  # time_s, calls, fraction
    ops: dict[str, dict] = field(default_factory=dict)
    images_per_s: float = 0.0
    overhead: float = 0.0
    env: dict = field(default_factory=dict)

    @property
    def memory_bound_fraction(self) -> float:
        return float(sum(self.categories.get(c, {}).get("fraction", 0.0) for c in MEMORY_BOUND))

    @property
    def compute_fraction(self) -> float:
        return float(sum(self.categories.get(c, {}).get("fraction", 0.0) for c in COMPUTE_BOUND))

    @property
    def total_calls(self) -> int:
        return int(sum(c["calls"] for c in self.categories.values()))

    def to_dict(self) -> dict:
        return {"categories": self.categories, "ops": self.ops, "images_per_s": self.images_per_s,
                "memory_bound_fraction": self.memory_bound_fraction,
                "compute_fraction": self.compute_fraction, "instrumentation_overhead": self.overhead,
                "total_calls": self.total_calls, "env": self.env}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_text(self) -> str:
        lines = [f"{'category':<16}{'calls':>8}{'time (ms)':>12}{'fraction':>10}"]
        for name, c in self.categories.items():
            lines.append(f"{name:<16}{c['calls']:>8}{c['time_s'] * 1e3:>12.3f}{c['fraction']:>10.3f}")
        if self.ops:
            lines.append("")
            lines.append(f"{'op':<16}{'calls':>8}{'time (ms)':>12}{'category':>16}")
            for name, c in self.ops.items():
                lines.append(f"{name:<16}{c['calls']:>8}{c['time_s'] * 1e3:>12.3f}{c['category']:>16}")
        lines.append(f"memory-bound {self.memory_bound_fraction:.3f}  compute {self.compute_fraction:.3f}"
                     f"  {self.images_per_s:.1f} images/s  overhead {self.overhead * 100:.1f}%")
        lines.append("env " + " ".join(f"{k}={v}" for k, v in self.env.items()))
        return "\n".join(lines) + "\n"


def _env(**extra) -> dict:
    d = {"threads": 1, "python": platform.python_version(), "numpy": np.__version__,
         "cpu_count": os.cpu_count()}
    d.update(extra)
    return d


def _run(model, x):
    return model(x)


def profile_model(model, x: T.Tensor, warmup: int = 1, repeats: int = 5,
                  granularity: str = "category") -> BenchReport:
    """Time every op of ``repeats`` forward passes; report medians per category."""
    if getattr(model, "mode", "infer") != "infer":
        raise ContractError("profile_model requires an inference-mode model")
    if warmup < 1 or repeats < 3:
        raise ParameterError("profile_model needs warmup >= 1 and repeats >= 3")
    if granularity not in ("category", "op"):
        raise ParameterError(f"granularity must be 'category' or 'op', got {granularity!r}")

    per_cat: dict[str, list[float]] = defaultdict(list)
    per_op: dict[str, list[float]] = defaultdict(list)
    calls: dict[str, int] = {}
    op_calls: dict[str, int] = {}
    plain, instrumented = [], []
    with T.no_checks():
        for _ in range(warmup):
            _run(model, x)
        for i in range(repeats):
            cat_t: dict[str, float] = defaultdict(float)
            cat_n: dict[str, int] = defaultdict(int)
            op_t: dict[str, float] = defaultdict(float)
            op_n: dict[str, int] = defaultdict(int)

            def hook(name, category, dt, inputs, out):
                cat_t[category] += dt
                cat_n[category] += 1
                op_t[name] += dt
                op_n[name] += 1

            # alternate which pass goes first so drift does not bias the overhead
            for instrument in ((False, True) if i % 2 == 0 else (True, False)):
                t0 = perf_counter()
                if instrument:
                    with T.op_hook(hook):
                        _run(model, x)
                    instrumented.append(perf_counter() - t0)
                else:
                    _run(model, x)
                    plain.append(perf_counter() - t0)
            for c in T.CATEGORIES:
                per_cat[c].append(cat_t[c])
            for name in op_t:
                per_op[name].append(op_t[name])
            calls, op_calls = dict(cat_n), dict(op_n)

    med = {c: statistics.median(per_cat[c]) for c in T.CATEGORIES}
    total = sum(med.values())
    report = BenchReport()
    for c in T.CATEGORIES:
        report.categories[c] = {"time_s": med[c], "calls": calls.get(c, 0),
                                "fraction": med[c] / total if total > 0 else 0.0}
    if granularity == "op":
        for name in sorted(per_op):
            report.ops[name] = {"time_s": statistics.median(per_op[name]), "calls": op_calls[name],
                                "category": T.OP_CATEGORY.get(name, "other")}
    t_plain = statistics.median(plain)
    report.images_per_s = x.shape[0] / t_plain
    report.overhead = statistics.median(instrumented) / t_plain - 1.0
    report.env = _env(dtype=T.DTYPE_NAMES[x.dtype], repeats=repeats, warmup=warmup,
                      batch=x.shape[0], granularity=granularity)
    return report


@dataclass
class ThroughputReport:
    images_per_s: float
    median_s: float
    batch: int
    dtype: str
    repeats: int
    threads: int
    folded: bool
    times_s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_text(self) -> str:
        return (f"{self.images_per_s:.2f} images/s (median {self.median_s * 1e3:.2f} ms, batch {self.batch}, "
                f"{self.dtype}, threads {self.threads}, folded {self.folded})\n")


def throughput(model, batch: int, repeats: int = 10, *, threads: int = 1, seed: int = 0,
               warmup: int = 1, x: T.Tensor | None = None) -> ThroughputReport:
    """images/s = batch / median wall time of one full-batch forward."""
    if batch < 1:
        raise ParameterError(f"batch must be >= 1, got {batch}")
    if repeats < 1 or threads < 1:
        raise ParameterError("repeats and threads must be >= 1")
    dtype = T.DTYPE_NAMES[next(t for _, t in model.named_params()).dtype]
    if x is None:
        r = model.spec.input_resolution
        x = T.uniform((batch, 3, r, r), Rng(seed), -1, 1, dtype=dtype)
    chunks = [T.Tensor(c) for c in np.array_split(x.data, min(threads, batch))]

    def one(chunk):
        with T.no_checks():
            return model(chunk)

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        def forward():
            if pool is None:
                with T.no_checks():
                    model(x)
            else:
                list(pool.map(one, chunks))

        for _ in range(warmup):
            forward()
        times = []
        for _ in range(repeats):
            t0 = perf_counter()
            forward()
            times.append(perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    med = statistics.median(times)
    return ThroughputReport(batch / med, med, batch, dtype, repeats, threads,
                            bool(getattr(model, "folded", False)), times)


def compare_throughput(a, b, batch: int, repeats: int = 15, *, seed: int = 0,
                       warmup: int = 2) -> tuple[ThroughputReport, ThroughputReport]:
    """Measure two models on one input with interleaved runs.

    Alternating the order each round keeps slow machine drift from landing on
    one side only; medians then absorb the remaining scheduler noise.
    """
    if batch < 1:
        raise ParameterError(f"batch must be >= 1, got {batch}")
    dtype = T.DTYPE_NAMES[next(t for _, t in a.named_params()).dtype]
    r = a.spec.input_resolution
    x = T.uniform((batch, 3, r, r), Rng(seed), -1, 1, dtype=dtype)
    times: tuple[list[float], list[float]] = ([], [])
    with T.no_checks():
        for _ in range(warmup):
            a(x)
            b(x)
        for i in range(repeats):
            order = (0, 1) if i % 2 == 0 else (1, 0)
            for k in order:
                m = (a, b)[k]
                t0 = perf_counter()
                m(x)
                times[k].append(perf_counter() - t0)
    out = []
    for m, ts in zip((a, b), times):
        med = statistics.median(ts)
        out.append(ThroughputReport(batch / med, med, batch, dtype, repeats, 1,
                                    bool(getattr(m, "folded", False)), ts))
    return out[0], out[1]
