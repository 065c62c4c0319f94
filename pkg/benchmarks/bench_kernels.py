"""Compare the compiled and numpy depthwise-conv backends.

Times forward and both backward kernels on the depthwise shapes an M0
forward at 224 actually hits, then an end-to-end M0 forward per backend.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json]
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from time import perf_counter

import numpy as np

from effvit.core import kernels
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.model import build_model

# (B, C, H, W, stride): token mixers, Q depthwise convs and subsample merges of M0
SHAPES = [
    (1, 64, 14, 14, 1),
    (1, 16, 14, 14, 1),
    (1, 256, 14, 14, 2),
    (1, 128, 7, 7, 1),
    (1, 512, 7, 7, 2),
    (1, 192, 4, 4, 1),
    (8, 64, 14, 14, 1),
]


def _median_time(fn, repeats):
    fn()
    ts = []
    for _ in range(repeats):
        t0 = perf_counter()
        fn()
        ts.append(perf_counter() - t0)
    return statistics.median(ts)


def bench_shapes(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for b, c, h, w, s in SHAPES:
        xp = rng.standard_normal((b, c, h + 2, w + 2)).astype(np.float32)
        wt = rng.standard_normal((c, 3, 3)).astype(np.float32)
        ho, wo = (h - 1) // s + 1, (w - 1) // s + 1
        g = rng.standard_normal((b, c, ho, wo)).astype(np.float32)
        row = {"shape": [b, c, h, w], "stride": s}
        for name in kernels.available():
            kernels.set_backend(name)
            row[name] = {
                "forward_us": 1e6 * _median_time(lambda: kernels.dw_forward(xp, wt, s, ho, wo), repeats),
                "grad_input_us": 1e6 * _median_time(lambda: kernels.dw_backward_input(g, wt, s, h + 2, w + 2), repeats),
                "grad_weight_us": 1e6 * _median_time(lambda: kernels.dw_backward_weight(g, xp, s, 3, 3), repeats),
            }
        rows.append(row)
    return rows


def bench_model(repeats):
    model = build_model("M0", Rng(0))
    x = T.uniform((1, 3, 224, 224), Rng(1), -1, 1)
    out = {}
    with T.no_checks():
        for name in kernels.available():
            kernels.set_backend(name)
            out[name] = {"forward_ms": 1e3 * _median_time(lambda: model(x), repeats)}
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    initial = kernels.backend()
    try:
        result = {"backends": kernels.available(), "kernels": bench_shapes(args.repeats),
                  "m0_forward": bench_model(max(3, args.repeats // 4))}
    finally:
        kernels.set_backend(initial)
    if args.json:
        json.dump(result, sys.stdout, indent=2)
        print()
        return
    names = result["backends"]
    print(f"{'shape':<22}{'s':>2}  " + "  ".join(f"{n + ' fwd/gi/gw (us)':>34}" for n in names))
    for row in result["kernels"]:
        cells = []
        for n in names:
            r = row[n]
            cells.append(f"{r['forward_us']:>10.1f}/{r['grad_input_us']:>10.1f}/{r['grad_weight_us']:>10.1f}")
        print(f"{str(row['shape']):<22}{row['stride']:>2}  " + "  ".join(f"{c:>34}" for c in cells))
    print("M0 forward @224, batch 1: " + ", ".join(
        f"{n} {result['m0_forward'][n]['forward_ms']:.1f} ms" for n in names))


if __name__ == "__main__":
    main()
