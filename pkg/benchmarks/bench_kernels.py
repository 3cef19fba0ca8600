"""Compare the compiled and numpy causal-softmax kernels on attention-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--batch 8] [--heads 4] [--length 264] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from breen import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--length", type=int, default=264)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    shape = (args.batch, args.heads, args.length, args.length)
    x = rng.standard_normal(shape, dtype=np.float32)
    g = rng.standard_normal(shape, dtype=np.float32)
    scale = 0.25

    p_np = kernels.causal_softmax_forward_np(x, scale)
    rows = [("numpy", kernels.causal_softmax_forward_np, kernels.causal_softmax_backward_np)]
    if kernels.BACKEND == "compiled":
        p_c = kernels.causal_softmax_forward(x, scale)
        err_f = np.abs(p_c - p_np).max()
        err_b = np.abs(kernels.causal_softmax_backward(p_c, g, scale) - kernels.causal_softmax_backward_np(p_np, g, scale)).max()
        print(f"max abs diff: forward {err_f:.2e}  backward {err_b:.2e}")
        rows.append(("compiled", kernels.causal_softmax_forward, kernels.causal_softmax_backward))
    else:
        print("compiled kernel not built; timing the numpy fallback only")

    print(f"shape {shape} float32, best of {args.repeat}")
    base = None
    for name, fwd, bwd in rows:
        tf = min(timeit.repeat(lambda: fwd(x, scale), number=1, repeat=args.repeat))
        tb = min(timeit.repeat(lambda: bwd(p_np, g, scale), number=1, repeat=args.repeat))
        base = base or tf + tb
        print(f"{name:>9}: forward {tf * 1e3:7.2f} ms  backward {tb * 1e3:7.2f} ms  speedup {base / (tf + tb):.2f}x")


if __name__ == "__main__":
    main()
