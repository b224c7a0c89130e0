"""Time the numba kernels against the pure-numpy fallback, plus one model step.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--cols 100] [--repeat 20]

Prints a table of median microseconds per call for each backend.
"""
import argparse
import statistics
import time

import numpy as np

from blrp import _kernels as K
from blrp import tensor as T
from blrp.model import BLRPModel, preset


def median_us(fn, repeat):
    fn()  # warm-up (and JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e6 * statistics.median(times)


def cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    live = np.ones((rows, cols), dtype=np.bool_)
    y = K.softmax_fwd(x, live)
    xhat, rstd = K.layer_norm_fwd(x, 1e-12)
    _, cdf = K.gelu_fwd(x)
    model = BLRPModel(preset("listops-desk"))
    tokens = [rng.integers(1, 17, size=120).tolist() for _ in range(8)]

    def step():
        with T.Tape() as tape:
            loss = T.cross_entropy(model.batch_logits(tokens), [0] * 8)
        tape.backward(loss, model.params)

    return {
        "softmax_fwd": lambda: K.softmax_fwd(x, live),
        "softmax_bwd": lambda: K.softmax_bwd(y, g),
        "layer_norm_fwd": lambda: K.layer_norm_fwd(x, 1e-12),
        "layer_norm_bwd": lambda: K.layer_norm_bwd(g, xhat, rstd),
        "gelu_fwd": lambda: K.gelu_fwd(x),
        "gelu_bwd": lambda: K.gelu_bwd(x, cdf, g),
        "model_step(8x120)": step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    backends = K.available_backends()
    results = {}
    for name in backends:
        K.set_backend(name)
        for op, fn in cases(args.rows, args.cols, np.random.default_rng(0)).items():
            results.setdefault(op, {})[name] = median_us(fn, args.repeat)
    print(f"{'kernel':<20}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    for op, by in results.items():
        speed = by["numpy"] / by["numba"] if "numba" in by else float("nan")
        print(f"{op:<20}" + "".join(f"{by[b]:>12.1f}us" for b in backends) + f"   {speed:6.2f}x")


if __name__ == "__main__":
    main()
