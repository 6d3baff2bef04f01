"""Time the compiled kernels against the numpy fallback on probe-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fedready.kernels import available_backends


def cases(batch: int, rng: np.random.Generator):
    x1 = rng.standard_normal((batch, 3, 16, 16))
    w1 = rng.standard_normal((8, 3, 3, 3))
    x2 = rng.standard_normal((batch, 8, 8, 8))
    w2 = rng.standard_normal((16, 8, 3, 3))
    d1 = rng.standard_normal((batch, 8, 16, 16))
    d2 = rng.standard_normal((batch, 16, 8, 8))
    return {
        "conv fwd   L1": lambda k: k.conv2d_forward(x1, w1, np.zeros(8)),
        "conv fwd   L2": lambda k: k.conv2d_forward(x2, w2, np.zeros(16)),
        "grad input L2": lambda k: k.conv2d_grad_input(d2, w2),
        "grad wt    L1": lambda k: k.conv2d_grad_weight(x1, d1, 3),
        "grad wt    L2": lambda k: k.conv2d_grad_weight(x2, d2, 3),
        "pool fwd   L1": lambda k: k.maxpool2_forward(d1),
        "pool bwd   L1": lambda k: k.maxpool2_backward(*_pooled(k, d1)),
    }


def _pooled(k, x):
    out, idx = k.maxpool2_forward(x)
    return out, idx, x.shape[2], x.shape[3]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    backends = available_backends()
    names = sorted(backends, key=lambda n: n != "numpy")
    print(f"batch {args.batch}, best of {args.repeat} runs, milliseconds")
    print(f"{'kernel':<15}" + "".join(f"{n:>10}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for label, fn in cases(args.batch, np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat)) * 1e3 for n in names]
        line = f"{label:<15}" + "".join(f"{t:10.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:9.1f}x"
        print(line)
    if len(names) < 2:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
