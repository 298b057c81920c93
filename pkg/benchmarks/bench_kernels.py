"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--pixels 8192] [--classes 5] [--repeat 50]

Prints the median time per call for each kernel and backend, and the
speed-up of the compiled module. The default size is one training batch of
eight 32x32 images.
"""
import argparse
import statistics
import timeit

import numpy as np

from incseg import kernels


def _inputs(P, C, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(P, C))
    probs = np.exp(z - z.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    labels = rng.integers(0, C, size=P).astype(np.int64)
    labels[rng.random(P) < 0.2] = 255
    in_set = np.zeros(C, np.uint8)
    in_set[C // 2:] = 1
    k = C - C // 2
    targets = rng.random((P, k))
    channels = np.arange(C // 2, C, dtype=np.int64)
    mask = (rng.random(P) < 0.7).astype(np.uint8)
    gt_rows = rng.integers(-1, C, size=P).astype(np.int64)
    pred_rows = rng.integers(0, C, size=P).astype(np.int64)
    return probs, labels, in_set, targets, channels, mask, gt_rows, pred_rows


def _calls(impl, args, C):
    probs, labels, in_set, targets, channels, mask, gt_rows, pred_rows = args
    counts = np.zeros((C, C), np.int64)
    return {
        "hard_ce": lambda: impl.hard_ce(probs, labels, in_set, 255, 1e-12),
        "soft_ce": lambda: impl.soft_ce(probs, targets, channels, mask, 1e-12),
        "confusion": lambda: impl.confusion(counts, gt_rows, pred_rows),
        "gated_argmax": lambda: impl.gated_argmax(probs, in_set, 0.5, 255),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pixels", type=int, default=8 * 32 * 32)
    ap.add_argument("--classes", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    data = _inputs(args.pixels, args.classes)
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        impl = kernels.load_backend(name)
        for kernel, fn in _calls(impl, data, args.classes).items():
            fn()  # warm up
            times = timeit.repeat(fn, number=1, repeat=args.repeat)
            results[kernel, name] = statistics.median(times)

    print(f"{args.pixels} pixels, {args.classes} classes, median of {args.repeat} calls")
    header = f"{'kernel':<14}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if "compiled" in backends:
        header += f"{'speed-up':>10}"
    print(header)
    for kernel in ("hard_ce", "soft_ce", "confusion", "gated_argmax"):
        line = f"{kernel:<14}" + "".join(f"{results[kernel, b] * 1e6:>16.1f}" for b in backends)
        if "compiled" in backends:
            line += f"{results[kernel, 'python'] / results[kernel, 'compiled']:>9.1f}x"
        print(line)
    if "compiled" not in backends:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
