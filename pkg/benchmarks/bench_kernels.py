"""Time the compiled kernels against the numpy fallback.

Shapes follow the SRE's conv stack on a batch of 8 one-second clips:
the first layer (kernel 10, stride 5 over 16000 samples, 1 channel) and a
later layer (kernel 3, stride 2 over 799 frames, 64 channels).

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from wavmtl import _kernels_py

try:
    from wavmtl import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    first = rng.standard_normal((8, 16000, 1))
    later = rng.standard_normal((8, 799, 64))
    first_cols = _kernels_py.unfold1d(first, 10, 5)
    later_cols = _kernels_py.unfold1d(later, 3, 2)
    acts = rng.standard_normal((8, 3199, 64))
    return [
        ("unfold1d k10 s5 (8x16000x1)", lambda m: m.unfold1d(first, 10, 5)),
        ("unfold1d k3 s2 (8x799x64)", lambda m: m.unfold1d(later, 3, 2)),
        ("fold1d k10 s5 (8x16000x1)", lambda m: m.fold1d(first_cols, 16000, 10, 5)),
        ("fold1d k3 s2 (8x799x64)", lambda m: m.fold1d(later_cols, 799, 3, 2)),
        ("gelu (8x3199x64)", lambda m: m.gelu(acts)),
    ]


def best_ms(fn, repeat):
    number = 5
    return 1000 * min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, call in cases(rng):
        a, b = call(_kernels_py), call(_ckernels)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)
        slow = best_ms(lambda: call(_kernels_py), args.repeat)
        fast = best_ms(lambda: call(_ckernels), args.repeat)
        print(f"{name:32s} {slow:10.3f} {fast:12.3f} {slow / fast:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
