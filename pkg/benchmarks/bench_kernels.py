"""Compare the compiled and numpy im2col/col2im kernels, and a full conv step.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are loaded side by side; outputs are checked for equality
before timing.
"""
import argparse
import timeit

import numpy as np

from selfcorr.tensor import _kernels_py

try:
    from selfcorr.tensor import _ckernels
except ImportError:
    _ckernels = None

# (N, C, H, W, k, stride, pad): shapes seen in training at 32x32
CASES = [
    (8, 3, 32, 32, 3, 1, 1),
    (8, 16, 32, 32, 3, 2, 1),
    (8, 32, 16, 16, 3, 2, 1),
    (8, 64, 4, 4, 3, 1, 1),
]


def _conv_step(mod, x, w, stride, pad):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = mod.im2col(x, k, k, stride, pad)
    out = w.reshape(cout, -1) @ cols
    gcols = w.reshape(cout, -1).T @ out
    return mod.col2im(gcols, n, c, h, wd, k, k, stride, pad)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = {"numpy": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing numpy only")

    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'kernel':<10}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for n, c, h, w, k, s, p in CASES:
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        wt = rng.normal(size=(16, c, k, k)).astype(np.float32)
        ref = _kernels_py.im2col(x, k, k, s, p)
        for mod in backends.values():
            np.testing.assert_array_equal(mod.im2col(x, k, k, s, p), ref)
        jobs = {
            "im2col": lambda m: m.im2col(x, k, k, s, p),
            "col2im": lambda m: m.col2im(ref, n, c, h, w, k, k, s, p),
            "step": lambda m: _conv_step(m, x, wt, s, p),
        }
        for name, job in jobs.items():
            t = {b: min(timeit.repeat(lambda: job(m), number=1, repeat=args.repeat)) * 1e3
                 for b, m in backends.items()}
            speed = f"{t['numpy'] / t['cython']:>9.2f}x" if "cython" in t else ""
            label = f"{n}x{c}x{h}x{w} k{k} s{s}"
            print(f"{label:<28}{name:<10}" + "".join(f"{v:>10.3f}ms" for v in t.values()) + speed)


if __name__ == "__main__":
    main()
