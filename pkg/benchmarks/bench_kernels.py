"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from dpmesh import kernels
from dpmesh.accounting import _pack


def cases(rng):
    A = rng.standard_normal((400, 400))
    H = A @ A.T
    X14 = rng.standard_normal((14, 14))
    X14 = X14 + X14.T
    X = rng.standard_normal((600, 600))
    X = X + X.T
    idx, lengths = _pack([np.sort(rng.choice(600, 20, replace=False)) for _ in range(2000)])
    G = rng.standard_normal((300, 300))
    G = G @ G.T
    return {
        "cholesky_psd 400": lambda k: k.cholesky_psd(H, 1e-10),
        "max_sign_quadform 14": lambda k: k.max_sign_quadform(X14),
        "pattern_abs_sums 2000x20": lambda k: k.pattern_abs_sums(X, idx, lengths),
        "toeplitz_gram 300": lambda k: k.toeplitz_gram(G),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.backends()
    names = sorted(impls)
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for n in names:
            k = impls[n]
            fn(k)
            times.append(min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)))
        row = f"{label:28s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(names) > 1:
            row += f"  {times[names.index('python')] / times[names.index('cython')]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
