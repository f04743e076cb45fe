"""Compiled vs pure-numpy adapter kernels.

Times ``merge_forward`` and ``merge_backward`` of both backends on a few layer
shapes and reports the median per call.  Outputs are compared first, so a
speedup is only reported for kernels that agree.

    python benchmarks/bench_kernels.py [--reps 200] [--json out.json]
"""

import argparse
import json
import timeit

import numpy as np

from nanovoice import kernels

SHAPES = [  # (label, d, k, N, r, shared B)
    ("toy q/k/v", 32, 8, 8, 2, True),
    ("toy o", 8, 32, 8, 2, True),
    ("wide", 256, 256, 8, 2, True),
    ("wide batchwise", 256, 256, 8, 2, False),
]


def make_case(d, k, n, r, shared_b, seed=0):
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal((d, k)) / np.sqrt(d)
    b = rng.standard_normal((1 if shared_b else n, d, r)) / np.sqrt(d)
    a = 0.1 * rng.standard_normal((n, r, k))
    m = np.sqrt((w0 * w0).sum(axis=0))[None] * rng.uniform(0.8, 1.2, (n, k))
    g = rng.standard_normal((n, d, k))
    return w0, b, a, m, g


def bench(reps):
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install --no-build-isolation -e .`")
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["compiled"]
    rows = []
    for label, d, k, n, r, shared in SHAPES:
        w0, b, a, m, g = make_case(d, k, n, r, shared)
        fwd = {be.NAME: (lambda be=be: be.merge_forward(w0, b, a, m, 8.0, n, True)) for be in (py, cy)}
        ref, out = fwd["python"](), fwd["compiled"]()
        assert all(np.allclose(x, y, rtol=1e-12, atol=1e-12) for x, y in zip(ref, out)), label
        _, v, norms = ref
        bwd = {be.NAME: (lambda be=be: be.merge_backward(g, v, norms, b, a, m, 8.0, True, False, True))
               for be in (py, cy)}
        assert all(np.allclose(x, y, rtol=1e-10, atol=1e-12) for x, y in zip(bwd["python"](), bwd["compiled"]())), label
        for kernel, fns in (("merge_forward", fwd), ("merge_backward", bwd)):
            times = {}
            for name, fn in fns.items():
                runs = timeit.repeat(fn, number=1, repeat=reps)
                times[name] = float(np.median(runs))
            rows.append({"shape": label, "d": d, "k": k, "N": n, "kernel": kernel,
                         "python_us": 1e6 * times["python"], "compiled_us": 1e6 * times["compiled"],
                         "speedup": times["python"] / times["compiled"]})
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=200)
    parser.add_argument("--json", help="also write the rows to this file")
    args = parser.parse_args()
    rows = bench(args.reps)
    print(f"{'shape':<16}{'kernel':<16}{'python us':>12}{'compiled us':>13}{'speedup':>9}")
    for row in rows:
        print(f"{row['shape']:<16}{row['kernel']:<16}{row['python_us']:>12.1f}{row['compiled_us']:>13.1f}"
              f"{row['speedup']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
