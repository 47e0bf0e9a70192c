"""Time the compiled simulator kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the engine's hot calls: a training batch of cavity responses
and a prior pool of qubit-chain spectra.
"""

import argparse
import timeit

import numpy as np

from deepboed import _kernels


def cases(rng):
    for n, batch in ((3, 512), (6, 1500), (6, 65536)):
        omega = rng.normal(size=(batch, n))
        coupling = np.full(n - 1, 2.0)
        kappa = np.full(n, 0.5)
        kappa[[0, -1]] += 0.5
        w = rng.uniform(-12, 12, size=batch)
        yield f"tridiag_columns N={n} batch={batch}", "tridiag_columns", (omega, coupling, kappa, w)
    for n, batch in ((2, 4096), (3, 4096), (4, 4096)):
        d = 2**n
        a = rng.normal(size=(batch, d, d))
        yield f"sym_eigh dim={d} batch={batch}", "sym_eigh", (a + np.swapaxes(a, 1, 2),)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = {"numpy": _kernels.fallback}
    if _kernels.compiled is not None:
        impls["cython"] = _kernels.compiled
    else:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'case':40s} " + " ".join(f"{k:>12s}" for k in impls) + "   speedup")
    for label, fn, inputs in cases(np.random.default_rng(0)):
        best = {}
        for name, mod in impls.items():
            f = getattr(mod, fn)
            best[name] = min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat))
        speed = f"{best['numpy'] / best['cython']:8.2f}x" if "cython" in best else ""
        print(f"{label:40s} " + " ".join(f"{best[k] * 1e3:10.2f}ms" for k in impls) + "  " + speed)


if __name__ == "__main__":
    main()
