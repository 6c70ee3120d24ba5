"""Compare the compiled and pure-numpy kernels on sampler- and loss-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Each backend is checked against the other before timing.
"""

import argparse
import timeit

import numpy as np

from atlmetric import _pykernels

try:
    from atlmetric import _ckernels
except ImportError:
    _ckernels = None


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def topk_case(num_products, dim=128, anchors=5, k=28, seed=0):
    rng = np.random.default_rng(seed)
    gallery = unit_rows(rng, num_products, dim)
    q = rng.choice(num_products, anchors, replace=False)
    return (gallery[q], gallery, k, q)


def hinge_case(batch=100, dim=128, triplets=150, seed=0):
    rng = np.random.default_rng(seed)
    emb = unit_rows(rng, batch, dim)
    a = rng.integers(0, batch, triplets)
    p = (a + 1) % batch
    n = (a + rng.integers(2, batch, triplets)) % batch
    return (emb, a, p, n, rng.uniform(0.1, 1.0, triplets))


def best_of(fn, args, repeat, number):
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the numpy backend is available")
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])

    cases = [(f"topk_neighbors n={n}", "topk_neighbors", topk_case(n), 20 if n <= 5000 else 3)
             for n in (1_000, 5_000, 50_000)]
    cases += [(f"triplet_hinge B={b} T={t}", "triplet_hinge", hinge_case(b, triplets=t), 200)
              for b, t in ((100, 150), (400, 2400))]

    print(f"{'kernel':32s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn_name, case, number in cases:
        outs = [getattr(impl, fn_name)(*case) for _, impl in backends]
        for other in outs[1:]:
            for x, y in zip(outs[0], other):
                np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)
        times = [best_of(getattr(impl, fn_name), case, args.repeat, number) for _, impl in backends]
        row = f"{label:32s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
