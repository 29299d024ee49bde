"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--dim 3312] [--experts 4] [--repeat 200]

Prints per-kernel mean wall time for each backend, the speedup, and the max
absolute difference between their outputs.
"""

import argparse
import time

import numpy as np

from smat import _kernels_py

try:
    from smat import _kernels as _compiled
except ImportError:
    _compiled = None


def _time(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        out = fn()
    return (time.perf_counter() - t) / repeat, out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def cases(dim, m, rng):
    la = rng.normal(0, 2, dim)
    u = rng.uniform(1e-6, 1 - 1e-6, dim)
    pre, delta = rng.normal(size=dim), rng.normal(size=dim)
    alpha = rng.dirichlet(np.ones(m))
    gates = np.clip(rng.uniform(-0.3, 1.3, (m, dim)), 0, 1)
    _, w = _kernels_py.merge_forward(pre, delta, alpha, gates)
    g = rng.normal(size=dim)
    a, b = rng.normal(size=(75, 16)), rng.normal(size=(25, 16))
    ma, mb = (rng.random(dim) > 0.5).astype(float), (rng.random(dim) > 0.5).astype(float)
    return {
        "hard_concrete_gate": lambda k: k.hard_concrete_gate(la, u, 2 / 3, -0.1, 1.1),
        "deterministic_gate": lambda k: k.deterministic_gate(la, -0.1, 1.1),
        "merge_forward": lambda k: k.merge_forward(pre, delta, alpha, gates),
        "merge_backward": lambda k: k.merge_backward(g, delta, alpha, gates, w),
        "pairwise_sqdist": lambda k: k.pairwise_sqdist(a, b),
        "support_counts": lambda k: k.support_counts(ma, mb),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=3312)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"dim={args.dim} experts={args.experts} repeat={args.repeat}")
    if _compiled is None:
        print("compiled backend unavailable; timing the numpy fallback only")
    print(f"{'kernel':<20}{'python us':>12}{'cython us':>12}{'speedup':>10}{'max diff':>12}")
    for name, call in cases(args.dim, args.experts, rng).items():
        tp, op = _time(lambda: call(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:<20}{tp * 1e6:>12.1f}{'-':>12}{'-':>10}{'-':>12}")
            continue
        tc, oc = _time(lambda: call(_compiled), args.repeat)
        print(f"{name:<20}{tp * 1e6:>12.1f}{tc * 1e6:>12.1f}{tp / tc:>10.2f}{_maxdiff(op, oc):>12.2e}")


if __name__ == "__main__":
    main()
