"""Time the compiled flow density-gradient kernel against the numpy one.

    python benchmarks/bench_kernels.py [--dims 6 51 101] [--repeats 200]

Both kernels get the same packed flow (weights perturbed away from the
identity initialization) and the same points; the script checks that they
agree before timing them.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from mhpinn import _flowkern_py
from mhpinn.flows import FlowModel, pack
from mhpinn.rng import make_rng

try:
    from mhpinn import _flowkern
except ImportError:
    _flowkern = None


def random_flow(dim, kind, seed=0):
    flow = FlowModel.create(dim, kind, n_bijectors=10, widths=(100, 100), seed=seed)
    rng = make_rng(seed, 99)
    for b in flow.bijectors:
        for p in b.params:
            p += 0.05 * rng.standard_normal(p.shape)
    flow.invalidate()
    return flow


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[6, 51, 101])
    ap.add_argument("--kinds", nargs="+", default=["maf", "realnvp"])
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args(argv)
    if _flowkern is None:
        print("compiled kernel not built; only the numpy kernel is timed")
    print(f"{'kind':<8}{'D':>5}{'numpy us':>12}{'cython us':>12}{'speedup':>9}{'max diff':>11}")
    for kind in args.kinds:
        for dim in args.dims:
            pk = pack(random_flow(dim, kind))
            h = make_rng(1, dim).standard_normal(dim)
            lp_np, g_np = _flowkern_py.flow_logp_grad(pk, h)
            t_np = min(timeit.repeat(lambda: _flowkern_py.flow_logp_grad(pk, h),
                                     number=args.repeats, repeat=3)) / args.repeats
            if _flowkern is None:
                print(f"{kind:<8}{dim:>5}{t_np * 1e6:>12.1f}{'-':>12}{'-':>9}{'-':>11}")
                continue
            lp_c, g_c = _flowkern.flow_logp_grad(pk, h)
            diff = max(abs(lp_c - lp_np), float(np.abs(g_c - g_np).max()))
            t_c = min(timeit.repeat(lambda: _flowkern.flow_logp_grad(pk, h),
                                    number=args.repeats, repeat=3)) / args.repeats
            print(f"{kind:<8}{dim:>5}{t_np * 1e6:>12.1f}{t_c * 1e6:>12.1f}"
                  f"{t_np / t_c:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
