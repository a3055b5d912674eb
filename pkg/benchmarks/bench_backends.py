"""Time the compiled and numpy kernel backends on the same inputs.

    python benchmarks/bench_backends.py --size 128 --repeat 3

Reports the best wall time per operation and the max abs difference
between backend outputs.
"""
import argparse
import time

import numpy as np

from pkn import _backend
from pkn.filtering import ParamMap, filter_plane, upsample_continuous
from pkn.kernels import Family, KernelSpec


def best_time(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(size, rng):
    plane = rng.uniform(0.0, 1.0, (size, size))
    img = plane[None]
    for fam in (Family.NLM, Family.ISO_GAUSSIAN, Family.ANISO_GAUSSIAN):
        spec = KernelSpec(fam)
        full = np.stack(
            [rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), (size, size))
             for lo, hi in spec.remap_ranges])
        for grad in (False, True):
            name = f"{fam.value} filter{' + grad' if grad else ''}"
            yield name, lambda b, s=spec, f=full, g=grad: filter_plane(plane, f, s, 0.1, g, backend=b)[0]
    aniso = KernelSpec(Family.ANISO_GAUSSIAN)
    pmap = ParamMap.constant(aniso, (0.6, 0.4, 0.3), size // 2, size // 2)
    yield "upsample x1.8", lambda b: upsample_continuous(img, pmap, 1.8, backend=b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    names = _backend.available()
    if "cython" not in names:
        print("compiled backend not built; only numpy is available")
    rng = np.random.default_rng(args.seed)
    print(f"image {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'operation':22s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}{'max diff':>11s}")
    for label, fn in cases(args.size, rng):
        times, outs = [], []
        for n in names:
            t, out = best_time(lambda: fn(n), args.repeat)
            times.append(t)
            outs.append(out)
        line = f"{label:22s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
        if len(names) == 2:
            fast = times[names.index("cython")]
            slow = times[names.index("numpy")]
            line += f"{slow / fast:9.1f}x{np.abs(outs[0] - outs[1]).max():11.1e}"
        print(line)


if __name__ == "__main__":
    main()
