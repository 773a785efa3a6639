"""Compare the compiled and pure-numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times im2col/col2im on the shapes a 64x64 depth-3 U-Net hits, then one
forward+backward pass of that network with each backend swapped in. Both
backends are also checked to agree bit for bit on every shape.
"""

import argparse
import json
import time

import numpy as np

from bayeseg import kernels
from bayeseg.unet import BayesUNet, UNetConfig

# (N, C, H, W, k, stride, pad) as seen in a base-8 depth-3 U-Net, batch 4
SHAPES = [
    (4, 1, 64, 64, 3, 1, 1),
    (4, 8, 64, 64, 3, 1, 1),
    (4, 16, 32, 32, 3, 1, 1),
    (4, 32, 16, 16, 3, 1, 1),
    (4, 64, 8, 8, 3, 1, 1),
    (4, 64, 8, 8, 2, 2, 0),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(backends, repeat, rng):
    rows = []
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.normal(size=(n, c, h, w))
        row = {"shape": [n, c, h, w], "k": k, "stride": s, "pad": p}
        outs = {}
        for name, (im2col, col2im) in backends.items():
            cols = im2col(x, k, k, s, p)
            outs[name] = (cols, col2im(cols, c, h, w, k, k, s, p))
            row[f"{name}_im2col_ms"] = 1e3 * best_of(lambda: im2col(x, k, k, s, p), repeat)
            row[f"{name}_col2im_ms"] = 1e3 * best_of(lambda: col2im(cols, c, h, w, k, k, s, p), repeat)
        ref = outs["python"]
        row["identical"] = all(np.array_equal(a, ref[0]) and np.array_equal(b, ref[1])
                               for a, b in outs.values())
        rows.append(row)
    return rows


def bench_network(backends, repeat):
    net = BayesUNet(UNetConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 1, 64, 64))
    out = {}
    saved = kernels._im2col, kernels._col2im
    try:
        for name, (im2col, col2im) in backends.items():
            kernels._im2col, kernels._col2im = im2col, col2im

            def step():
                net.zero_grad()
                logits = net.forward(x, np.random.default_rng(2))
                (logits * logits).sum().backward()

            out[name] = 1e3 * best_of(step, repeat)
    finally:
        kernels._im2col, kernels._col2im = saved
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is timed")
    rows = bench_kernels(backends, args.repeat, np.random.default_rng(0))
    names = list(backends)
    print(f"default backend: {kernels.BACKEND}")
    header = "shape               k s p " + "".join(f"{n + ' im2col':>15}{n + ' col2im':>15}" for n in names)
    print(header + "   identical")
    for r in rows:
        cells = "".join(f"{r[f'{n}_im2col_ms']:13.2f}ms{r[f'{n}_col2im_ms']:13.2f}ms" for n in names)
        print(f"{str(r['shape']):19s} {r['k']} {r['stride']} {r['pad']} {cells}   {r['identical']}")
    net = bench_network(backends, max(1, args.repeat // 2))
    print("U-Net forward+backward, batch 4 at 64x64: "
          + ", ".join(f"{n} {ms:.0f} ms" for n, ms in net.items()))
    if "cython" in net:
        print(f"speedup: {net['python'] / net['cython']:.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"kernels": rows, "network_ms": net}, f, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
