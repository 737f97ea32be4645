"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times batched QR and EIG at the shapes a 20:12:4:W4 network sees, one
training epoch on the synthetic task, and the full gradient-check suite.
"""
import argparse
import time

import numpy as np

from grnet import data, gradcheck, linalg, net, optim


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    x = rng.standard_normal((30, 4, 12, 3))
    a = rng.standard_normal((30, 4, 6, 6))
    a = a + np.swapaxes(a, -1, -2)
    big = rng.standard_normal((30, 4, 20, 20))
    big = big + np.swapaxes(big, -1, -2)
    train, _ = data.gen_synthetic(3, 100, 20, 3, 0.1, seed=0)
    cfg = net.NetworkConfig(20, 3, 3, [net.BlockSpec.parse("20:12:4:W4")])
    return {
        "qr 120 x (12x3)": lambda: linalg.thin_qr(x),
        "eig 120 x (6x6)": lambda: linalg.sym_eig(a),
        "eig 120 x (20x20)": lambda: linalg.sym_eig(big),
        "train 1 epoch (300 samples)": lambda: optim.train(net.build(cfg), train, epochs=1),
        "gradcheck suite (1 seed)": lambda: gradcheck.run_suite(seeds=(0,)),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = ["cython", "python"]
    results = {}
    for name in backends:
        try:
            prev = linalg.set_backend(name)
        except ImportError as err:
            print(f"skipping {name}: {err}")
            continue
        try:
            for label, fn in cases(np.random.default_rng(0)).items():
                results.setdefault(label, {})[name] = best_of(fn, args.repeat)
        finally:
            linalg.set_backend(prev)
    print(f"{'case':<30}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for label, row in results.items():
        cells = "".join(f"{row[b] * 1e3:>10.2f}ms" if b in row else f"{'-':>12}" for b in backends)
        speed = f"{row['python'] / row['cython']:>9.1f}x" if len(row) == 2 else ""
        print(f"{label:<30}{cells}{speed}")


if __name__ == "__main__":
    main()
