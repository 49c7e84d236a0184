"""Time lora_addon on the compiled and pure-Python SGMV backends.

    python benchmarks/bench_sgmv.py --repeat 50
"""
import argparse
import timeit

import numpy as np

from loraserve import sgmv

CASES = [
    # (label, segment sizes, h1, h2, rank)
    ("decode distinct 32", [1] * 32, 4096, 4096, 16),
    ("decode uniform 32", [6, 6, 5, 5, 5, 5], 4096, 4096, 16),
    ("decode identical 32", [32], 4096, 4096, 16),
    ("small distinct 64", [1] * 64, 128, 128, 16),
    ("prefill + decode", [200] + [1] * 31, 4096, 4096, 16),
]


def bench(repeat, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for label, sizes, h1, h2, rank in CASES:
        batch = sgmv.random_batch(rng, sizes, h1, h2, rank)
        per = {}
        for name in sgmv.available_backends():
            sgmv.set_backend(name)
            sgmv.lora_addon(batch)
            per[name] = min(timeit.repeat(lambda: sgmv.lora_addon(batch), number=1, repeat=repeat))
        rows.append((label, per))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args(argv)
    default = sgmv.BACKEND
    try:
        rows = bench(args.repeat)
    finally:
        sgmv.set_backend(default)
    names = sgmv.available_backends()
    print(f"{'case':<22}" + "".join(f"{n + ' us':>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, per in rows:
        line = f"{label:<22}" + "".join(f"{1e6 * per[n]:>14.1f}" for n in names)
        if "cython" in per and "python" in per:
            line += f"{per['python'] / per['cython']:>10.2f}x"
        print(line)
    if len(names) == 1:
        print("compiled extension not built; only the python backend was timed")


if __name__ == "__main__":
    main()
