"""Compare the compiled and numpy lattice kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times forward, backward, transition expectations and Viterbi on random
lattices of a few shapes, then one full training epoch per backend.
"""

import argparse
import time

import numpy as np

from noisy_ner import lattice as lt
from noisy_ner import noise, synthetic, trainer

SHAPES = [(10, 7), (25, 9), (60, 17)]


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_kernels(backend, repeat):
    k = lt._load_backend(backend)
    rng = np.random.default_rng(0)
    rows = []
    for n, L in SHAPES:
        em = rng.normal(size=(n, L))
        tr = rng.normal(size=(L + 2, L + 2))
        alpha, z = k.forward(em, tr)
        beta = k.backward(em, tr)
        reps = 200

        def loop(f):
            return lambda: [f() for _ in range(reps)]

        rows.append(
            {
                "shape": f"{n}x{L}",
                "forward": _time(loop(lambda: k.forward(em, tr)), repeat) / reps,
                "backward": _time(loop(lambda: k.backward(em, tr)), repeat) / reps,
                "expect": _time(loop(lambda: k.transition_expectations(em, tr, alpha, beta, z)), repeat) / reps,
                "viterbi": _time(loop(lambda: k.viterbi(em, tr)), repeat) / reps,
            }
        )
    return rows


def bench_epoch(backend, repeat):
    previous = lt.kernels
    lt.use_backend(backend)
    try:
        clean = synthetic.generate(500, seed=0)
        noisy, _ = noise.perturb(clean, noise.PerturbationConfig(seed=0))
        cfg = trainer.TrainConfig(epochs=1).with_tau(0.1, 0.15)
        prepared = trainer.Prepared.of(noisy)
        return _time(lambda: trainer.fit(noisy, cfg, prepared=prepared, keep_records=False), repeat)
    finally:
        lt.kernels = previous


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    backends = lt.available_backends()
    print(f"backends: {', '.join(backends)}")
    results = {b: bench_kernels(b, args.repeat) for b in backends}
    header = f"{'backend':8} {'shape':7} " + " ".join(f"{c:>11}" for c in ("forward", "backward", "expect", "viterbi"))
    print(header)
    for b, rows in results.items():
        for r in rows:
            cells = " ".join(f"{r[c] * 1e6:9.1f}us" for c in ("forward", "backward", "expect", "viterbi"))
            print(f"{b:8} {r['shape']:7} {cells}")
    print()
    epochs = {b: bench_epoch(b, args.repeat) for b in backends}
    for b, t in epochs.items():
        print(f"one confidence-aware epoch, 500 sentences, {b}: {t:.3f}s")
    if len(epochs) == 2:
        print(f"speedup: {epochs['python'] / epochs['cython']:.1f}x")


if __name__ == "__main__":
    main()
