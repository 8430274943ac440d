"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from wima import _backend
from wima.harness import load_config, run_experiment
from wima.model import ModelSpec, init_params

CASES = [
    ("logistic d=10 C=10", ModelSpec("logistic", 10, 10)),
    ("mlp1 d=32 H=64 C=10", ModelSpec("mlp1", 32, 10, 64, "relu")),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    rows = []
    for label, spec in CASES:
        p = init_params(spec, 0).values
        X = rng.normal(size=(100, spec.input_dim))
        y = rng.integers(0, spec.num_classes, 100)
        order = np.stack([rng.permutation(100) for _ in range(3)]).astype(np.int64)
        kind, d, h, c, act = spec.kernel_args
        for name, mod in backends.items():
            t_grad = best_of(lambda: mod.loss_grad(kind, p, X[:5], y[:5], d, h, c, act), args.repeat * 200)
            t_sgd = best_of(lambda: mod.local_sgd(kind, p, X, y, order, 5, 0.1, 0.0, 0.0, 0.0, p, None,
                                                  d, h, c, act), args.repeat)
            rows.append((label, name, t_grad * 1e6, t_sgd * 1e3))

    print(f"{'model':<22} {'backend':<8} {'loss_grad B=5 (us)':>19} {'local_sgd 60 steps (ms)':>24}")
    for label, name, g, s in rows:
        print(f"{label:<22} {name:<8} {g:>19.1f} {s:>24.2f}")

    cfg = load_config("configs/alpha0_synthetic.json").with_server(rounds=100)
    print("\nend-to-end: alpha=0 synthetic task, 100 rounds")
    for name in backends:
        with _backend.use(name):
            t = best_of(lambda: run_experiment(cfg), max(1, args.repeat // 2))
        print(f"  {name:<8} {t:.3f} s")


if __name__ == "__main__":
    main()
