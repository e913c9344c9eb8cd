"""Compare the compiled and numpy kernel backends on batch-sized inputs.

    python benchmarks/bench_kernels.py [--positions 2000] [--vocab 160] [--dim 16]

Prints one line per kernel with the best-of-``--repeat`` time for each
backend and the speedup, plus an end-to-end SA-ADP training step.
"""

import argparse
import timeit

import numpy as np

from sadp import kernels


def _inputs(n, v, d, seed=0):
    rnd = np.random.default_rng(seed)
    x = rnd.normal(size=(n, d))
    r = rnd.normal(size=(n, v))
    wr = rnd.normal(size=(n, d))
    tokens = rnd.integers(0, v, size=n).astype(np.int64)
    seg_records = np.unique(np.concatenate([[0], np.sort(rnd.integers(1, n, size=n // 20)), [n]])).astype(np.int64)
    singles = np.arange(n + 1, dtype=np.int64)
    targets = rnd.integers(0, v, size=n).astype(np.int64)
    return x, r, wr, tokens, seg_records, singles, targets


def _cases(mod, n, v, d):
    x, r, wr, tokens, seg, singles, targets = _inputs(n, v, d)
    g = np.random.default_rng(1).normal(size=(min(n, 256), 2 * v * d + v))
    out = np.zeros((v, d))
    w = np.ones(n)
    return {
        "segment_sq_norms (per token)": lambda: mod.segment_sq_norms(x, r, wr, tokens, singles),
        "segment_sq_norms (per record)": lambda: mod.segment_sq_norms(x, r, wr, tokens, seg),
        "softmax_xent": lambda: mod.softmax_xent(r.copy(), targets),
        "clip_rows": lambda: mod.clip_rows(g.copy(), 1.0),
        "scatter_add_rows": lambda: mod.scatter_add_rows(out, tokens, wr, w),
    }


def _train_step(n_steps):
    from sadp.noise_policy import NoisePolicy
    from sadp.rng import RngStream
    from sadp.trainer import ModelParams, batch_terms, sa_adp_gradient

    rnd = np.random.default_rng(2)
    params = ModelParams.init(160, 16, RngStream(0))
    windows = [rnd.integers(0, 160, size=21) for _ in range(100)]
    sig = np.where(rnd.random(2000) < 0.05, 3.0, 0.0)
    policy = NoisePolicy()

    def step():
        terms = batch_terms(params, windows)
        sa_adp_gradient(params, terms, sig, policy, RngStream(0, (1,)))

    return min(timeit.repeat(step, number=n_steps, repeat=3)) / n_steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--positions", type=int, default=2000)
    ap.add_argument("--vocab", type=int, default=160)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {sorted(backends)}; active: {kernels.BACKEND}")
    if "cython" not in backends:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    cases = {name: _cases(mod, args.positions, args.vocab, args.dim) for name, mod in backends.items()}
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for kernel in cases["python"]:
        times = {}
        for name in backends:
            t = min(timeit.repeat(cases[name][kernel], number=args.number, repeat=args.repeat))
            times[name] = 1e3 * t / args.number
        cy = times.get("cython")
        line = f"{kernel:32s} {times['python']:10.3f} "
        line += f"{cy:10.3f} {times['python'] / cy:7.1f}x" if cy else f"{'-':>10s} {'-':>8s}"
        print(line)

    import sadp.kernels as k

    step = {}
    for name, mod in backends.items():
        for fn in ("clip_rows", "softmax_xent", "segment_sq_norms", "scatter_add_rows"):
            setattr(k, fn, getattr(mod, fn))
        step[name] = 1e3 * _train_step(10)
    line = f"{'sa_adp step (2000 positions)':32s} {step['python']:10.3f} "
    if "cython" in step:
        line += f"{step['cython']:10.3f} {step['python'] / step['cython']:7.1f}x"
    print(line)


if __name__ == "__main__":
    main()
