"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --instances 5 --max-iter 200

Each backend attacks the same instances with the iterative methods; the
script reports wall time per attack and checks that both backends land on
the same adversarial example.
"""

import argparse
import time

import numpy as np

from mladv import harness, kernels
from mladv.attacks import AttackConfig, run_attack
from mladv.netcore import TrainConfig, forward, input_jacobian, train


def _setup(args):
    ds = harness.synth_dataset(args.d, args.l, 1000, seed=args.seed)
    p = train(ds.instances, TrainConfig(rng_seed=args.seed))
    X = harness.collect_attackable(ds.instances, p)
    strategy = harness.StrategySpec("random_case", args.instances, rng_seed=args.seed)
    return p, harness.make_specs(X, strategy)


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=400)
    ap.add_argument("--l", type=int, default=20)
    ap.add_argument("--instances", type=int, default=5)
    ap.add_argument("--max-iter", type=int, default=200)
    ap.add_argument("--search-steps", type=int, default=3)
    ap.add_argument("--methods", default="mlcw,rank1,rank2")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    p, pairs = _setup(args)
    cfg = AttackConfig(max_iter=args.max_iter, binary_search_steps=args.search_steps)
    x0 = pairs[0][0].features

    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    rows = {
        "forward x1000": lambda: [forward(p, x0) for _ in range(1000)],
        "jacobian x100": lambda: [input_jacobian(p, x0, np.arange(args.l)) for _ in range(100)],
    }
    for m in args.methods.split(","):
        rows[f"{m} per attack"] = (
            lambda m=m: [run_attack(m, inst.features, inst.labels, spec, p, cfg)
                         for inst, spec in pairs])
    results = {}
    for name, fn in rows.items():
        times = []
        for b in backends:
            with kernels.use_backend(b):
                t, out = _time(fn, args.repeat)
            if name.endswith("per attack"):
                t /= len(pairs)
            times.append(t)
            results[(name, b)] = out
        speed = times[-1] / times[0] if len(times) > 1 and times[0] > 0 else 1.0
        print(f"{name:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + f"{speed:>9.1f}x")

    if len(backends) > 1:
        worst = 0.0
        for m in args.methods.split(","):
            a = results[(f"{m} per attack", "cython")]
            b = results[(f"{m} per attack", "python")]
            for ra, rb in zip(a, b):
                worst = max(worst, float(np.max(np.abs(ra.x_star - rb.x_star))))
        print(f"max |x_star difference| between backends: {worst:.3g}")


if __name__ == "__main__":
    main()
