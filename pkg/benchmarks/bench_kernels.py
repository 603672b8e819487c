"""Time the selection kernels under both backends, plus one training phase.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes match the default experiment: 1000 candidates, 32-d features, up to
8 old classes, 200 placebos per refill, herding over 1000 class samples.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from placebocil import kernels


def cases(rng):
    feats = rng.normal(size=(1000, 32))
    old = rng.normal(size=(8, 32))
    new = rng.normal(size=(2, 32))
    ids = np.arange(1000, dtype=np.int64)
    scores = rng.normal(size=(1000, 8))
    return {
        "cosine_matrix 1000x8": lambda k: k.cosine_matrix(feats, old),
        "score_matrix 1000x8": lambda k: k.score_matrix(feats, old, new, 1.0, 1.0),
        "greedy_select k=25 c=8": lambda k: k.greedy_select(scores, 25, ids),
        "herding_order k=5 n=1000": lambda k: k.herding_order(feats, 5),
    }


def bench_phase(repeat: int) -> float:
    from placebocil.config import ExperimentConfig
    from placebocil.data import SyntheticSpec
    from placebocil.trainer import run_experiment

    cfg = ExperimentConfig(class_counts=[2, 4], task=SyntheticSpec(num_classes=4), policy_iters=2)
    return min(timeit.repeat(lambda: run_experiment(cfg), number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-phase", action="store_true", help="only time the kernels")
    args = ap.parse_args()

    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the NumPy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases(rng).items():
        times = []
        for b in backends:
            mod = kernels.get_backend(b)
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times.append(min(t.repeat(repeat=args.repeat, number=n)) / n)
        line = f"{name:28s}" + "".join(f"{t * 1e6:12.1f}us" for t in times)
        if len(times) == 2:
            line += f"   {times[0] / times[1]:6.2f}x"
        print(line)
    if not args.skip_phase:
        print(f"\ntwo-phase run with the active backend ({kernels.BACKEND}): {bench_phase(3):.2f}s")


if __name__ == "__main__":
    main()
