"""Compare the compiled and interpreted forward-planning kernels.

    python benchmarks/bench_planner.py [--queue 64] [--stages 4] [--repeat 2000]

Both kernels run on identical random queues; results must match exactly.
"""

import argparse
import timeit

import numpy as np

from lemix import _kernels


def make_inputs(rng, n_queue, n_stages):
    fwd = rng.uniform(0.01, 0.1, n_stages)
    prev_end = np.cumsum(rng.uniform(0.0, 0.2, n_stages))
    starts = np.sort(rng.uniform(0.0, 10.0, n_queue))
    bdur = rng.uniform(0.01, 0.2, (n_queue, n_stages))
    bstart = np.empty((n_queue, n_stages))
    bend = np.empty((n_queue, n_stages))
    for k in range(n_queue):
        t = starts[k]
        for s in range(n_stages - 1, -1, -1):
            bstart[k, s] = t
            bend[k, s] = t + bdur[k, s]
            t = bend[k, s]
    return 0.0, fwd, prev_end, True, bstart, bend, bdur, n_queue // 4


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queue", type=int, default=64, help="pending training tasks")
    ap.add_argument("--stages", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    inputs = make_inputs(np.random.default_rng(args.seed), args.queue, args.stages)
    fast, slow = _kernels.plan_forward, _kernels.plan_forward_py
    a, b = fast(*inputs), slow(*inputs)
    for x, y in zip(a, b):
        if not np.array_equal(np.asarray(x), np.asarray(y)):
            raise SystemExit("kernels disagree")

    t_fast = min(timeit.repeat(lambda: fast(*inputs), number=args.repeat, repeat=3)) / args.repeat
    t_slow = min(timeit.repeat(lambda: slow(*inputs), number=args.repeat, repeat=3)) / args.repeat
    label = "numba" if _kernels.USE_NUMBA else "python (numba disabled)"
    print(f"queue={args.queue} stages={args.stages}")
    print(f"{label:>24}: {t_fast * 1e6:9.2f} us/call")
    print(f"{'python':>24}: {t_slow * 1e6:9.2f} us/call")
    print(f"{'speedup':>24}: {t_slow / t_fast:9.1f}x")


if __name__ == "__main__":
    main()
