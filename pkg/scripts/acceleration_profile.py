"""Accelerated vs unaccelerated runs on the synthetic suite.

Prints iterations to reach the target objective per problem and the
performance profile of both variants.  Usage:

    python scripts/acceleration_profile.py --devices 4 --iterations 400 --delta 1e-4
"""
import argparse

import numpy as np

from daba.io import synthetic_suite
from daba.profiles import performance_profile, solved_iteration, target_objective
from daba.runtime import ReferenceConfig, RunConfig, run, run_centralized_reference


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--problems", type=int, default=10)
    ap.add_argument("--devices", type=int, default=4)
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--delta", type=float, default=1e-4)
    ap.add_argument("--reference-iterations", type=int, default=30)
    args = ap.parse_args()

    traces = {True: [], False: []}
    refs = []
    print("seed\tF_ref\taccelerated\tunaccelerated")
    for seed, problem in enumerate(synthetic_suite(args.problems)):
        ref = run_centralized_reference(problem, ReferenceConfig(iterations=args.reference_iterations, criticality_every=0))
        refs.append(min(ref.objectives()))
        hits = {}
        for accelerate in (True, False):
            cfg = RunConfig(devices=args.devices, iterations=args.iterations, criticality_every=0, accelerate=accelerate)
            objectives = run(problem, cfg).objectives()
            traces[accelerate].append(objectives)
            hits[accelerate] = solved_iteration(objectives, refs[-1], args.delta)
        print(f"{seed}\t{refs[-1]:.6e}\t{hits[True]}\t{hits[False]}")

    ratios = []
    for a, b, f in zip(traces[True], traces[False], refs):
        ka, kb = solved_iteration(a, f, args.delta), solved_iteration(b, f, args.delta)
        if ka is not None:
            ratios.append(ka / (kb if kb is not None else args.iterations))
    if ratios:
        print(f"median iteration ratio {np.median(ratios):.3f}")

    profiles = {k: performance_profile(v, refs, args.delta) for k, v in traces.items()}
    print("iteration\taccelerated\tunaccelerated")
    for k in range(0, args.iterations + 1, max(1, args.iterations // 40)):
        print(f"{k}\t{profiles[True][k]:.2f}\t{profiles[False][k]:.2f}")


if __name__ == "__main__":
    main()
