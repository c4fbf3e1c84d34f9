"""Time the compiled rollout kernels against the numpy fallback.

Usage: python benchmarks/bench_rollout.py [--repeats 5] [--n-traj 2000]

Both backends consume the same uniform draws, so their outputs are also
compared for equality.
"""

import argparse
import time

import numpy as np

from cqlflow import envs, rollout
from cqlflow.mdp_env import _cdf


def best_time(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mdp", default="distractor-grid-0")
    p.add_argument("--n-traj", type=int, default=2000)
    p.add_argument("--mc-steps", type=int, default=200_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    mdp = envs.make_mdp(args.mdp)
    beh = envs.make_behavior(mdp)
    rng = np.random.default_rng(args.seed)
    tc, pc, ic = _cdf(mdp.transition), _cdf(beh.probs), _cdf(mdp.initial_dist)
    u_init = rng.random(args.n_traj)
    u = rng.random((args.n_traj, mdp.horizon, 2))
    u_mc = rng.random((args.mc_steps, 4))

    backends = ["python"] + (["cython"] if rollout.BACKEND == "cython" else [])
    print(f"mdp={args.mdp} states={mdp.n_states} active backend={rollout.BACKEND}")
    results = {}
    for name in backends:
        t_roll, roll = best_time(lambda: rollout.sample_trajectories(
            tc, pc, ic, mdp.reward, mdp.terminal, u_init, u, backend=name), args.repeats)
        t_mc, mc = best_time(lambda: rollout.geometric_returns(
            tc, pc, ic, mdp.reward, mdp.gamma, u_mc, backend=name), args.repeats)
        results[name] = (roll, mc)
        print(f"{name:>7}  sample_trajectories({args.n_traj} traj) {t_roll * 1e3:9.2f} ms   "
              f"geometric_returns({args.mc_steps} steps) {t_mc * 1e3:9.2f} ms")
        results[name + "_t"] = (t_roll, t_mc)
    if "cython" in backends:
        same = all(np.array_equal(a, b) for a, b in zip(results["python"][0], results["cython"][0]))
        same = same and np.allclose(results["python"][1], results["cython"][1], rtol=0, atol=1e-12)
        sp = [p / c for p, c in zip(results["python_t"], results["cython_t"])]
        print(f"speedup  rollout x{sp[0]:.1f}  monte-carlo x{sp[1]:.1f}  outputs identical: {same}")


if __name__ == "__main__":
    main()
