"""Q-learning on the bandit and point-mass tasks over several seeds.

Prints the bandit greedy action and the point-mass mean return over the last
10 episodes next to the uniform-random baseline.
"""

import argparse
import time

import numpy as np

from icnn import rl


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--solver", choices=("bundle", "gradient"), default="bundle")
    ap.add_argument("--skip-bandit", action="store_true")
    args = ap.parse_args()

    baseline = rl.random_policy_return(rl.env_pointmass(), 100, seed=0)
    print(f"point-mass uniform-random baseline over 100 episodes: {baseline:.1f}")
    for seed in args.seeds:
        if not args.skip_bandit:
            env, cfg = rl.env_bandit(), rl.preset("bandit", seed=seed, solver=args.solver)
            params, _ = rl.run_q_learning(env, cfg)
            a = env.to_env(rl.select_action(params, np.ones(1), cfg))[0]
            print(f"seed {seed}: bandit greedy action {a:.4f} (optimum 0.4)")
        t = time.process_time()
        env, cfg = rl.env_pointmass(), rl.preset("pointmass", seed=seed, solver=args.solver)
        params, log = rl.run_q_learning(env, cfg)
        last10 = np.mean([r[2] for r in log[-10:]])
        greedy = rl.greedy_return(params, env, cfg, 10, seed=10_000)
        print(f"seed {seed}: point-mass last-10 mean {last10:.1f}, greedy {greedy:.1f}, "
              f"ratio to random {last10 / baseline:.3f}, {time.process_time() - t:.0f} s CPU", flush=True)


if __name__ == "__main__":
    main()
