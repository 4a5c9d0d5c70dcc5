"""Short PPO run followed by a learned-vs-random comparison.

Trains on a handful of L-shaped Poisson instances for a few iterations,
then reports the relative error of the learned policy and of a random
refinement policy matched to the same element counts, per penalty value.

    python3 demos/train_small.py [iterations]
"""
import sys

import numpy as np

from hradapt.env import Task, run_episode
from hradapt.harness import ExperimentConfig, instance_seed, make_instance, matched_random_episode
from hradapt.ppo import train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 6
cfg = ExperimentConfig(
    train_count=4, eval_count=2, ref_depth=3, alpha_count=4,
    train=dict(iterations=iters, phase1_iters=iters // 3, transitions_per_iter=64),
)


def tasks(split, n):
    out = []
    for i in range(n):
        inst, mesh = make_instance(cfg, instance_seed(cfg, split, i))
        out.append(Task.build(inst, mesh, cfg.ref_depth))
    return out


tc = cfg.train_config()
params, norm, _ = train(
    tc, tasks("train", cfg.train_count),
    log=lambda r: print(f"iter {r['iteration']:3d} phase {r['phase']} err_rel {r['mean_err_rel']:.3f} "
                        f"elements {r['mean_elements']:.0f} loss {r['loss']:.3f}"),
)

rng = np.random.default_rng(0)
for task in tasks("eval", cfg.eval_count):
    for a in cfg.alphas():
        ep = run_episode(task, float(a), params, tc.policy, tc.env, training=False, normalizer=norm)
        counts = [row["elements"] for row in ep.log[:-1]]
        _, rand_err = matched_random_episode(task, counts, rng)
        print(f"alpha {a:.2e}: {ep.mesh.n_elements:5d} elements, learned {ep.error_rel():.4f}, random {rand_err:.4f}")
