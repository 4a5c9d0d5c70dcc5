"""Compare uniform, oracle and ZZ refinement on one L-shaped instance.

Prints element counts and relative errors per step and writes an SVG of
the final oracle mesh next to this script.

    python3 demos/heuristic_sweep.py
"""
import os

from hradapt import baselines as B
from hradapt.env import Task
from hradapt.harness import ExperimentConfig, instance_seed, make_instance, render_svg

cfg = ExperimentConfig(ref_depth=3)
inst, mesh = make_instance(cfg, instance_seed(cfg, "eval", 0))
task = Task.build(inst, mesh, cfg.ref_depth)
print(f"initial mesh: {mesh.n_elements} elements, {len(inst.means)} load components")

runs = {
    "uniform": B.HeuristicConfig("uniform", steps=2),
    "oracle": B.HeuristicConfig("oracle", theta=0.3, steps=4),
    "zz": B.HeuristicConfig("zz", theta=0.3, steps=3, initial_uniform_steps=1),
}
for name, hc in runs.items():
    tr = B.run_heuristic(hc, inst, mesh, task.ref)
    steps = ", ".join(f"{r['elements']}:{r['err_rel']:.3g}" for r in tr.log)
    print(f"{name:8s} elements:err_rel  {steps}")
    if name == "oracle":
        out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "oracle_mesh.svg")
        with open(out, "w") as fh:
            fh.write(render_svg(tr.final_mesh, tr.final_field))
        print(f"wrote {out}")
