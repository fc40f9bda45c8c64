"""Default time tied to the first jump of a Poisson process.

Runs the bundled ``example132`` configuration: Brownian and Poisson paths,
the piecewise solve before and after the first jump with the fixed point at
the jump, the lift and the G-residual on four grids.  Prints the reports and
the refinement table.

    python3 demos/default_after_first_jump.py [paths]
"""

import sys
from pathlib import Path

import horizon_bsde
from horizon_bsde.experiments import ExperimentConfig, run_experiment

cfg = ExperimentConfig.load(Path(horizon_bsde.__file__).parent / "configs" / "example132.json")
if len(sys.argv) > 1:
    data = dict(cfg.data, solver={**cfg.solver, "paths": int(sys.argv[1])})
    cfg = ExperimentConfig.from_dict(data)

res = run_experiment(cfg)
for rep in res.reports:
    print(rep)

slope = next(r for r in res.reports if r.name == "G-residual refinement slope")
print("\nsteps  G-residual")
for steps, err in zip(slope.details["steps"], slope.details["errors"]):
    print(f"{steps:5d}  {err:.3e}")
print(f"\nwall time {res.timings['total']:.1f}s")
