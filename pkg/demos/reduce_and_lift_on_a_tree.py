"""Reduce a BSDE on a random horizon to the market filtration and lift it back.

The random time on this tree is not independent of the market, so
market martingales pick up a drift after being stopped.  The reduced
equation is solved on the market tree alone; lifting its solution gives the
solution on the enlarged tree, which is compared with exact enumeration over
(scenario, default node) pairs.

    python3 demos/reduce_and_lift_on_a_tree.py
"""

import numpy as np

from horizon_bsde.bsde import GeneratorSpec
from horizon_bsde.experiments import tree_reduction_driver, tree_states
from horizon_bsde.laglad import LagladPath
from horizon_bsde.random_time import build_finite_model, enlarge_model, load_bundled
from horizon_bsde.reduction import RewardSpec, lift_solution, reduce_and_solve
from horizon_bsde.verify import residual_f_bsde, residual_g_bsde, solve_g_tree_exact

finite = load_bundled("non-immersion-binomial")
model = build_finite_model(finite)
grid, K = finite.grid, finite.steps
W = tree_states(finite)["W"]

gen = GeneratorSpec(f_r=lambda k, ym, y, z: -0.2 * y + 0.1 + 0.3 * np.sin(y),
                    f_g=lambda k, y, yp: 0.1 * y, lipschitz={"y": 0.5, "g_y": 0.1})
reward = RewardSpec(LagladPath.cadlag(grid, 1.0 + 0.3 * W), LagladPath.cadlag(grid, 0.5 + 0.1 * W ** 2), K)
driver = tree_reduction_driver(finite)

F = reduce_and_solve(gen, model, reward, driver)
print("survival G at the root and after one step:", model.G.at[0, 0], np.unique(model.G.at[:, 1]).round(4))
print("reduced value at time 0:", F.Y.at[0, 0])
print("F-residual:", residual_f_bsde(F, gen, driver, model, reward))

space, jm = enlarge_model(model)
lift = lift_solution(F.take(space.omega), jm, space.theta, reward.take(space.omega))
_, _, G = solve_g_tree_exact(finite, gen, driver, reward)
print("lifted value at time 0:", lift.Y.at[0, 0], " enumeration:", G.Y.at[0, 0])
print("largest gap to enumeration:", np.abs(lift.Y.at - G.Y.at).max())
print("G-residual:", residual_g_bsde(lift, gen, driver.take(space.omega), jm, space.theta,
                                     reward.take(space.omega)))
