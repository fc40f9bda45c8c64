"""American put on the bundled four-step binomial tree.

The reflected engine with a zero generator and the payoff as barrier must
reproduce plain backward induction.  The reflection increments only fire
where the price touches the payoff.

    python3 demos/american_put_on_a_tree.py
"""

import numpy as np

from horizon_bsde.bsde import DriverSpec, GeneratorSpec
from horizon_bsde.experiments import backward_induction, tree_states
from horizon_bsde.laglad import LagladPath
from horizon_bsde.random_time import load_bundled
from horizon_bsde.rbsde import rstep1_laglad_solve, skorokhod_audit

finite = load_bundled("american-put")
grid, K = finite.grid, finite.steps
stock = finite.meta["stock"]
S = tree_states(finite)["S"]
payoff = np.maximum(float(stock["strike"]) - S, 0.0)

sol = rstep1_laglad_solve(GeneratorSpec(), DriverSpec(grid, finite.increments),
                          LagladPath.cadlag(grid, payoff), payoff[:, K], finite.ce())
V = backward_induction(finite, payoff)
audit = skorokhod_audit(sol.Y, sol.L, finite.probabilities, eps_c=1e-12, eps_b=1e-12)

print(f"strike {stock['strike']}, {finite.n_scenarios} scenarios, {K} steps")
print(f"price from the reflected engine   {sol.Y.at[0, 0]:.12f}")
print(f"price from backward induction     {V[0, 0]:.12f}")
print(f"largest node gap                  {np.abs(sol.Y.at - V).max():.2e}")
print(f"Skorokhod sums (regular, right)   {audit.regular_sum:.2e}, {audit.right_sum:.2e}")

# exercise region: the increment over (t_{k-1}, t_k] pushes the value at node k-1
push = sol.L.l_r_increments > 0
for k in range(1, K + 1):
    hit = np.unique(S[push[:, k], k - 1])
    if hit.size:
        print(f"  node {k - 1}: exercise at stock levels {np.round(hit, 4).tolist()}")
