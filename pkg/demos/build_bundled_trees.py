"""Regenerate the finite trees shipped in src/horizon_bsde/data.

Each tree is a small complete market with a prescribed conditional law of
the random time.  Run from the repository root:

    python3 demos/build_bundled_trees.py
"""

from pathlib import Path

import numpy as np

from horizon_bsde.random_time import FiniteFiltration

OUT = Path(__file__).resolve().parents[1] / "src" / "horizon_bsde" / "data"


def random_law(rng, n, steps, beyond_weight=1.0):
    law = rng.random((n, steps + 2)) + 0.05
    law[:, 0] = 0.0
    law[:, -1] *= beyond_weight
    return law / law.sum(axis=1, keepdims=True)


def immersion():
    # theta independent of the market: G deterministic, m = 1
    law = np.array([0.0, 0.1, 0.15, 0.2, 0.15, 0.4])
    return FiniteFiltration.binomial(4, law, name="immersion-binomial")


def non_immersion():
    rng = np.random.default_rng(20240611)
    return FiniteFiltration.binomial(4, lambda bits: random_law(rng, bits.shape[0], 4),
                                     name="non-immersion-binomial")


def stopping_time():
    # theta = first node where the walk reaches +2 or -2; an F-stopping time
    def law(bits):
        walk = np.cumsum(np.where(bits == 1, 1, -1), axis=1)
        hit = np.abs(walk) >= 2
        first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, 5)
        out = np.zeros((bits.shape[0], 6))
        out[np.arange(bits.shape[0]), first] = 1.0
        return out

    return FiniteFiltration.binomial(4, law, name="stopping-time-binomial")


def trinomial_poisson():
    q = 0.3
    moves = [[1.0, -q], [-1.0, -q], [0.0, 1.0 - q]]
    probs = [(1 - q) / 2, (1 - q) / 2, q]
    rng = np.random.default_rng(7)
    return FiniteFiltration.product_tree(3, moves, probs, lambda d: random_law(rng, d.shape[0], 3),
                                         name="trinomial-poisson")


def american_put():
    law = np.zeros(6)
    law[-1] = 1.0
    f = FiniteFiltration.binomial(4, law, name="american-put")
    stock = {"s0": 100.0, "up": 1.15, "down": 0.9, "strike": 105.0}
    return FiniteFiltration(f.times, f.probabilities, f.labels, f.increments, f.theta_law, f.name,
                            {"stock": stock})


def class_k_fail():
    # theta = 1 exactly on scenarios whose second move is down; otherwise beyond
    def law(bits):
        out = np.zeros((bits.shape[0], 5))
        down = bits[:, 1] == 0
        out[down, 1] = 1.0
        out[~down, 4] = 1.0
        return out

    return FiniteFiltration.binomial(3, law, name="class-k-fail")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for build in (immersion, non_immersion, stopping_time, trinomial_poisson, american_put, class_k_fail):
        tree = build()
        tree.dump(OUT / f"{tree.name}.json")
        print(f"{tree.name}: {tree.n_scenarios} scenarios, {tree.steps} steps, complete={tree.is_complete()}")
