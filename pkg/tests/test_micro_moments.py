"""Longer-run distributional checks on the micro problem and desk benchmarks."""

import math

import numpy as np
import pytest

from clbart.forest import ForestParams, Node, Tree
from clbart.moves import propose_move
from clbart.sampler import SamplerConfig, run_chain
from clbart.simbench import ScenarioSpec, simulate_cohort
from clbart.strata import Dataset, Stratum

from oracle_micro import make_micro_strata, micro_taubar_moments
from test_moves import make_context


def test_paper_thinning_arithmetic():
    cfg = SamplerConfig(iterations=10000, burn_in=5000, thin=5)
    assert cfg.n_kept == 1000


def test_taubar_marginal_matches_quadrature():
    d = make_micro_strata(tau0=-0.2, tau1=0.45, seed=11)
    want_mean, want_sd = micro_taubar_moments(d.strata)
    cfg = SamplerConfig(n_trees=1, iterations=50000, burn_in=10000, thin=1, seed=29)
    draws = run_chain(d, cfg)
    taubar = draws.tau.mean(axis=1)
    assert abs(float(taubar.mean()) - want_mean) < 0.02
    assert abs(float(taubar.std(ddof=1)) - want_sd) < 0.2 * want_sd


def test_beta_post_burn_in_acceptance_band_on_cart_benchmark():
    spec = ScenarioSpec(scenario="cart", n_individuals=2000, seed=77)
    dataset, _ = simulate_cohort(spec)
    cfg = SamplerConfig(n_trees=5, iterations=3000, burn_in=1500, thin=5, seed=3)
    draws = run_chain(dataset, cfg)
    rate = draws.accept_rates["beta_post_burn_in"]
    assert 0.1 <= rate <= 0.45


def test_accept_ratio_ignores_strata_at_unaffected_leaves():
    # a change proposal at one NOG node must not see data routed elsewhere
    rng = np.random.default_rng(0)
    strata = []
    for i in range(24):
        w = [float(i % 2), float((i // 2) % 2), rng.uniform()]
        strata.append(
            Stratum(id=i, case_index=int(rng.integers(4)),
                    z=rng.normal(size=4), x=np.zeros((4, 0)), w=w)
        )
    d1 = Dataset(tuple(strata), ("w_1", "w_2", "w_3"),
                 ("binary", "binary", "continuous"), ())
    # perturb one stratum with w_1 = 1 (routed to the right leaf, away from
    # the NOG node at index 2 whose children split the w_1 = 0 strata)
    bumped = list(strata)
    s = strata[1]
    bumped[1] = Stratum(id=s.id, case_index=s.case_index, z=s.z * 2.0 - 0.3,
                        x=s.x, w=s.w)
    d2 = Dataset(tuple(bumped), d1.moderator_names, d1.moderator_kinds, ())

    tree = Tree({
        1: Node(var=0, cut=0.0),
        2: Node(var=1, cut=0.0),
        3: Node(mu=0.3),
        4: Node(mu=-0.4),
        5: Node(mu=0.1),
    })
    params = ForestParams(trees=[tree], s=np.array([0.4, 0.4, 0.2]))
    ratios = []
    for d in (d1, d2):
        ctx = make_context(d, tree=tree)
        rng_move = np.random.default_rng(5)
        # prune and change both act on the unique NOG node (index 2)
        out = propose_move(tree, params, ctx, rng_move, move_probs=(0.0, 0.5, 0.5))
        ratios.append((out.kind, out.log_accept_ratio))
    assert ratios[0] == ratios[1]
    assert math.isfinite(ratios[0][1])
