"""Chain orchestration: backfitting sweep, hyperparameter updates, storage.

One iteration updates the confounder coefficients, then cycles through the
trees -- each tree's structure gets one grow/prune/change proposal and its
leaf values are refreshed by adaptive rejection sampling, with the
likelihood offset by the predictions of the other trees -- and finally the
split probabilities, their concentration, and the leaf-prior scale. The
ensemble prediction per stratum is maintained incrementally with a periodic
exact refresh to bound floating-point drift.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .clr import PackedStrata, clr_fit, loglik_terms
from .forest import ForestParams, Tree, forest_from_records, forest_to_records
from .moves import DEFAULT_MOVE_PROBS, LikelihoodContext, propose_move
from .updates import (
    AdaptiveScale,
    ars_sample_leaf,
    default_concentration_grid,
    update_beta,
    update_concentration,
    update_sigma_mu,
    update_split_probs,
)

DRAWS_FORMAT = "clbart-draws/1"


@dataclass(frozen=True)
class SamplerConfig:
    """Chain settings; a fixed seed makes the run fully reproducible."""

    n_trees: int = 25
    k: float = 1.0
    gamma: float = 0.95
    xi: float = 2.0
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    move_probs: tuple = DEFAULT_MOVE_PROBS
    beta_prior_scale: float = None  # None means a flat prior
    concentration_grid_points: int = 39
    concentration_beta_prior: tuple = (0.5, 1.0)
    sigma_mu_step_sd: float = 0.5
    refresh_every: int = 500
    debug: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        probs = tuple(float(p) for p in self.move_probs)
        if len(probs) != 3 or any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
            raise ValueError("move_probs must be three nonnegative numbers summing to 1")
        object.__setattr__(self, "move_probs", probs)
        object.__setattr__(
            self, "concentration_beta_prior", tuple(self.concentration_beta_prior)
        )

    @property
    def n_kept(self):
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in samples of everything the summaries need."""

    beta: np.ndarray             # (S, P_x)
    tau: np.ndarray              # (S, n) per-stratum exposure effects
    sigma_mu: np.ndarray         # (S,)
    split_counts: np.ndarray     # (S, P_w)
    tree_node_counts: np.ndarray  # (S, M)
    loglik: np.ndarray           # (S, n) per-stratum log-likelihoods
    total_loglik: np.ndarray     # (S,)
    forests: list                # serialized forest per draw
    config: SamplerConfig
    moderator_names: tuple = ()
    moderator_kinds: tuple = ()
    confounder_names: tuple = ()
    accept_rates: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.tau.shape[0]

    @property
    def n_strata(self):
        return self.tau.shape[1]

    def forest_trees(self, draw):
        """Deserialize the forest kept at a given draw index."""
        return forest_from_records(self.forests[draw])

    def save(self, path):
        header = {
            "format": DRAWS_FORMAT,
            "config": self.config.to_dict(),
            "moderator_names": list(self.moderator_names),
            "moderator_kinds": list(self.moderator_kinds),
            "confounder_names": list(self.confounder_names),
            "n_strata": int(self.n_strata),
            "n_draws": int(self.n_draws),
            "accept_rates": self.accept_rates,
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i in range(self.n_draws):
                rec = {
                    "beta": self.beta[i].tolist(),
                    "tau": self.tau[i].tolist(),
                    "sigma_mu": float(self.sigma_mu[i]),
                    "split_counts": self.split_counts[i].tolist(),
                    "tree_node_counts": self.tree_node_counts[i].tolist(),
                    "loglik": self.loglik[i].tolist(),
                    "total_loglik": float(self.total_loglik[i]),
                    "forest": self.forests[i],
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != DRAWS_FORMAT:
                raise ValueError(f"unsupported draws format {header.get('format')!r}")
            rows = [json.loads(line) for line in fh if line.strip()]
        return cls(
            beta=np.array([r["beta"] for r in rows], dtype=float),
            tau=np.array([r["tau"] for r in rows], dtype=float),
            sigma_mu=np.array([r["sigma_mu"] for r in rows], dtype=float),
            split_counts=np.array([r["split_counts"] for r in rows], dtype=np.int64),
            tree_node_counts=np.array(
                [r["tree_node_counts"] for r in rows], dtype=np.int64
            ),
            loglik=np.array([r["loglik"] for r in rows], dtype=float),
            total_loglik=np.array([r["total_loglik"] for r in rows], dtype=float),
            forests=[r["forest"] for r in rows],
            config=SamplerConfig.from_dict(header["config"]),
            moderator_names=tuple(header["moderator_names"]),
            moderator_kinds=tuple(header["moderator_kinds"]),
            confounder_names=tuple(header["confounder_names"]),
            accept_rates=header.get("accept_rates", {}),
        )


class _StepTuner:
    """Windowed multiplicative tuning for a scalar random-walk step."""

    def __init__(self, step, window=100, low=0.18, high=0.28):
        self.step = step
        self.window = window
        self.low = low
        self.high = high
        self.frozen = False
        self._history = []

    def record(self, accepted):
        if self.frozen:
            return
        self._history.append(bool(accepted))
        if len(self._history) >= self.window:
            rate = sum(self._history) / len(self._history)
            if rate > self.high:
                self.step *= 1.1
            elif rate < self.low:
                self.step *= 0.9
            self._history.clear()


def _tree_pred(tree, leaf_of):
    """Per-stratum prediction from a cached leaf assignment."""
    leaves = np.array(tree.leaves(), dtype=np.int64)
    values = np.array([tree.nodes[int(i)].mu for i in leaves])
    if leaves[-1] < 4096:  # dense lookup while heap indices stay small
        lut = np.zeros(leaves[-1] + 1)
        lut[leaves] = values
        return lut[leaf_of]
    return values[np.searchsorted(leaves, leaf_of)]


def run_chain(dataset, config, progress=None):
    """Run one MCMC chain and return the kept draws.

    Initialization: confounder coefficients from the frequentist
    conditional logistic fit (which also seeds the proposal covariance),
    all trees root-only with zero leaves, leaf-prior scale at k / sqrt(M),
    uniform split probabilities. Identifiability errors from the seeding
    fit propagate.
    """
    packed = PackedStrata.from_dataset(dataset)
    n = packed.n_strata
    p_x = packed.x.shape[1]
    p_w = packed.w.shape[1]
    M = config.n_trees
    rng = np.random.Generator(np.random.Philox(config.seed))

    if p_x:
        seed_fit = clr_fit(dataset)
        beta = seed_fit.beta_hat.copy()
        scale = AdaptiveScale(v_beta=seed_fit.covariance)
        conf_part = packed.x @ beta
    else:
        beta = np.zeros(0)
        scale = None
        conf_part = np.zeros(packed.z.shape[0])

    trees = [Tree() for _ in range(M)]
    leaf_of = [np.ones(n, dtype=np.int64) for _ in range(M)]
    tree_pred = [np.zeros(n) for _ in range(M)]
    lam = np.zeros(n)
    sigma_mu = config.k / math.sqrt(M)
    s = np.full(p_w, 1.0 / p_w) if p_w else np.zeros(0)
    a = float(p_w) if p_w else 1.0
    params = ForestParams(
        trees=trees, gamma=config.gamma, xi=config.xi, s=s, a=a,
        sigma_mu=sigma_mu, k=config.k,
    )
    grid_fracs = default_concentration_grid(config.concentration_grid_points)
    sigma_tuner = _StepTuner(config.sigma_mu_step_sd)

    n_kept = config.n_kept
    kept = {
        "beta": np.zeros((n_kept, p_x)),
        "tau": np.zeros((n_kept, n)),
        "sigma_mu": np.zeros(n_kept),
        "split_counts": np.zeros((n_kept, p_w), dtype=np.int64),
        "tree_node_counts": np.zeros((n_kept, M), dtype=np.int64),
        "loglik": np.zeros((n_kept, n)),
        "total_loglik": np.zeros(n_kept),
    }
    forests = []
    move_stats = {k: [0, 0] for k in ("grow", "prune", "change")}
    beta_acc = [0, 0]
    beta_acc_post = [0, 0]
    sigma_acc = [0, 0]

    for it in range(1, config.iterations + 1):
        if p_x:
            beta, conf_part, accepted = update_beta(
                packed, beta, conf_part, lam, scale, rng,
                prior_scale=config.beta_prior_scale,
            )
            beta_acc[0] += accepted
            beta_acc[1] += 1
            if it > config.burn_in:
                beta_acc_post[0] += accepted
                beta_acc_post[1] += 1

        for m in range(M):
            lam_r = lam - tree_pred[m]
            ctx = LikelihoodContext(
                packed=packed, conf_part=conf_part, offsets=lam_r,
                w=packed.w, leaf_of=leaf_of[m],
            )
            outcome = propose_move(trees[m], params, ctx, rng, config.move_probs)
            move_stats[outcome.kind][1] += 1
            if outcome.accepted:
                move_stats[outcome.kind][0] += 1
                trees[m] = outcome.proposed_tree
                leaf_of[m] = outcome.new_leaf_of
                ctx.leaf_of = outcome.new_leaf_of
                params.trees[m] = outcome.proposed_tree

            tree = trees[m]
            for leaf in tree.leaves():
                parts = ctx.parts(ctx.members(leaf))
                tree.nodes[leaf].mu = ars_sample_leaf(
                    parts, params.sigma_mu, rng, warm_start=tree.nodes[leaf].mu
                )
            tree_pred[m] = _tree_pred(tree, leaf_of[m])
            lam = lam_r + tree_pred[m]

        if p_w:
            u = np.zeros(p_w, dtype=np.int64)
            for t in trees:
                u += t.split_counts(p_w)
            params.s = update_split_probs(u, params.a, rng)
            params.a = update_concentration(
                params.s, rng, grid_fracs, config.concentration_beta_prior
            )
        else:
            u = np.zeros(0, dtype=np.int64)

        leaf_values = np.concatenate([t.leaf_values() for t in trees])
        new_sigma, accepted = update_sigma_mu(
            leaf_values, config.k, M, params.sigma_mu, rng, sigma_tuner.step
        )
        sigma_tuner.record(accepted)
        sigma_acc[0] += accepted
        sigma_acc[1] += 1
        params.sigma_mu = new_sigma

        if it == config.burn_in:
            if scale is not None:
                scale.freeze()
            sigma_tuner.frozen = True

        if it % config.refresh_every == 0:
            for m in range(M):
                leaf_of[m] = trees[m].leaf_assignment(packed.w)
                tree_pred[m] = _tree_pred(trees[m], leaf_of[m])
            lam = np.sum(tree_pred, axis=0) if M else np.zeros(n)

        if config.debug and it % 100 == 0:
            exact = np.zeros(n)
            for m in range(M):
                exact += trees[m].predict(packed.w)
            if not np.allclose(lam, exact, atol=1e-8):
                raise AssertionError("ensemble offset drifted from tree predictions")

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            pos = (it - config.burn_in) // config.thin - 1
            ll = loglik_terms(packed, conf_part, lam)
            kept["beta"][pos] = beta
            kept["tau"][pos] = lam
            kept["sigma_mu"][pos] = params.sigma_mu
            kept["split_counts"][pos] = u
            kept["tree_node_counts"][pos] = [t.n_nodes for t in trees]
            kept["loglik"][pos] = ll
            kept["total_loglik"][pos] = ll.sum()
            forests.append(forest_to_records(trees))

        if progress is not None and it % progress == 0:
            print(f"iteration {it}/{config.iterations}", flush=True)

    def rate(pair):
        return pair[0] / pair[1] if pair[1] else 0.0

    accept_rates = {
        "beta": rate(beta_acc),
        "beta_post_burn_in": rate(beta_acc_post),
        "sigma_mu": rate(sigma_acc),
        **{k: rate(v) for k, v in move_stats.items()},
    }
    return PosteriorDraws(
        beta=kept["beta"],
        tau=kept["tau"],
        sigma_mu=kept["sigma_mu"],
        split_counts=kept["split_counts"],
        tree_node_counts=kept["tree_node_counts"],
        loglik=kept["loglik"],
        total_loglik=kept["total_loglik"],
        forests=forests,
        config=config,
        moderator_names=dataset.moderator_names,
        moderator_kinds=dataset.moderator_kinds,
        confounder_names=dataset.confounder_names,
        accept_rates=accept_rates,
    )


@dataclass(frozen=True)
class WaicResult:
    waic: float
    p_waic: float
    lppd: float
    single_draw: bool = False


def compute_waic(loglik_matrix):
    """Widely-applicable information criterion from pointwise log-likelihoods.

    ``loglik_matrix`` has one row per posterior draw and one column per
    stratum. lppd sums the log of the draw-averaged likelihood per stratum
    (stabilized); the effective-parameter term sums the across-draw sample
    variances. A single draw yields p_waic = 0 with a warning flag.
    """
    ll = np.atleast_2d(np.asarray(loglik_matrix, dtype=float))
    n_draws = ll.shape[0]
    shift = ll.max(axis=0)
    lppd = float(
        np.sum(shift + np.log(np.mean(np.exp(ll - shift), axis=0)))
    )
    if n_draws < 2:
        return WaicResult(waic=-2.0 * lppd, p_waic=0.0, lppd=lppd, single_draw=True)
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WaicResult(
        waic=-2.0 * (lppd - p_waic), p_waic=p_waic, lppd=lppd, single_draw=False
    )
