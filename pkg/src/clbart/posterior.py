"""Posterior summaries of the heterogeneous exposure effects.

All summaries are computed per draw first and then reduced across draws,
so transformations (e.g. to the odds-ratio scale) commute with the
summary: OR-scale intervals are quantiles of per-draw exponentials, not
exponentials of log-scale quantiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModeratorKindError
from .forest import Node, Tree, predict_matrix
from .strata import BINARY


@dataclass(frozen=True)
class EffectSummary:
    """Posterior mean and equal-tailed credible interval of a scalar."""

    mean: float
    lower: float
    upper: float
    level: float = 0.95
    draws: np.ndarray = None

    @classmethod
    def from_draws(cls, values, level=0.95, keep_draws=False):
        values = np.asarray(values, dtype=float)
        alpha = (1.0 - level) / 2.0
        lower, upper = np.quantile(values, [alpha, 1.0 - alpha], method="inverted_cdf")
        return cls(
            mean=float(values.mean()),
            lower=float(lower),
            upper=float(upper),
            level=level,
            draws=values if keep_draws else None,
        )

    def exp(self):
        """Summary on the odds-ratio scale (requires retained draws)."""
        if self.draws is None:
            raise ValueError("per-draw values were not retained")
        return EffectSummary.from_draws(np.exp(self.draws), self.level, keep_draws=True)


def average_effect(draws, level=0.95, keep_draws=True):
    """Average conditional exposure effect: per-draw mean of the
    per-stratum effects, summarized across draws."""
    return EffectSummary.from_draws(
        draws.tau.mean(axis=1), level=level, keep_draws=keep_draws
    )


def individual_effects(draws, level=0.95):
    """Per-stratum posterior means and credible intervals as arrays."""
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(
        draws.tau, [alpha, 1.0 - alpha], axis=0, method="inverted_cdf"
    )
    return draws.tau.mean(axis=0), lower, upper


def _partial_average_draws(draws, w_matrix, fixed_idx, fixed_values):
    w_matrix = np.atleast_2d(np.asarray(w_matrix, dtype=float))
    fixed_idx = np.atleast_1d(np.asarray(fixed_idx, dtype=np.int64))
    fixed_values = np.atleast_1d(np.asarray(fixed_values, dtype=float))
    modified = w_matrix.copy()
    modified[:, fixed_idx] = fixed_values
    out = np.empty(draws.n_draws)
    for i in range(draws.n_draws):
        out[i] = predict_matrix(draws.forest_trees(i), modified).mean()
    return out


def partial_dependence(draws, w_matrix, fixed_idx, fixed_values, level=0.95,
                       keep_draws=True):
    """Partial average exposure effect with a moderator subset pinned.

    For each kept draw, the stored forest predicts every stratum's
    moderators with the chosen components overridden; the per-draw average
    over strata is then summarized across draws.
    """
    values = _partial_average_draws(draws, w_matrix, fixed_idx, fixed_values)
    return EffectSummary.from_draws(values, level=level, keep_draws=keep_draws)


def marginal_contribution(draws, w_matrix, moderator, level=0.95, keep_draws=True):
    """Difference in partial averages between the two levels of a binary
    moderator; on the OR scale this is a ratio of odds ratios."""
    kind = draws.moderator_kinds[moderator]
    if kind != BINARY:
        raise ModeratorKindError(
            f"moderator {draws.moderator_names[moderator]!r} is {kind}; marginal "
            "contribution needs a binary moderator (use partial_dependence "
            "with explicit values instead)"
        )
    high = _partial_average_draws(draws, w_matrix, [moderator], [1.0])
    low = _partial_average_draws(draws, w_matrix, [moderator], [0.0])
    return EffectSummary.from_draws(high - low, level=level, keep_draws=keep_draws)


@dataclass(frozen=True)
class VariableImportance:
    """Per-moderator split proportions summarized across draws."""

    names: tuple
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    proportions: np.ndarray  # (S, P_w) per-draw proportions
    any_all_zero: bool       # some draw had a forest with no splits at all


def variable_importance(draws, level=0.95):
    """Proportions of splits attributable to each moderator.

    Draws whose forest contains no splits contribute all-zero proportions
    and raise the ``any_all_zero`` flag.
    """
    counts = draws.split_counts.astype(float)
    totals = counts.sum(axis=1)
    zero = totals == 0
    props = np.zeros_like(counts)
    nz = ~zero
    props[nz] = counts[nz] / totals[nz, None]
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(
        props, [alpha, 1.0 - alpha], axis=0, method="inverted_cdf"
    )
    return VariableImportance(
        names=draws.moderator_names,
        mean=props.mean(axis=0),
        lower=lower,
        upper=upper,
        proportions=props,
        any_all_zero=bool(zero.any()),
    )


@dataclass(frozen=True)
class CartSummary:
    """Single-tree surrogate of the posterior-mean individual effects."""

    tree: Tree
    subset: tuple            # moderator indices the tree may split on
    leaf_table: tuple        # (leaf heap index, n assigned, mean effect)
    summary_r2: float


def _best_split(values, target, min_leaf):
    """Cut maximizing the SSE decrease for one variable, or None."""
    order = np.argsort(values, kind="stable")
    v_sorted = values[order]
    t_sorted = target[order]
    n = len(target)
    csum = np.cumsum(t_sorted)
    csum2 = np.cumsum(t_sorted**2)
    total, total2 = csum[-1], csum2[-1]
    # split after position i (1-indexed count on the left)
    counts = np.arange(1, n)
    left_sse = csum2[:-1] - csum[:-1] ** 2 / counts
    right_sum = total - csum[:-1]
    right_cnt = n - counts
    right_sse = (total2 - csum2[:-1]) - right_sum**2 / right_cnt
    sse = left_sse + right_sse
    valid = (
        (v_sorted[:-1] < v_sorted[1:])
        & (counts >= min_leaf)
        & (right_cnt >= min_leaf)
    )
    if not valid.any():
        return None
    sse = np.where(valid, sse, np.inf)
    best = int(np.argmin(sse))  # ties: lowest position, hence lowest cut value
    return float(v_sorted[best]), float(sse[best])


def cart_summary(tau_hat, w_matrix, subset=None, max_depth=3, min_leaf=None):
    """Greedy variance-reduction regression tree over a moderator subset.

    Splits maximize the SSE decrease of the posterior-mean individual
    effects; ties break toward the lowest variable index then lowest cut
    value, making the summary deterministic. ``summary_r2`` is the share of
    effect variance the surrogate captures (1 when the effects are constant).
    """
    tau_hat = np.asarray(tau_hat, dtype=float)
    w_matrix = np.atleast_2d(np.asarray(w_matrix, dtype=float))
    n = len(tau_hat)
    if subset is None:
        subset = tuple(range(w_matrix.shape[1]))
    subset = tuple(subset)
    if not subset:
        raise ValueError("subset of moderators must be nonempty")
    if min_leaf is None:
        min_leaf = max(1, math.ceil(0.05 * n))
    if min_leaf < 1:
        raise ValueError("min_leaf must be at least 1")

    tree = Tree({1: Node(mu=float(tau_hat.mean()))})

    def grow(index, rows):
        node_target = tau_hat[rows]
        tree.nodes[index].mu = float(node_target.mean())
        if Tree.depth(index) >= max_depth or len(rows) < 2 * min_leaf:
            return
        node_sse = float(np.sum((node_target - node_target.mean()) ** 2))
        if node_sse <= 0:
            return
        best = None  # (sse, var, cut)
        for var in subset:
            found = _best_split(w_matrix[rows, var], node_target, min_leaf)
            if found is None:
                continue
            cut, sse = found
            if best is None or sse < best[0] - 1e-12:
                best = (sse, var, cut)
        if best is None or best[0] >= node_sse - 1e-12:
            return  # no positive SSE gain
        _, var, cut = best
        tree.nodes[index] = Node(var=var, cut=cut)
        go_left = w_matrix[rows, var] <= cut
        tree.nodes[2 * index] = Node(mu=0.0)
        tree.nodes[2 * index + 1] = Node(mu=0.0)
        grow(2 * index, rows[go_left])
        grow(2 * index + 1, rows[~go_left])

    grow(1, np.arange(n))

    assignment = tree.leaf_assignment(w_matrix)
    fitted = tree.predict(w_matrix)
    sst = float(np.sum((tau_hat - tau_hat.mean()) ** 2))
    sse = float(np.sum((tau_hat - fitted) ** 2))
    degenerate = sst <= 1e-12 * n * (1.0 + float(tau_hat.mean()) ** 2)
    r2 = 1.0 if degenerate else 1.0 - sse / sst
    leaf_table = tuple(
        (leaf, int(np.sum(assignment == leaf)), float(tree.nodes[leaf].mu))
        for leaf in tree.leaves()
    )
    return CartSummary(tree=tree, subset=subset, leaf_table=leaf_table, summary_r2=r2)
