"""Tree-structure proposals: grow, prune, change, and their acceptance ratios.

Grow and prune jump between parameter spaces of different dimension, so the
Metropolis-Hastings ratio carries, besides prior and likelihood factors, the
structural proposal terms (which node was eligible on each side) and the
density of the sampled leaf values under the Laplace-approximation proposal.
Change keeps the shape fixed and the structural terms cancel.

Leaf values are proposed from Normal(m, v^2) where m maximizes the
penalized leaf objective (conditional log-likelihood at the backfitting
offsets plus the Normal(0, sigma_mu^2) log prior) and v^-2 is the penalized
Fisher information at m. Reverse-move densities are computed by a fresh fit
at the reverse state's warm start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .clr import LinearPredictorParts
from .forest import Node, Tree, sample_split_rule, split_prob

FISHER_TOL = 1e-8
FISHER_MAX_ITER = 50
GROW, PRUNE, CHANGE = "grow", "prune", "change"
DEFAULT_MOVE_PROBS = (0.3, 0.3, 0.4)

_LOG_2PI = math.log(2.0 * math.pi)


def _normal_logpdf(x, mean, sd):
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


@dataclass(frozen=True)
class LeafProposal:
    """A sampled leaf value with its Laplace proposal moments and density."""

    m: float
    v: float
    value: float
    log_density: float


@dataclass(frozen=True)
class MoveOutcome:
    """Result of one structure proposal on one tree."""

    kind: str
    proposed_tree: Tree
    log_accept_ratio: float
    accepted: bool
    new_leaf_of: np.ndarray = None  # per-stratum leaf assignment when accepted


@dataclass(frozen=True)
class MoveSide:
    """One side (current or proposed) of a move, as seen by the ratio."""

    tree: Tree
    node: int
    leaf_values: tuple
    loglik: float
    log_g: float


def laplace_fit(parts, sigma_mu, warm_start=0.0):
    """Mode and scale of the Normal approximation to a leaf's conditional.

    Fisher scoring from ``warm_start``; on non-convergence, falls back to a
    bracketed maximization of the likelihood alone followed by Brent-style
    scalar optimization of the penalized objective. Returns ``None`` when
    the fallback also fails (the caller rejects the proposal).
    """
    if parts.n_strata == 0:
        return 0.0, sigma_mu
    prec0 = 1.0 / sigma_mu**2
    mu = float(warm_start)
    for _ in range(FISHER_MAX_ITER):
        score, info = parts.score_info(mu)
        grad = score - mu * prec0
        curv = info + prec0
        if abs(grad) < FISHER_TOL:
            # apply the certifying step too: in flat regions the gradient
            # criterion alone leaves the mode localized only to grad/curv
            return mu + grad / curv, 1.0 / math.sqrt(curv)
        mu = mu + grad / curv
        if not math.isfinite(mu) or abs(mu) > 1e8:
            break
    return _laplace_fallback(parts, sigma_mu, float(warm_start))


def _laplace_fallback(parts, sigma_mu, warm_start):
    score_at = lambda u: parts.score_info(u)[0]
    lo, hi = warm_start - 5.0, warm_start + 5.0
    width = 10.0
    s_lo, s_hi = score_at(lo), score_at(hi)
    for _ in range(40):
        if s_lo > 0.0 > s_hi:
            break
        width *= 2.0
        if s_lo <= 0.0:
            lo -= width
            s_lo = score_at(lo)
        if s_hi >= 0.0:
            hi += width
            s_hi = score_at(hi)
        if width > 1e7:
            return None  # no finite likelihood maximum (separation)
    else:
        return None
    m0 = brentq(score_at, lo, hi, xtol=1e-10)

    prec0 = 1.0 / sigma_mu**2
    neg_objective = lambda u: -(parts.loglik(u) - 0.5 * u * u * prec0)
    # the penalized mode lies between the prior mode 0 and m0
    a, b = sorted((0.0, m0))
    res = minimize_scalar(
        neg_objective, bounds=(a - 1.0, b + 1.0), method="bounded",
        options={"xatol": 1e-10},
    )
    mu = float(res.x)
    for _ in range(5):  # polish so the gradient criterion holds
        score, info = parts.score_info(mu)
        grad = score - mu * prec0
        curv = info + prec0
        if abs(grad) < FISHER_TOL:
            break
        mu = mu + grad / curv
    score, info = parts.score_info(mu)
    if not math.isfinite(mu) or abs(score - mu * prec0) > 1e-6:
        return None
    return mu, 1.0 / math.sqrt(info + prec0)


def laplace_leaf_proposal(parts, sigma_mu, rng, warm_start=0.0):
    """Fit the Laplace approximation at a node and sample a leaf value.

    ``warm_start`` is caller-supplied: the split leaf's value for grow and
    change, a size-weighted average of the deleted leaves for prune. With no
    strata at the node the proposal is the prior itself, Normal(0, sigma_mu^2).
    """
    fit = laplace_fit(parts, sigma_mu, warm_start)
    if fit is None:
        return None
    m, v = fit
    value = m + v * rng.standard_normal()
    return LeafProposal(m=m, v=v, value=value, log_density=_normal_logpdf(value, m, v))


def _leaf_prior_sum(values, sigma_mu):
    return sum(_normal_logpdf(v, 0.0, sigma_mu) for v in values)


def _p_prune(tree, move_probs):
    return 0.0 if tree.is_root_only else move_probs[1]


def accept_ratio(kind, current, proposed, params, move_probs=DEFAULT_MOVE_PROBS):
    """Log M-H acceptance ratio for a grow, prune, or change move.

    ``current`` and ``proposed`` carry the affected-leaf values, the summed
    conditional log-likelihood over the affected strata (at the backfitting
    offsets), and the log proposal density of this side's values under the
    move that would produce them (forward for ``proposed``, reverse for
    ``current``). May return ``-inf``, which forces rejection.
    """
    sigma_mu = params.sigma_mu
    log_r = (
        proposed.loglik
        - current.loglik
        + _leaf_prior_sum(proposed.leaf_values, sigma_mu)
        - _leaf_prior_sum(current.leaf_values, sigma_mu)
        + current.log_g
        - proposed.log_g
    )
    if kind == CHANGE:
        return log_r

    if kind == GROW:
        depth = Tree.depth(current.node)
        grown, pruned = proposed, current
        sign = 1.0
    elif kind == PRUNE:
        depth = Tree.depth(current.node)
        grown, pruned = current, proposed
        sign = -1.0
    else:
        raise ValueError(f"unknown move kind {kind!r}")

    rho_d = split_prob(depth, params.gamma, params.xi)
    rho_d1 = split_prob(depth + 1, params.gamma, params.xi)
    log_structure = (
        math.log(rho_d) + 2.0 * math.log1p(-rho_d1) - math.log1p(-rho_d)
    )
    # proposal bookkeeping: grow picked a leaf of the smaller tree, the
    # reverse prune picks a NOG node of the grown tree
    p_prune = _p_prune(grown.tree, move_probs)
    p_grow = move_probs[0]
    if p_prune == 0.0 or p_grow == 0.0:
        # one direction of the pair is impossible under these kind
        # probabilities; the ratio degenerates
        return -math.inf if sign * (1 if p_prune == 0.0 else -1) > 0 else math.inf
    n_leaves = len(pruned.tree.leaves())
    n_nog = len(grown.tree.nog_nodes())
    log_proposal = (
        math.log(p_prune) - math.log(n_nog) - math.log(p_grow) + math.log(n_leaves)
    )
    return log_r + sign * (log_structure + log_proposal)


@dataclass
class LikelihoodContext:
    """Data-side state a tree update needs: packed rows, the current
    confounder part, backfitting offsets, moderators, and the current
    tree's per-stratum leaf assignment."""

    packed: object
    conf_part: np.ndarray
    offsets: np.ndarray
    w: np.ndarray
    leaf_of: np.ndarray

    def parts(self, stratum_idx):
        return LinearPredictorParts.gather(
            self.packed, self.conf_part, self.offsets, stratum_idx
        )

    def members(self, leaf_index):
        return np.flatnonzero(self.leaf_of == leaf_index)


def _auto_reject(kind, tree):
    return MoveOutcome(
        kind=kind, proposed_tree=tree, log_accept_ratio=-math.inf, accepted=False
    )


def propose_move(tree, params, ctx, rng, move_probs=DEFAULT_MOVE_PROBS):
    """Draw a move kind, build the proposal, and run the M-H accept step.

    Infeasible kinds (prune or change on a root-only tree) and proposals
    without a valid split rule are auto-rejected, preserving the stated
    kind probabilities without renormalization.
    """
    kind = (GROW, PRUNE, CHANGE)[int(rng.choice(3, p=list(move_probs)))]
    if kind != GROW and tree.is_root_only:
        return _auto_reject(kind, tree)

    if kind == GROW:
        outcome = _propose_grow(tree, params, ctx, rng, move_probs)
    elif kind == PRUNE:
        outcome = _propose_prune(tree, params, ctx, rng, move_probs)
    else:
        outcome = _propose_change(tree, params, ctx, rng, move_probs)
    return outcome


def _accept(log_r, rng):
    return math.log(rng.random()) < log_r


def _propose_grow(tree, params, ctx, rng, move_probs):
    leaves = tree.leaves()
    leaf = leaves[int(rng.integers(len(leaves)))]
    members = ctx.members(leaf)
    rule = sample_split_rule(ctx.w[members], params.s, rng)
    if rule is None:
        return _auto_reject(GROW, tree)
    var, cut = rule
    go_left = ctx.w[members, var] <= cut
    left_idx, right_idx = members[go_left], members[~go_left]
    mu_leaf = tree.nodes[leaf].mu

    parts_left = ctx.parts(left_idx)
    parts_right = ctx.parts(right_idx)
    parts_all = ctx.parts(members)
    prop_left = laplace_leaf_proposal(parts_left, params.sigma_mu, rng, mu_leaf)
    if prop_left is None:
        return _auto_reject(GROW, tree)
    prop_right = laplace_leaf_proposal(parts_right, params.sigma_mu, rng, mu_leaf)
    if prop_right is None:
        return _auto_reject(GROW, tree)

    # density of recreating the current leaf under the mirror prune
    warm_rev = (
        len(left_idx) * prop_left.value + len(right_idx) * prop_right.value
    ) / len(members)
    fit_rev = laplace_fit(parts_all, params.sigma_mu, warm_rev)
    if fit_rev is None:
        return _auto_reject(GROW, tree)

    proposed_tree = tree.copy()
    proposed_tree.nodes[leaf] = Node(var=var, cut=cut)
    proposed_tree.nodes[2 * leaf] = Node(mu=prop_left.value)
    proposed_tree.nodes[2 * leaf + 1] = Node(mu=prop_right.value)

    current = MoveSide(
        tree=tree,
        node=leaf,
        leaf_values=(mu_leaf,),
        loglik=parts_all.loglik(mu_leaf),
        log_g=_normal_logpdf(mu_leaf, *fit_rev),
    )
    proposed = MoveSide(
        tree=proposed_tree,
        node=leaf,
        leaf_values=(prop_left.value, prop_right.value),
        loglik=parts_left.loglik(prop_left.value)
        + parts_right.loglik(prop_right.value),
        log_g=prop_left.log_density + prop_right.log_density,
    )
    log_r = accept_ratio(GROW, current, proposed, params, move_probs)
    accepted = _accept(log_r, rng)
    new_leaf_of = None
    if accepted:
        new_leaf_of = ctx.leaf_of.copy()
        new_leaf_of[left_idx] = 2 * leaf
        new_leaf_of[right_idx] = 2 * leaf + 1
    return MoveOutcome(GROW, proposed_tree, log_r, accepted, new_leaf_of)


def _propose_prune(tree, params, ctx, rng, move_probs):
    nogs = tree.nog_nodes()
    node = nogs[int(rng.integers(len(nogs)))]
    left_idx = ctx.members(2 * node)
    right_idx = ctx.members(2 * node + 1)
    members = np.sort(np.concatenate([left_idx, right_idx]))
    mu_left = tree.nodes[2 * node].mu
    mu_right = tree.nodes[2 * node + 1].mu

    parts_all = ctx.parts(members)
    parts_left = ctx.parts(left_idx)
    parts_right = ctx.parts(right_idx)
    warm = (len(left_idx) * mu_left + len(right_idx) * mu_right) / max(len(members), 1)
    prop = laplace_leaf_proposal(parts_all, params.sigma_mu, rng, warm)
    if prop is None:
        return _auto_reject(PRUNE, tree)

    # density of recreating the deleted leaves under the mirror grow
    fit_left = laplace_fit(parts_left, params.sigma_mu, prop.value)
    fit_right = laplace_fit(parts_right, params.sigma_mu, prop.value)
    if fit_left is None or fit_right is None:
        return _auto_reject(PRUNE, tree)

    proposed_tree = tree.copy()
    del proposed_tree.nodes[2 * node]
    del proposed_tree.nodes[2 * node + 1]
    proposed_tree.nodes[node] = Node(mu=prop.value)

    current = MoveSide(
        tree=tree,
        node=node,
        leaf_values=(mu_left, mu_right),
        loglik=parts_left.loglik(mu_left) + parts_right.loglik(mu_right),
        log_g=_normal_logpdf(mu_left, *fit_left)
        + _normal_logpdf(mu_right, *fit_right),
    )
    proposed = MoveSide(
        tree=proposed_tree,
        node=node,
        leaf_values=(prop.value,),
        loglik=parts_all.loglik(prop.value),
        log_g=prop.log_density,
    )
    log_r = accept_ratio(PRUNE, current, proposed, params, move_probs)
    accepted = _accept(log_r, rng)
    new_leaf_of = None
    if accepted:
        new_leaf_of = ctx.leaf_of.copy()
        new_leaf_of[members] = node
    return MoveOutcome(PRUNE, proposed_tree, log_r, accepted, new_leaf_of)


def _propose_change(tree, params, ctx, rng, move_probs):
    nogs = tree.nog_nodes()
    node = nogs[int(rng.integers(len(nogs)))]
    old_left_idx = ctx.members(2 * node)
    old_right_idx = ctx.members(2 * node + 1)
    members = np.sort(np.concatenate([old_left_idx, old_right_idx]))
    rule = sample_split_rule(ctx.w[members], params.s, rng)
    if rule is None:
        return _auto_reject(CHANGE, tree)
    var, cut = rule
    go_left = ctx.w[members, var] <= cut
    new_left_idx, new_right_idx = members[go_left], members[~go_left]
    mu_left = tree.nodes[2 * node].mu
    mu_right = tree.nodes[2 * node + 1].mu

    prop_left = laplace_leaf_proposal(
        ctx.parts(new_left_idx), params.sigma_mu, rng, mu_left
    )
    if prop_left is None:
        return _auto_reject(CHANGE, tree)
    prop_right = laplace_leaf_proposal(
        ctx.parts(new_right_idx), params.sigma_mu, rng, mu_right
    )
    if prop_right is None:
        return _auto_reject(CHANGE, tree)

    # density of recreating the current rule's leaves under the mirror change
    fit_rev_left = laplace_fit(ctx.parts(old_left_idx), params.sigma_mu, prop_left.value)
    fit_rev_right = laplace_fit(
        ctx.parts(old_right_idx), params.sigma_mu, prop_right.value
    )
    if fit_rev_left is None or fit_rev_right is None:
        return _auto_reject(CHANGE, tree)

    proposed_tree = tree.copy()
    proposed_tree.nodes[node] = Node(var=var, cut=cut)
    proposed_tree.nodes[2 * node] = Node(mu=prop_left.value)
    proposed_tree.nodes[2 * node + 1] = Node(mu=prop_right.value)

    old_parts_left = ctx.parts(old_left_idx)
    old_parts_right = ctx.parts(old_right_idx)
    current = MoveSide(
        tree=tree,
        node=node,
        leaf_values=(mu_left, mu_right),
        loglik=old_parts_left.loglik(mu_left) + old_parts_right.loglik(mu_right),
        log_g=_normal_logpdf(mu_left, *fit_rev_left)
        + _normal_logpdf(mu_right, *fit_rev_right),
    )
    proposed = MoveSide(
        tree=proposed_tree,
        node=node,
        leaf_values=(prop_left.value, prop_right.value),
        loglik=ctx.parts(new_left_idx).loglik(prop_left.value)
        + ctx.parts(new_right_idx).loglik(prop_right.value),
        log_g=prop_left.log_density + prop_right.log_density,
    )
    log_r = accept_ratio(CHANGE, current, proposed, params, move_probs)
    accepted = _accept(log_r, rng)
    new_leaf_of = None
    if accepted:
        new_leaf_of = ctx.leaf_of.copy()
        new_leaf_of[new_left_idx] = 2 * node
        new_leaf_of[new_right_idx] = 2 * node + 1
    return MoveOutcome(CHANGE, proposed_tree, log_r, accepted, new_leaf_of)
