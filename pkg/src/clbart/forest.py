"""Decision trees over moderators: representation, prior, and prediction.

Trees are stored heap-indexed (root at 1, children of node i at 2i and
2i + 1), which keeps depth, leaf and no-grandchildren (NOG) bookkeeping
trivial. Routing follows w[var] <= cut to the left child. Serialization
uses a nested record per node, ``{"var", "cut", "left", "right"}`` for
internal nodes and ``{"mu"}`` for leaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Node:
    """A tree node; ``var < 0`` marks a leaf carrying value ``mu``."""

    var: int = -1
    cut: float = 0.0
    mu: float = 0.0

    @property
    def is_leaf(self):
        return self.var < 0


class Tree:
    """A binary decision tree with scalar leaf values."""

    __slots__ = ("nodes",)

    def __init__(self, nodes=None, mu=0.0):
        self.nodes = nodes if nodes is not None else {1: Node(mu=mu)}

    def copy(self):
        return Tree(
            {
                i: Node(var=n.var, cut=n.cut, mu=n.mu)
                for i, n in self.nodes.items()
            }
        )

    @staticmethod
    def depth(index):
        return index.bit_length() - 1

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def is_root_only(self):
        return len(self.nodes) == 1

    def leaves(self):
        return sorted(i for i, n in self.nodes.items() if n.is_leaf)

    def nog_nodes(self):
        """Internal nodes whose both children are leaves."""
        return sorted(
            i
            for i, n in self.nodes.items()
            if not n.is_leaf
            and self.nodes[2 * i].is_leaf
            and self.nodes[2 * i + 1].is_leaf
        )

    def leaf_values(self):
        return [self.nodes[i].mu for i in self.leaves()]

    def split_counts(self, n_moderators):
        counts = np.zeros(n_moderators, dtype=np.int64)
        for n in self.nodes.values():
            if not n.is_leaf:
                counts[n.var] += 1
        return counts

    def leaf_assignment(self, w_matrix):
        """Heap index of the leaf reached by each row of ``w_matrix``."""
        w_matrix = np.atleast_2d(np.asarray(w_matrix, dtype=float))
        out = np.empty(len(w_matrix), dtype=np.int64)
        stack = [(1, np.arange(len(w_matrix)))]
        while stack:
            idx, rows = stack.pop()
            node = self.nodes[idx]
            if node.is_leaf:
                out[rows] = idx
            else:
                go_left = w_matrix[rows, node.var] <= node.cut
                stack.append((2 * idx, rows[go_left]))
                stack.append((2 * idx + 1, rows[~go_left]))
        return out

    def predict(self, w_matrix):
        """Leaf value reached by each row of ``w_matrix``."""
        assignment = self.leaf_assignment(w_matrix)
        mu = {i: n.mu for i, n in self.nodes.items() if n.is_leaf}
        return np.array([mu[i] for i in assignment])

    def to_record(self, index=1):
        node = self.nodes[index]
        if node.is_leaf:
            return {"mu": node.mu}
        return {
            "var": node.var,
            "cut": node.cut,
            "left": self.to_record(2 * index),
            "right": self.to_record(2 * index + 1),
        }

    @classmethod
    def from_record(cls, record):
        nodes = {}

        def walk(rec, index):
            if "mu" in rec:
                nodes[index] = Node(mu=float(rec["mu"]))
            else:
                nodes[index] = Node(var=int(rec["var"]), cut=float(rec["cut"]))
                walk(rec["left"], 2 * index)
                walk(rec["right"], 2 * index + 1)

        walk(record, 1)
        return cls(nodes)


@dataclass
class ForestParams:
    """Ensemble of trees plus the tree-structure and leaf-prior parameters."""

    trees: list
    gamma: float = 0.95
    xi: float = 2.0
    s: np.ndarray = None
    a: float = 1.0
    sigma_mu: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ensemble needs at least one tree")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if self.sigma_mu <= 0:
            raise ValueError("sigma_mu must be positive")
        if self.s is not None:
            self.s = np.asarray(self.s, dtype=float)
            if np.any(self.s < 0) or abs(self.s.sum() - 1.0) > 1e-8:
                raise ValueError("split probabilities must be a simplex vector")

    @property
    def M(self):
        return len(self.trees)


def split_prob(depth, gamma, xi):
    """Branching-process split probability gamma * (1 + depth)^(-xi)."""
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    return gamma * (1.0 + depth) ** (-xi)


def cut_candidates(values):
    """Valid cut points: unique observed values excluding the maximum.

    Routing sends w <= cut left, so excluding the maximum guarantees both
    children receive at least one stratum.
    """
    uniq = np.unique(values)
    return uniq[:-1]


def sample_split_rule(node_w, s, rng):
    """Draw a (variable, cut) split rule for the strata at a node.

    The variable is drawn from the split probabilities restricted to
    moderators with at least two distinct values at the node; the cut is
    uniform over that variable's candidates. Returns ``None`` when no
    moderator admits a valid split (the caller rejects the proposal).
    """
    node_w = np.atleast_2d(node_w)
    s = np.asarray(s, dtype=float)
    eligible = [
        p for p in range(node_w.shape[1]) if len(np.unique(node_w[:, p])) >= 2
    ]
    if not eligible:
        return None
    weights = s[eligible]
    total = weights.sum()
    if total <= 0:
        weights = np.full(len(eligible), 1.0 / len(eligible))
    else:
        weights = weights / total
    var = int(rng.choice(eligible, p=weights))
    cuts = cut_candidates(node_w[:, var])
    cut = float(cuts[rng.integers(len(cuts))])
    return var, cut


def tree_log_prior(tree, params, observed_w):
    """Log prior of a tree structure against the observed moderators.

    Internal nodes contribute log rho_d plus the split-rule mass (variable
    weight and the uniform cut choice among candidates at the node); leaves
    contribute log(1 - rho_d).
    """
    observed_w = np.atleast_2d(np.asarray(observed_w, dtype=float))
    s = params.s
    if s is None:
        p_w = observed_w.shape[1]
        s = np.full(p_w, 1.0 / p_w)
    total = 0.0
    stack = [(1, np.arange(len(observed_w)))]
    while stack:
        idx, rows = stack.pop()
        node = tree.nodes[idx]
        rho = split_prob(Tree.depth(idx), params.gamma, params.xi)
        if node.is_leaf:
            total += math.log1p(-rho)
        else:
            n_cuts = len(cut_candidates(observed_w[rows, node.var]))
            if n_cuts == 0:
                return -math.inf  # unreachable split: tree invalid for this data
            total += math.log(rho) + math.log(s[node.var]) - math.log(n_cuts)
            go_left = observed_w[rows, node.var] <= node.cut
            stack.append((2 * idx, rows[go_left]))
            stack.append((2 * idx + 1, rows[~go_left]))
    return total


def forest_predict(params, w):
    """Ensemble prediction for a single moderator vector."""
    w = np.asarray(w, dtype=float).reshape(1, -1)
    return float(sum(t.predict(w)[0] for t in params.trees))


def predict_matrix(trees, w_matrix):
    """Summed tree predictions for every row of ``w_matrix``."""
    w_matrix = np.atleast_2d(w_matrix)
    out = np.zeros(len(w_matrix))
    for t in trees:
        out += t.predict(w_matrix)
    return out


def forest_to_records(trees):
    return [t.to_record() for t in trees]


def forest_from_records(records):
    return [Tree.from_record(r) for r in records]
