"""Conditional logistic likelihood, score/information, and a Newton fitter.

The conditional likelihood of one stratum with rows t, case row t_i,
confounder part a_t = x_t'beta and total exposure effect tau is

    l = a_{t_i} + tau * z_{t_i} - log sum_t exp(a_t + tau * z_t),

evaluated with a max-shifted log-sum-exp. The score and Fisher information
in tau reduce to moments of z under the softmax weights of the linear
predictor; the Fisher information equals the observed information here.

Batch evaluation uses a flattened row layout (``PackedStrata``) with
``reduceat`` segment reductions, which is what the tree-update and
rejection-sampling inner loops run on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, IdentifiabilityError

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
MAX_HALVINGS = 20
RCOND_MIN = 1e-12


@dataclass(frozen=True)
class PackedStrata:
    """Flattened row storage for a dataset: rows of stratum i live in
    ``[ptr[i], ptr[i+1])`` of the row arrays."""

    z: np.ndarray          # (R,) exposure per row
    x: np.ndarray          # (R, P_x) confounders per row
    ptr: np.ndarray        # (n+1,) int segment boundaries
    case: np.ndarray       # (n,) flat row index of each case
    w: np.ndarray          # (n, P_w) moderators per stratum
    sizes: np.ndarray      # (n,) rows per stratum

    @classmethod
    def from_dataset(cls, dataset):
        sizes = np.array([s.n_rows for s in dataset.strata], dtype=np.int64)
        ptr = np.zeros(len(sizes) + 1, dtype=np.int64)
        np.cumsum(sizes, out=ptr[1:])
        z = np.concatenate([s.z for s in dataset.strata]) if sizes.size else np.zeros(0)
        x = (
            np.concatenate([s.x for s in dataset.strata])
            if sizes.size
            else np.zeros((0, dataset.n_confounders))
        )
        case = ptr[:-1] + np.array(
            [s.case_index for s in dataset.strata], dtype=np.int64
        )
        return cls(
            z=z, x=x, ptr=ptr, case=case, w=dataset.moderator_matrix(), sizes=sizes
        )

    @property
    def n_strata(self):
        return len(self.sizes)

    def expand(self, per_stratum):
        """Repeat a per-stratum vector onto rows."""
        return np.repeat(per_stratum, self.sizes)


def _segment_logsumexp(eta, ptr, sizes):
    """Max-shifted log-sum-exp per segment; returns (lse, shifted exp terms)."""
    m = np.maximum.reduceat(eta, ptr[:-1])
    ex = np.exp(eta - np.repeat(m, sizes))
    tot = np.add.reduceat(ex, ptr[:-1])
    return m + np.log(tot), ex / np.repeat(tot, sizes)


def _multi_arange(starts, sizes):
    """Concatenation of arange(s, s + n) for every (s, n) pair, vectorized."""
    sizes = np.asarray(sizes, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    steps = np.ones(total, dtype=np.int64)
    steps[0] = starts[0]
    ends = np.cumsum(sizes)
    steps[ends[:-1]] = starts[1:] - (starts[:-1] + sizes[:-1] - 1)
    return np.cumsum(steps)


@njit(cache=True)
def _kern_stratum_moments(z, conf, ptr, case, idx, offset, mu):
    """Summed loglik, score, and Fisher information over a stratum subset.

    Strata ``idx[j]`` are evaluated at total exposure effect
    ``offset[j] + mu``; rows come from the flat arrays via ``ptr``.
    """
    ll = 0.0
    sc = 0.0
    fo = 0.0
    for j in range(idx.size):
        i = idx[j]
        psi = offset[j] + mu
        lo, hi = ptr[i], ptr[i + 1]
        m = -np.inf
        for t in range(lo, hi):
            e = conf[t] + psi * z[t]
            if e > m:
                m = e
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for t in range(lo, hi):
            e = math.exp(conf[t] + psi * z[t] - m)
            s0 += e
            s1 += z[t] * e
            s2 += z[t] * z[t] * e
        c = case[i]
        zbar = s1 / s0
        ll += conf[c] + psi * z[c] - m - math.log(s0)
        sc += z[c] - zbar
        v = s2 / s0 - zbar * zbar
        if v > 0.0:
            fo += v
    return ll, sc, fo


@njit(cache=True)
def _kern_loglik_vec(z, conf, ptr, case, psi, out):
    """Per-stratum conditional log-likelihood at per-stratum effects."""
    for i in range(psi.size):
        lo, hi = ptr[i], ptr[i + 1]
        m = -np.inf
        for t in range(lo, hi):
            e = conf[t] + psi[i] * z[t]
            if e > m:
                m = e
        s0 = 0.0
        for t in range(lo, hi):
            s0 += math.exp(conf[t] + psi[i] * z[t] - m)
        c = case[i]
        out[i] = conf[c] + psi[i] * z[c] - m - math.log(s0)
    return out


def loglik_terms(packed, conf_part, psi):
    """Per-stratum conditional log-likelihood at exposure effects ``psi``.

    ``conf_part`` is the per-row confounder contribution x'beta and
    ``psi`` the per-stratum total exposure effect multiplying z.
    """
    out = np.empty(packed.n_strata)
    return _kern_loglik_vec(
        packed.z, np.asarray(conf_part, dtype=float), packed.ptr, packed.case,
        np.asarray(psi, dtype=float), out,
    )


def score_info_terms(packed, conf_part, psi):
    """Per-stratum score and Fisher information in the exposure effect."""
    eta = conf_part + packed.expand(psi) * packed.z
    _, p = _segment_logsumexp(eta, packed.ptr, packed.sizes)
    zp = packed.z * p
    zbar = np.add.reduceat(zp, packed.ptr[:-1])
    z2bar = np.add.reduceat(packed.z * zp, packed.ptr[:-1])
    score = packed.z[packed.case] - zbar
    info = np.maximum(z2bar - zbar**2, 0.0)
    return score, info


@dataclass(frozen=True)
class LinearPredictorParts:
    """Linear-predictor pieces for the strata at one tree node.

    Views the flat row arrays (exposure and confounder part) through the
    node's stratum indices, with the per-stratum offset: the exposure
    effect contributed by the rest of the ensemble. Evaluations at a
    candidate leaf value ``mu`` use the total effect ``offset + mu``.
    """

    z: np.ndarray          # (R,) exposure per row, full data
    conf_part: np.ndarray  # (R,) x'beta per row, full data
    ptr: np.ndarray        # (n+1,) segment boundaries, full data
    case: np.ndarray       # (n,) flat case-row indices, full data
    stratum_idx: np.ndarray  # (k,) strata at the node
    offset: np.ndarray       # (k,) per-stratum lambda

    @classmethod
    def gather(cls, packed, conf_part, offsets, stratum_idx):
        """Node-local view for the given stratum indices."""
        idx = np.asarray(stratum_idx, dtype=np.int64)
        return cls(
            z=packed.z,
            conf_part=conf_part,
            ptr=packed.ptr,
            case=packed.case,
            stratum_idx=idx,
            offset=np.asarray(offsets, dtype=float)[idx],
        )

    @property
    def n_strata(self):
        return len(self.stratum_idx)

    def _moments(self, mu):
        return _kern_stratum_moments(
            self.z, self.conf_part, self.ptr, self.case,
            self.stratum_idx, self.offset, mu,
        )

    def loglik(self, mu):
        """Summed conditional log-likelihood at leaf value ``mu``."""
        if self.n_strata == 0:
            return 0.0
        return self._moments(mu)[0]

    def score_info(self, mu):
        """Summed score and Fisher information at leaf value ``mu``."""
        if self.n_strata == 0:
            return 0.0, 0.0
        _, score, info = self._moments(mu)
        return score, info

    def loglik_score(self, mu):
        """Summed log-likelihood and score at leaf value ``mu``."""
        if self.n_strata == 0:
            return 0.0, 0.0
        ll, score, _ = self._moments(mu)
        return ll, score


def stratum_loglik(stratum, beta, tau):
    """Conditional log-likelihood of one stratum.

    ``tau`` is the stratum's total exposure effect (any ensemble offset
    already folded in). Always finite for finite inputs.
    """
    beta = np.asarray(beta, dtype=float)
    eta = stratum.x @ beta + tau * stratum.z
    m = eta.max()
    return float(eta[stratum.case_index] - m - np.log(np.sum(np.exp(eta - m))))


def stratum_score_fisher(stratum, beta, tau):
    """Score and Fisher information of one stratum in the exposure effect.

    The information equals the observed information, and is the softmax-
    weighted variance of z within the window (hence nonnegative).
    """
    beta = np.asarray(beta, dtype=float)
    eta = stratum.x @ beta + tau * stratum.z
    p = np.exp(eta - eta.max())
    p /= p.sum()
    zbar = float(p @ stratum.z)
    score = float(stratum.z[stratum.case_index]) - zbar
    info = max(float(p @ stratum.z**2) - zbar**2, 0.0)
    return score, info


@dataclass(frozen=True)
class ClrFit:
    """Result of a frequentist conditional logistic fit."""

    beta_hat: np.ndarray
    covariance: np.ndarray
    loglik: float
    coef_names: tuple = ()


def _informative_mask(design, ptr, sizes):
    """Strata where at least one design column varies within the window."""
    if design.shape[1] == 0:
        return np.zeros(len(sizes), dtype=bool)
    lo = np.minimum.reduceat(design, ptr[:-1], axis=0)
    hi = np.maximum.reduceat(design, ptr[:-1], axis=0)
    return np.any(hi > lo, axis=1)


def fit_conditional_logistic(design, ptr, case, coef_names=()):
    """Newton-Raphson maximizer of the conditional log-likelihood.

    ``design`` holds one row of model columns per observation row; strata
    follow the ``ptr`` segment layout with case rows indexed by ``case``.
    Strata with no within-window variation in any column contribute a
    constant and are skipped. Raises :class:`IdentifiabilityError` when the
    information matrix is numerically singular, :class:`ConvergenceError`
    after 100 Newton iterations without meeting the score tolerance.
    """
    design = np.asarray(design, dtype=float)
    ptr = np.asarray(ptr, dtype=np.int64)
    case = np.asarray(case, dtype=np.int64)
    sizes = np.diff(ptr)
    n_all = len(sizes)
    k = design.shape[1]

    const_loglik = -float(np.sum(np.log(sizes)))  # value at theta = 0
    if k == 0:
        return ClrFit(
            beta_hat=np.zeros(0),
            covariance=np.zeros((0, 0)),
            loglik=const_loglik,
            coef_names=tuple(coef_names),
        )

    keep = _informative_mask(design, ptr, sizes)
    skipped_const = -float(np.sum(np.log(sizes[~keep])))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise IdentifiabilityError(
            "no stratum has within-window variation in any model column"
        )
    sizes_k = sizes[idx]
    rows = _multi_arange(ptr[idx], sizes_k)
    dsub = design[rows]
    ptr_k = np.zeros(len(idx) + 1, dtype=np.int64)
    np.cumsum(sizes_k, out=ptr_k[1:])
    case_k = ptr_k[:-1] + (case[idx] - ptr[idx])

    def loglik_at(theta):
        eta = dsub @ theta
        lse, _ = _segment_logsumexp(eta, ptr_k, sizes_k)
        return float(np.sum(eta[case_k] - lse))

    def score_info_at(theta):
        eta = dsub @ theta
        _, p = _segment_logsumexp(eta, ptr_k, sizes_k)
        wrows = dsub * p[:, None]
        mean_i = np.add.reduceat(wrows, ptr_k[:-1], axis=0)
        score = dsub[case_k].sum(axis=0) - mean_i.sum(axis=0)
        info = wrows.T @ dsub - mean_i.T @ mean_i
        return score, 0.5 * (info + info.T)

    theta = np.zeros(k)
    ll = loglik_at(theta)
    for _ in range(NEWTON_MAX_ITER):
        score, info = score_info_at(theta)
        ev = np.linalg.eigvalsh(info)
        if ev[-1] <= 0 or ev[0] / ev[-1] < RCOND_MIN:
            raise IdentifiabilityError(
                "information matrix is numerically singular; a model column may "
                "be constant within every stratum or collinear"
            )
        if np.max(np.abs(score)) < NEWTON_TOL:
            cov = np.linalg.inv(info)
            return ClrFit(
                beta_hat=theta,
                covariance=0.5 * (cov + cov.T),
                loglik=ll + skipped_const,
                coef_names=tuple(coef_names),
            )
        step = np.linalg.solve(info, score)
        for _ in range(MAX_HALVINGS):
            cand = loglik_at(theta + step)
            if cand >= ll:
                break
            step = step / 2
        else:
            break  # flat region: no improving step, settle at current point
        theta = theta + step
        ll = cand
    score, info = score_info_at(theta)
    if np.max(np.abs(score)) < 1e-5:  # step-halving exhausted near the optimum
        cov = np.linalg.inv(info)
        return ClrFit(
            beta_hat=theta,
            covariance=0.5 * (cov + cov.T),
            loglik=ll + skipped_const,
            coef_names=tuple(coef_names),
        )
    raise ConvergenceError(
        f"conditional logistic fit did not converge in {NEWTON_MAX_ITER} "
        f"iterations (max |score| = {np.max(np.abs(score)):.3g})"
    )


def clr_fit(dataset, include_homogeneous_tau=False):
    """Fit a conventional conditional logistic regression to a dataset.

    The design holds the confounder columns, plus the exposure itself when
    ``include_homogeneous_tau`` is set (a single homogeneous effect). The
    returned covariance is the inverse observed information at the optimum.
    """
    packed = PackedStrata.from_dataset(dataset)
    names = list(dataset.confounder_names)
    design = packed.x
    if include_homogeneous_tau:
        design = np.column_stack([design, packed.z]) if design.size else (
            packed.z.reshape(-1, 1)
        )
        names.append("tau")
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    return fit_conditional_logistic(design, packed.ptr, packed.case, tuple(names))
