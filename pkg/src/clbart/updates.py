"""Non-tree parameter updates.

Leaf values are refreshed with adaptive rejection sampling (the leaf full
conditional is strictly log-concave: a concave conditional-logistic
log-likelihood plus a Gaussian log prior). The leaf-prior scale gets a
random-walk Metropolis step on the log scale against its half-Cauchy
hyperprior; split probabilities are conjugate Dirichlet; the Dirichlet
concentration moves on a fixed grid; the confounder coefficients get a
random-walk step whose scale adapts during burn-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clr import loglik_terms
from .errors import LogConcavityError
from .moves import laplace_fit

CONCAVITY_TOL = 1e-8
MAX_HULL_POINTS = 50

_LOG_2PI = math.log(2.0 * math.pi)


class ArsEnvelope:
    """Piecewise-linear tangent hull of a concave log density.

    Maintains abscissae with the log density and its derivative; the upper
    hull is the pointwise minimum of tangents, the lower hull (squeeze) the
    chords between adjacent abscissae. The leftmost derivative must be
    positive and the rightmost negative so the hull is integrable.
    """

    def __init__(self, x, h, dh):
        self.x = np.asarray(x, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.dh = np.asarray(dh, dtype=float)
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("abscissae must be strictly increasing")
        self._check_concavity()

    def _check_concavity(self):
        if np.any(np.diff(self.dh) > CONCAVITY_TOL):
            raise LogConcavityError(
                "derivative of the log target increases across hull points; "
                "the target is not concave (likelihood bug)"
            )

    def _z(self):
        """Tangent intersection points between adjacent abscissae."""
        x, h, dh = self.x, self.h, self.dh
        denom = dh[:-1] - dh[1:]
        num = h[1:] - h[:-1] - x[1:] * dh[1:] + x[:-1] * dh[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = num / denom
        flat = denom <= 1e-14
        if np.any(flat):  # near-parallel tangents: split at the midpoint
            z[flat] = 0.5 * (x[:-1][flat] + x[1:][flat])
        return z

    def upper(self, t):
        z = self._z()
        j = int(np.searchsorted(z, t))
        return self.h[j] + self.dh[j] * (t - self.x[j])

    def lower(self, t):
        if t <= self.x[0] or t >= self.x[-1]:
            return -math.inf
        j = int(np.searchsorted(self.x, t)) - 1
        x0, x1 = self.x[j], self.x[j + 1]
        return (self.h[j] * (x1 - t) + self.h[j + 1] * (t - x0)) / (x1 - x0)

    def _log_masses(self):
        """Log integral of exp(upper hull) over each tangent segment."""
        z = self._z()
        k = len(self.x)
        lo = np.concatenate(([-np.inf], z))
        hi = np.concatenate((z, [np.inf]))
        out = np.empty(k)
        for j in range(k):
            c = self.dh[j]
            a = c * (hi[j] - self.x[j])
            b = c * (lo[j] - self.x[j])
            if abs(c) < 1e-12:
                out[j] = self.h[j] + math.log(hi[j] - lo[j])
            elif c > 0:
                out[j] = self.h[j] + a + math.log1p(-math.exp(b - a)) - math.log(c)
            else:
                out[j] = self.h[j] + b + math.log1p(-math.exp(a - b)) - math.log(-c)
        return out, lo, hi

    def sample(self, rng):
        """Draw from the density proportional to exp(upper hull)."""
        log_m, lo, hi = self._log_masses()
        shift = log_m.max()
        weights = np.exp(log_m - shift)
        weights /= weights.sum()
        j = int(rng.choice(len(weights), p=weights))
        c = self.dh[j]
        u = rng.random()
        left, right = lo[j], hi[j]
        if abs(c) < 1e-12:
            return left + u * (right - left)
        if c > 0:
            span = math.exp(c * (left - right)) if math.isfinite(left) else 0.0
            return right + math.log(u + (1.0 - u) * span) / c
        span = math.exp(c * (right - left)) if math.isfinite(right) else 0.0
        return left + math.log(u + (1.0 - u) * span) / c

    def insert(self, t, h, dh):
        j = int(np.searchsorted(self.x, t))
        self.x = np.insert(self.x, j, t)
        self.h = np.insert(self.h, j, h)
        self.dh = np.insert(self.dh, j, dh)
        self._check_concavity()

    @property
    def n_points(self):
        return len(self.x)


def ars_sample_leaf(parts, sigma_mu, rng, warm_start=0.0, max_rejections=1000):
    """Exact draw from a leaf's full conditional by adaptive rejection.

    The target is the summed conditional log-likelihood of the strata at
    the leaf (at their backfitting offsets) plus the Normal(0, sigma_mu^2)
    log prior. The envelope starts at {m - v, m, m + v} from the Laplace
    fit and is refined on rejections up to ``MAX_HULL_POINTS`` support
    points.
    """
    prec = 1.0 / sigma_mu**2

    def eval_target(u):
        ll, score = parts.loglik_score(u)
        return ll - 0.5 * u * u * prec, score - u * prec

    fit = laplace_fit(parts, sigma_mu, warm_start)
    if fit is None:  # start from the prior and let expansion find the mode
        m, v = 0.0, sigma_mu
    else:
        m, v = fit
    xs = [m - v, m, m + v]
    vals = [eval_target(t) for t in xs]
    for _ in range(200):  # ensure integrable hull on both flanks
        if vals[0][1] > 0.0:
            break
        xs[0] = m - 2.0 * (m - xs[0])
        vals[0] = eval_target(xs[0])
    for _ in range(200):
        if vals[-1][1] < 0.0:
            break
        xs[-1] = m + 2.0 * (xs[-1] - m)
        vals[-1] = eval_target(xs[-1])
    env = ArsEnvelope(xs, [v0 for v0, _ in vals], [v1 for _, v1 in vals])

    for _ in range(max_rejections):
        t = env.sample(rng)
        u = rng.random()
        log_u = math.log(u) if u > 0 else -math.inf
        upper = env.upper(t)
        if log_u <= env.lower(t) - upper:
            return t
        h, dh = eval_target(t)
        if log_u <= h - upper:
            return t
        if env.n_points < MAX_HULL_POINTS:
            env.insert(t, h, dh)
    raise LogConcavityError("rejection sampling failed to accept; check target")


def half_cauchy_logpdf(x, scale):
    """Log density of the half-Cauchy distribution on (0, inf)."""
    if x <= 0:
        return -math.inf
    return (
        math.log(2.0) - math.log(math.pi) - math.log(scale)
        - math.log1p((x / scale) ** 2)
    )


def update_sigma_mu(leaf_values, k, M, current, rng, step_sd=0.5):
    """Random-walk Metropolis step for the leaf-prior scale on the log scale.

    Target: Normal(0, sigma_mu^2) log density summed over all current leaf
    values, plus the half-Cauchy(0, k / sqrt(M)) log prior, plus the
    log-scale Jacobian. Returns (new value, accepted flag).
    """
    leaf_values = np.asarray(leaf_values, dtype=float)
    if current <= 0:
        raise ValueError("current sigma_mu must be positive")
    prior_scale = k / math.sqrt(M)

    def log_target(sigma):
        n = len(leaf_values)
        gauss = (
            -n * math.log(sigma)
            - 0.5 * n * _LOG_2PI
            - 0.5 * float(np.sum(leaf_values**2)) / sigma**2
        )
        return gauss + half_cauchy_logpdf(sigma, prior_scale) + math.log(sigma)

    proposal = current * math.exp(step_sd * rng.standard_normal())
    if not 1e-150 < proposal < 1e150:  # sigma^2 must stay a normal float
        rng.random()  # burn the accept draw so the stream stays aligned
        return current, False
    log_r = log_target(proposal) - log_target(current)
    if math.log(rng.random()) < log_r:
        return proposal, True
    return current, False


def update_split_probs(u, a, rng):
    """Conjugate Dirichlet draw of the split probabilities.

    ``u`` holds the number of internal nodes splitting on each moderator
    across the current forest.
    """
    u = np.asarray(u, dtype=float)
    p = len(u)
    return rng.dirichlet(a / p + u)


def default_concentration_grid(n_points=39):
    """Grid of a/(a+P) values 0.025, 0.050, ..., 0.975."""
    return np.arange(1, n_points + 1) / (n_points + 1.0)


def update_concentration(s, rng, grid_fracs=None, beta_prior=(0.5, 1.0)):
    """Discrete draw of the Dirichlet concentration on a fixed grid.

    The grid lives on the fractions f = a / (a + P) with a Beta prior on f;
    full-conditional weights are proportional to prior(f) times the
    Dirichlet(a/P, ..., a/P) density of the current split probabilities.
    """
    s = np.asarray(s, dtype=float)
    p = len(s)
    fracs = default_concentration_grid() if grid_fracs is None else np.asarray(grid_fracs)
    alpha, beta = beta_prior
    a_values = p * fracs / (1.0 - fracs)
    sum_log_s = float(np.sum(np.log(np.clip(s, 1e-300, None))))
    log_w = np.empty(len(fracs))
    for j, (f, a) in enumerate(zip(fracs, a_values)):
        log_prior = (alpha - 1.0) * math.log(f) + (beta - 1.0) * math.log1p(-f)
        log_dirichlet = (
            math.lgamma(a) - p * math.lgamma(a / p) + (a / p - 1.0) * sum_log_s
        )
        log_w[j] = log_prior + log_dirichlet
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    return float(a_values[int(rng.choice(len(w), p=w))])


@dataclass
class AdaptiveScale:
    """Random-walk proposal scale with windowed burn-in tuning.

    Multiplies sigma2 by 1.1 when the windowed acceptance rate exceeds
    ``high`` and by 0.9 when it falls below ``low``; frozen after burn-in.
    """

    v_beta: np.ndarray
    sigma2: float = 1.0
    window: int = 100
    low: float = 0.18
    high: float = 0.28
    frozen: bool = False
    _chol: np.ndarray = None
    _history: list = field(default_factory=list)

    def __post_init__(self):
        self.v_beta = np.atleast_2d(np.asarray(self.v_beta, dtype=float))
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        self._chol = np.linalg.cholesky(self.v_beta) if self.v_beta.size else None

    def propose(self, beta, rng):
        eps = rng.standard_normal(len(beta))
        return beta + math.sqrt(self.sigma2) * (self._chol @ eps)

    def record(self, accepted):
        if self.frozen:
            return
        self._history.append(bool(accepted))
        if len(self._history) >= self.window:
            rate = sum(self._history) / len(self._history)
            if rate > self.high:
                self.sigma2 *= 1.1
            elif rate < self.low:
                self.sigma2 *= 0.9
            self._history.clear()

    def freeze(self):
        self.frozen = True
        self._history.clear()


def update_beta(packed, beta, conf_part, lam, scale, rng, prior_scale=None):
    """Symmetric random-walk Metropolis step for the confounder coefficients.

    The acceptance ratio reduces to the conditional-likelihood ratio under
    the default flat prior; an optional Normal(0, prior_scale^2 I) prior
    adds its log-density difference. Returns (beta, conf_part, accepted).
    """
    if len(beta) == 0:
        return beta, conf_part, False
    proposal = scale.propose(beta, rng)
    conf_prop = packed.x @ proposal
    ll_cur = float(np.sum(loglik_terms(packed, conf_part, lam)))
    ll_prop = float(np.sum(loglik_terms(packed, conf_prop, lam)))
    log_r = ll_prop - ll_cur
    if prior_scale is not None:
        log_r += 0.5 * (
            float(beta @ beta) - float(proposal @ proposal)
        ) / prior_scale**2
    accepted = math.log(rng.random()) < log_r
    if accepted:
        beta, conf_part = proposal, conf_prop
    scale.record(accepted)
    return beta, conf_part, accepted
