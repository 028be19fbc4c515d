"""Simulation benchmark: cohort generation, oracle fit, and metrics.

Two deterministic effect surfaces drive the heterogeneity: a four-leaf
tree over three binary moderators (odds ratios 0.8, 1.1, 1.3, 1.5) and a
scaled Friedman benchmark function over five of ten uniform moderators.
Events are drawn per person-day from a rare-event logistic model sharing
one exposure series, and cases are folded into the time-stratified
case-crossover design for fitting.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .clr import PackedStrata, fit_conditional_logistic
from .errors import EmptyCohortError
from .strata import BINARY, Dataset, Stratum, referent_dates

CART, FRIEDMAN = "cart", "friedman"
CART_LEAF_ORS = (0.8, 1.1, 1.3, 1.5)
_EVENT_CHUNK = 1000
_Z975 = 1.959963984540054


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class ScenarioSpec:
    """Configuration of one simulated cohort."""

    scenario: str = CART
    n_individuals: int = 10000
    horizon_days: int = 1096
    confounder_odds_ratios: tuple = (0.5, 0.8, 1.0, 1.2, 2.0)
    alpha: float = -8.0
    seed: int = 0
    moderator_rho: float = 0.6
    n_moderators: int = 10
    start_date: dt.date = dt.date(2005, 1, 1)

    def __post_init__(self):
        if self.scenario not in (CART, FRIEDMAN):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.horizon_days < 28:
            raise ValueError("horizon must cover at least one calendar month")
        if _expit(self.alpha) >= 0.01:
            raise ValueError(
                "alpha implies a per-person-day event probability >= 1%; events "
                "must be rare for the design assumptions to hold"
            )
        object.__setattr__(
            self,
            "confounder_odds_ratios",
            tuple(float(v) for v in self.confounder_odds_ratios),
        )
        if isinstance(self.start_date, str):
            object.__setattr__(
                self, "start_date", dt.date.fromisoformat(self.start_date)
            )

    @property
    def beta(self):
        return np.log(np.asarray(self.confounder_odds_ratios))


@dataclass(frozen=True)
class CohortTruth:
    """Ground truth attached to a generated dataset, for scoring."""

    tau: np.ndarray             # per-stratum true exposure effect
    beta: np.ndarray            # true confounder coefficients
    active_moderators: tuple    # indices driving the effect surface
    n_events: int               # raw events before window deduplication
    n_discarded: int            # events dropped for sharing a referent window
    scenario: str


def gen_exposure(horizon, rng):
    """Shared exposure series: Normal around a three-cycle seasonal mean.

    The mean function sin(2 pi t * 3 / 1096) completes three periods over
    a 1096-day horizon.
    """
    t = np.arange(1, horizon + 1, dtype=float)
    return np.sin(2.0 * np.pi * t * 3.0 / 1096.0) + rng.standard_normal(horizon)


def cart_truth_values(w_active):
    """Log odds ratio per individual from the four-leaf moderator tree."""
    w_active = np.atleast_2d(w_active)
    log_ors = np.log(CART_LEAF_ORS)
    leaf = np.where(
        w_active[:, 0] <= 0,
        np.where(w_active[:, 1] <= 0, 0, 1),
        np.where(w_active[:, 2] <= 0, 2, 3),
    )
    return log_ors[leaf]


def friedman_function(w):
    w = np.atleast_2d(w)
    return (
        10.0 * np.sin(np.pi * w[:, 0] * w[:, 1])
        + 20.0 * (w[:, 2] - 0.5) ** 2
        + 10.0 * w[:, 3]
        + 5.0 * w[:, 4]
    )


def gen_effect_surface(spec, rng):
    """Moderators and true effects: (w matrix, tau, active indices)."""
    n, p = spec.n_individuals, spec.n_moderators
    if spec.scenario == CART:
        lags = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        cov = spec.moderator_rho**lags
        latent = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T
        w = (latent > 0).astype(float)
        active = tuple(int(i) for i in rng.choice(p, size=3, replace=False))
        tau = cart_truth_values(w[:, active])
    else:
        w = rng.uniform(size=(n, p))
        active = (0, 1, 2, 3, 4)
        tau = (friedman_function(w) - 14.0) / 15.0
    return w, tau, active


def _month_end(date):
    nxt = date.replace(day=28) + dt.timedelta(days=4)
    return nxt.replace(day=1) - dt.timedelta(days=1)


def simulate_cohort(spec):
    """Generate one cohort and return (Dataset, CohortTruth).

    Covariate streams extend to the end of the last month so every event's
    referent window is covered. Events sharing a referent window with an
    earlier event of the same individual are discarded (the design assumes
    at most one event per window); the discard count is reported.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    last_day = spec.start_date + dt.timedelta(days=spec.horizon_days - 1)
    total_days = (_month_end(last_day) - spec.start_date).days + 1

    z_series = gen_exposure(total_days, rng)
    p_x = len(spec.confounder_odds_ratios)
    x_series = rng.uniform(size=(total_days, p_x))
    w, tau_individual, active = gen_effect_surface(spec, rng)
    beta = spec.beta

    base = spec.alpha + x_series[: spec.horizon_days] @ beta  # (horizon,)
    z_h = z_series[: spec.horizon_days]
    event_pairs = []  # (individual, day index 0-based)
    for start in range(0, spec.n_individuals, _EVENT_CHUNK):
        stop = min(start + _EVENT_CHUNK, spec.n_individuals)
        prob = _expit(base[None, :] + tau_individual[start:stop, None] * z_h[None, :])
        hits = rng.random(prob.shape) < prob
        for i, t in zip(*np.nonzero(hits)):
            event_pairs.append((start + int(i), int(t)))
    if not event_pairs:
        raise EmptyCohortError("no events generated; raise alpha or cohort size")
    event_pairs.sort()

    dates = [spec.start_date + dt.timedelta(days=d) for d in range(total_days)]
    day_of = {d: i for i, d in enumerate(dates)}

    strata = []
    tau_strata = []
    used_windows = set()
    n_discarded = 0
    for person, t in event_pairs:
        date = dates[t]
        window_key = (person, date.year, date.month, date.weekday())
        if window_key in used_windows:
            n_discarded += 1
            continue
        used_windows.add(window_key)
        window = referent_dates(date)
        rows = [day_of[d] for d in window]
        strata.append(
            Stratum(
                id=f"{person}:{date.isoformat()}",
                case_index=window.index(date),
                z=z_series[rows],
                x=x_series[rows],
                w=w[person],
            )
        )
        tau_strata.append(tau_individual[person])

    kinds = (BINARY,) * spec.n_moderators if spec.scenario == CART else (
        "continuous",
    ) * spec.n_moderators
    dataset = Dataset(
        strata=tuple(strata),
        moderator_names=tuple(f"w_{j + 1}" for j in range(spec.n_moderators)),
        moderator_kinds=kinds,
        confounder_names=tuple(f"x_{j + 1}" for j in range(p_x)),
    )
    truth = CohortTruth(
        tau=np.array(tau_strata),
        beta=beta,
        active_moderators=active,
        n_events=len(event_pairs),
        n_discarded=n_discarded,
        scenario=spec.scenario,
    )
    return dataset, truth


@dataclass(frozen=True)
class Metrics:
    """Per-replicate scores of the individual exposure effects."""

    bias: float
    rmse: float
    coverage: float
    width: float


def eval_metrics(tau_hat, lower, upper, tau_true):
    """Average bias, RMSE, 95% interval coverage, and mean interval width."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    tau_true = np.asarray(tau_true, dtype=float)
    err = tau_hat - tau_true
    return Metrics(
        bias=float(err.mean()),
        rmse=float(np.sqrt(np.mean(err**2))),
        coverage=float(np.mean((lower <= tau_true) & (tau_true <= upper))),
        width=float(np.mean(upper - lower)),
    )


def _oracle_basis(dataset, truth):
    """Per-stratum basis of the true interaction surface."""
    w = dataset.moderator_matrix()
    if truth.scenario == CART:
        active = list(truth.active_moderators)
        leaf = np.where(
            w[:, active[0]] <= 0,
            np.where(w[:, active[1]] <= 0, 0, 1),
            np.where(w[:, active[2]] <= 0, 2, 3),
        )
        basis = np.zeros((len(w), 4))
        basis[np.arange(len(w)), leaf] = 1.0
        names = tuple(f"leaf_{j}" for j in range(4))
    else:
        basis = np.column_stack(
            [
                np.ones(len(w)),
                np.sin(np.pi * w[:, 0] * w[:, 1]),
                (w[:, 2] - 0.5) ** 2,
                w[:, 3],
                w[:, 4],
            ]
        )
        names = ("z", "z_sin12", "z_sq3", "z_w4", "z_w5")
    return basis, names


@dataclass(frozen=True)
class OracleResult:
    tau_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    beta_hat: np.ndarray
    beta_se: np.ndarray


def oracle_fit(dataset, truth):
    """Conditional logistic fit on the true interaction design.

    The design interacts the true basis of the effect surface with the
    exposure; per-stratum effects and Wald intervals follow from the
    interaction block of the coefficient covariance.
    """
    packed = PackedStrata.from_dataset(dataset)
    basis, names = _oracle_basis(dataset, truth)
    basis_rows = np.repeat(basis, packed.sizes, axis=0)
    design = np.column_stack([packed.x, basis_rows * packed.z[:, None]])
    fit = fit_conditional_logistic(
        design, packed.ptr, packed.case, dataset.confounder_names + names
    )
    p_x = packed.x.shape[1]
    coef = fit.beta_hat[p_x:]
    cov = fit.covariance[p_x:, p_x:]
    tau_hat = basis @ coef
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", basis, cov, basis), 0.0))
    return OracleResult(
        tau_hat=tau_hat,
        lower=tau_hat - _Z975 * se,
        upper=tau_hat + _Z975 * se,
        beta_hat=fit.beta_hat[:p_x],
        beta_se=np.sqrt(np.diag(fit.covariance)[:p_x]),
    )


def oracle_record(dataset, truth):
    """Metric record for the oracle estimator on one replicate."""
    res = oracle_fit(dataset, truth)
    m = eval_metrics(res.tau_hat, res.lower, res.upper, truth.tau)
    beta_lo = res.beta_hat - _Z975 * res.beta_se
    beta_hi = res.beta_hat + _Z975 * res.beta_se
    return {
        "estimator": "oracle",
        "n_trees": None,
        "bias": m.bias,
        "rmse": m.rmse,
        "coverage": m.coverage,
        "width": m.width,
        "beta_bias": (res.beta_hat - truth.beta).tolist(),
        "beta_coverage": ((beta_lo <= truth.beta) & (truth.beta <= beta_hi))
        .astype(float)
        .tolist(),
        "n_cases": dataset.n_strata,
    }


def clbart_record(draws, truth):
    """Metric record for a fitted chain on one replicate."""
    from .posterior import individual_effects, variable_importance
    from .sampler import compute_waic

    tau_hat, lower, upper = individual_effects(draws)
    m = eval_metrics(tau_hat, lower, upper, truth.tau)
    beta_mean = draws.beta.mean(axis=0)
    beta_lo, beta_hi = np.quantile(
        draws.beta, [0.025, 0.975], axis=0, method="inverted_cdf"
    )
    imp = variable_importance(draws)
    return {
        "estimator": "clbart",
        "n_trees": draws.config.n_trees,
        "bias": m.bias,
        "rmse": m.rmse,
        "coverage": m.coverage,
        "width": m.width,
        "beta_bias": (beta_mean - truth.beta).tolist(),
        "beta_coverage": ((beta_lo <= truth.beta) & (truth.beta <= beta_hi))
        .astype(float)
        .tolist(),
        "waic": compute_waic(draws.loglik).waic,
        "split_proportions": imp.mean.tolist(),
        "active_moderators": list(truth.active_moderators),
        "n_cases": draws.n_strata,
    }


def aggregate_records(records):
    """Monte Carlo mean and standard error per (scenario, estimator, M)."""
    groups = {}
    for rec in records:
        key = (rec["scenario"], rec["estimator"], rec["n_trees"])
        groups.setdefault(key, []).append(rec)
    rows = []
    for (scenario, estimator, n_trees), recs in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)
    ):
        row = {
            "scenario": scenario,
            "estimator": estimator,
            "n_trees": n_trees,
            "n_replicates": len(recs),
        }
        for metric in ("bias", "rmse", "coverage", "width"):
            vals = np.array([r[metric] for r in recs], dtype=float)
            row[metric] = float(vals.mean())
            row[f"{metric}_se"] = (
                float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            )
        rows.append(row)
    return rows
