"""Command-line entry points: ``clbart fit`` and ``clbart simulate``.

Exit codes: 0 on success, 1 on data-validation or fitting errors, 2 on bad
flags or unusable paths. Every output directory gets a manifest recording
the command, resolved configuration, paths, seed, and wall-clock duration;
re-running the same command and seed reproduces the other outputs byte for
byte (the manifest's duration field is the one run-dependent value).
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import ClbartError
from .posterior import (
    EffectSummary,
    average_effect,
    cart_summary,
    marginal_contribution,
    partial_dependence,
    variable_importance,
)
from .sampler import SamplerConfig, compute_waic, run_chain
from .simbench import (
    ScenarioSpec,
    aggregate_records,
    clbart_record,
    oracle_record,
    simulate_cohort,
)
from .strata import BINARY, ingest_dataset

CONFIG_VERSION = 1


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "code_version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
        "written_at": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    _write_atomic(
        os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2) + "\n"
    )


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ClbartError(f"unsupported config version {version}")
    return data


def _resolved_sampler_config(args):
    values = _load_config_file(args.config)
    for name in ("trees", "iterations", "burn_in", "thin", "seed", "k"):
        flag = getattr(args, name, None)
        if flag is not None:
            values["n_trees" if name == "trees" else name] = flag
    return SamplerConfig.from_dict(values)


def _summary_dict(draws, dataset):
    """Everything the report shows, computed from the kept draws alone."""
    w = dataset.moderator_matrix()
    avg = average_effect(draws)
    avg_or = avg.exp()
    summary = {
        "n_strata": draws.n_strata,
        "n_draws": draws.n_draws,
        "average_effect": {
            "log_or": {"mean": avg.mean, "lower": avg.lower, "upper": avg.upper},
            "or": {"mean": avg_or.mean, "lower": avg_or.lower, "upper": avg_or.upper},
        },
        "accept_rates": draws.accept_rates,
    }
    waic = compute_waic(draws.loglik)
    summary["waic"] = {"waic": waic.waic, "p_waic": waic.p_waic, "lppd": waic.lppd}

    beta_rows = []
    if draws.beta.shape[1]:
        mean = draws.beta.mean(axis=0)
        lo, hi = np.quantile(
            draws.beta, [0.025, 0.975], axis=0, method="inverted_cdf"
        )
        for j, name in enumerate(draws.confounder_names):
            beta_rows.append(
                {"name": name, "mean": mean[j], "lower": lo[j], "upper": hi[j]}
            )
    summary["beta"] = beta_rows

    imp = variable_importance(draws)
    summary["variable_importance"] = [
        {
            "name": name,
            "mean": float(imp.mean[j]),
            "lower": float(imp.lower[j]),
            "upper": float(imp.upper[j]),
        }
        for j, name in enumerate(imp.names)
    ]
    summary["variable_importance_flagged_all_zero"] = imp.any_all_zero

    contributions = []
    for j, kind in enumerate(draws.moderator_kinds):
        if kind != BINARY:
            continue
        c = marginal_contribution(draws, w, j)
        c_or = c.exp()
        contributions.append(
            {
                "name": draws.moderator_names[j],
                "mean": c.mean,
                "lower": c.lower,
                "upper": c.upper,
                "or_mean": c_or.mean,
                "or_lower": c_or.lower,
                "or_upper": c_or.upper,
            }
        )
    summary["marginal_contributions"] = contributions

    tau_hat = draws.tau.mean(axis=0)
    cart = cart_summary(tau_hat, w)
    leaf_rows = []
    for leaf, n_assigned, value in cart.leaf_table:
        fixed_idx, fixed_vals = _leaf_fixings(cart.tree, leaf, w)
        if fixed_idx:
            pd = partial_dependence(draws, w, fixed_idx, fixed_vals)
            entry = {"mean": pd.mean, "lower": pd.lower, "upper": pd.upper}
        else:
            entry = {"mean": avg.mean, "lower": avg.lower, "upper": avg.upper}
        leaf_rows.append(
            {
                "leaf": leaf,
                "n": n_assigned,
                "surrogate_value": value,
                "fixed": {
                    draws.moderator_names[i]: v
                    for i, v in zip(fixed_idx, fixed_vals)
                },
                "partial_average": entry,
            }
        )
    summary["cart_summary"] = {"summary_r2": cart.summary_r2, "leaves": leaf_rows}
    return summary


def _leaf_fixings(tree, leaf, w_matrix):
    """Moderator values pinning a surrogate-tree leaf for partial averaging.

    Binary branches pin 0/1 directly; continuous branches pin the moderator
    at its mean among the strata routed to the leaf.
    """
    assignment = tree.leaf_assignment(w_matrix)
    members = assignment == leaf
    fixed = {}
    index = leaf
    while index > 1:
        parent = index // 2
        node = tree.nodes[parent]
        went_left = index % 2 == 0
        vals = np.unique(w_matrix[:, node.var])
        if set(vals) <= {0.0, 1.0} and node.cut == 0.0:
            fixed.setdefault(node.var, 0.0 if went_left else 1.0)
        else:
            pool = w_matrix[members, node.var]
            fixed.setdefault(node.var, float(pool.mean()) if pool.size else node.cut)
        index = parent
    idx = sorted(fixed)
    return idx, [fixed[i] for i in idx]


def _format_interval(entry):
    return f"{entry['mean']:10.4f}  [{entry['lower']:8.4f}, {entry['upper']:8.4f}]"


def _summary_text(summary):
    lines = []
    lines.append(f"strata: {summary['n_strata']}    kept draws: {summary['n_draws']}")
    lines.append("")
    lines.append("average exposure effect")
    lines.append(f"  log OR {_format_interval(summary['average_effect']['log_or'])}")
    lines.append(f"  OR     {_format_interval(summary['average_effect']['or'])}")
    lines.append("")
    w = summary["waic"]
    lines.append(
        f"WAIC {w['waic']:.2f}   p_waic {w['p_waic']:.2f}   lppd {w['lppd']:.2f}"
    )
    if summary["beta"]:
        lines.append("")
        lines.append("confounder coefficients (posterior mean, 95% CrI)")
        for row in summary["beta"]:
            lines.append(f"  {row['name']:<16s}{_format_interval(row)}")
    lines.append("")
    lines.append("variable importance (split proportions)")
    for row in summary["variable_importance"]:
        lines.append(f"  {row['name']:<16s}{_format_interval(row)}")
    if summary["marginal_contributions"]:
        lines.append("")
        lines.append("marginal contributions of binary moderators (log OR difference)")
        for row in summary["marginal_contributions"]:
            lines.append(f"  {row['name']:<16s}{_format_interval(row)}")
    cart = summary["cart_summary"]
    lines.append("")
    lines.append(f"surrogate tree summary (R^2 = {cart['summary_r2']:.3f})")
    for leaf in cart["leaves"]:
        fixed = ", ".join(f"{k}={v:g}" for k, v in leaf["fixed"].items()) or "(root)"
        lines.append(
            f"  leaf n={leaf['n']:<6d}{fixed:<40s}"
            f"{_format_interval(leaf['partial_average'])}"
        )
    return "\n".join(lines) + "\n"


def cmd_fit(args):
    started = time.monotonic()
    if args.config is not None and not os.path.exists(args.config):
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    if args.print_config:
        try:
            config = _resolved_sampler_config(args)
        except (ClbartError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps({"version": CONFIG_VERSION, **config.to_dict()}, indent=2))
        return 0
    if not os.path.exists(args.data):
        print(f"error: data file not found: {args.data}", file=sys.stderr)
        return 2
    try:
        config = _resolved_sampler_config(args)
        dataset = ingest_dataset(args.data)
        os.makedirs(args.out, exist_ok=True)
        draws = run_chain(dataset, config)
        draws_path = os.path.join(args.out, "draws.jsonl")
        draws.save(draws_path)
        summary = _summary_dict(draws, dataset)
        _write_atomic(
            os.path.join(args.out, "summary.json"), json.dumps(summary, indent=2) + "\n"
        )
        _write_atomic(os.path.join(args.out, "summary.txt"), _summary_text(summary))
        _write_manifest(
            args.out,
            command=["fit", "--data", args.data, "--out", args.out],
            config=config.to_dict(),
            inputs={"data": args.data, "config": args.config},
            outputs=["draws.jsonl", "summary.json", "summary.txt"],
            seed=config.seed,
            started=started,
        )
        return 0
    except (ClbartError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run_simulation_replicate(payload):
    """One replicate: generate a cohort, fit the oracle and each ensemble size.

    Top-level so process pools can pickle it. Returns the per-estimator
    metric records with scenario and replicate fields attached.
    """
    spec_dict, replicate, cohort_seed, tree_counts, chain_seeds, sampler_overrides = (
        payload
    )
    spec = ScenarioSpec(**{**spec_dict, "seed": cohort_seed})
    dataset, truth = simulate_cohort(spec)
    records = []

    def finish(rec):
        rec["scenario"] = spec.scenario
        rec["replicate"] = replicate
        records.append(rec)

    finish(oracle_record(dataset, truth))
    for n_trees, chain_seed in zip(tree_counts, chain_seeds):
        config = SamplerConfig.from_dict(
            {**sampler_overrides, "n_trees": n_trees, "seed": chain_seed}
        )
        draws = run_chain(dataset, config)
        finish(clbart_record(draws, truth))
    return records


def _replicate_payloads(spec_dict, replicates, tree_counts, sampler_overrides, seed):
    payloads = []
    for rep in range(replicates):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(rep,))
        seeds = ss.generate_state(1 + len(tree_counts))
        payloads.append(
            (
                spec_dict,
                rep,
                int(seeds[0]),
                tuple(tree_counts),
                [int(s) for s in seeds[1:]],
                sampler_overrides,
            )
        )
    return payloads


def _worker_count(args):
    if args.workers is not None:
        return args.workers
    env = os.environ.get("CLBART_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _aggregate_text(rows):
    header = (
        f"{'scenario':<10s}{'estimator':<10s}{'M':>4s}{'reps':>6s}"
        f"{'bias':>10s}{'(se)':>9s}{'rmse':>10s}{'(se)':>9s}"
        f"{'coverage':>10s}{'(se)':>9s}{'width':>10s}{'(se)':>9s}"
    )
    lines = [header]
    for r in rows:
        m = "" if r["n_trees"] is None else str(r["n_trees"])
        lines.append(
            f"{r['scenario']:<10s}{r['estimator']:<10s}{m:>4s}{r['n_replicates']:>6d}"
            f"{r['bias']:>10.4f}{r['bias_se']:>9.4f}"
            f"{r['rmse']:>10.4f}{r['rmse_se']:>9.4f}"
            f"{r['coverage']:>10.4f}{r['coverage_se']:>9.4f}"
            f"{r['width']:>10.4f}{r['width_se']:>9.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_simulate(args):
    started = time.monotonic()
    try:
        tree_counts = [int(tok) for tok in args.trees.split(",") if tok.strip()]
        if not tree_counts or any(m < 1 for m in tree_counts):
            raise ValueError(f"invalid tree counts {args.trees!r}")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        spec_dict = {
            "scenario": args.scenario,
            "n_individuals": args.individuals,
            "horizon_days": args.horizon,
            "alpha": args.alpha,
        }
        ScenarioSpec(**{**spec_dict, "seed": 0})  # validate early
        sampler_overrides = {
            "iterations": args.iterations,
            "burn_in": args.burn_in,
            "thin": args.thin,
        }
        SamplerConfig.from_dict(sampler_overrides)
        payloads = _replicate_payloads(
            spec_dict, args.replicates, tree_counts, sampler_overrides, args.seed
        )
        workers = _worker_count(args)
        if workers > 1 and len(payloads) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_simulation_replicate, payloads))
        else:
            results = [run_simulation_replicate(p) for p in payloads]
        records = [rec for batch in results for rec in batch]

        os.makedirs(args.out, exist_ok=True)
        records_path = os.path.join(args.out, "records.jsonl")
        _write_atomic(
            records_path, "".join(json.dumps(r) + "\n" for r in records)
        )
        rows = aggregate_records(records)
        _write_atomic(
            os.path.join(args.out, "aggregate.json"), json.dumps(rows, indent=2) + "\n"
        )
        _write_atomic(os.path.join(args.out, "aggregate.txt"), _aggregate_text(rows))
        _write_manifest(
            args.out,
            command=[
                "simulate", "--scenario", args.scenario,
                "--replicates", str(args.replicates), "--trees", args.trees,
                "--out", args.out,
            ],
            config={
                "scenario_spec": spec_dict,
                "sampler": sampler_overrides,
                "tree_counts": tree_counts,
                "replicates": args.replicates,
            },
            inputs={},
            outputs=["records.jsonl", "aggregate.json", "aggregate.txt"],
            seed=args.seed,
            started=started,
        )
        return 0
    except (ClbartError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="clbart",
        description="Heterogeneous exposure effects for case-crossover data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit the model to a prepared dataset")
    fit.add_argument("--data", required=True, help="delimited input file")
    fit.add_argument("--config", default=None, help="JSON sampler configuration")
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--trees", type=int, default=None, help="ensemble size")
    fit.add_argument("--iterations", type=int, default=None)
    fit.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    fit.add_argument("--thin", type=int, default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--k", type=float, default=None, help="leaf prior scale constant")
    fit.add_argument(
        "--print-config", action="store_true", help="print the resolved config and exit"
    )
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run the simulation benchmark")
    sim.add_argument("--scenario", required=True, choices=["cart", "friedman"])
    sim.add_argument("--replicates", type=int, required=True)
    sim.add_argument("--trees", required=True, help="comma-separated ensemble sizes")
    sim.add_argument("--out", required=True)
    sim.add_argument("--individuals", type=int, default=10000)
    sim.add_argument("--horizon", type=int, default=1096)
    sim.add_argument("--alpha", type=float, default=-8.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--iterations", type=int, default=10000)
    sim.add_argument("--burn-in", dest="burn_in", type=int, default=5000)
    sim.add_argument("--thin", type=int, default=5)
    sim.add_argument("--workers", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
