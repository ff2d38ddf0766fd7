"""Command-line interface.

Subcommands: ``design check``, ``randomize``, ``analyze``, ``simulate``,
``oracle count`` and ``oracle verify``.  All randomized commands take
``--seed``; ``simulate`` expands a JSON scenario grid into metric rows.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys

import numpy as np

from . import data as data_mod
from .design import check_bibd, incidence, load_design
from .estimate import adjusted, from_arrays, hajek, ht, observe
from .harness import MetricsReport, ScenarioConfig, run_monte_carlo
from .population import (
    block_weights,
    estimand,
    make_weights,
    pair_contrast,
    true_cov_ht,
    true_var_adjusted,
    true_var_bibd,
    unit_weights,
    variance_components,
    weighted_means,
)
from .randomize import (
    block_labels,
    count_assignments,
    draw_assignment,
    enumerate_assignments,
)
from .variance import adjusted_var, confidence_interval, contrast_variance, cov_bb, cov_wb


def _cmd_design_check(args) -> int:
    design = load_design(args.design)
    inc = incidence(design)
    status = check_bibd(design)
    print(f"K={design.n_blocks} T={design.n_treatments} t={design.treatments_per_block}")
    print(f"treatment_counts: {inc.treatment_counts.tolist()}")
    print(f"pair_counts:\n{inc.pair_counts}")
    print(f"marginal_probs: {np.round(inc.marginal_probs, 6).tolist()}")
    if status.is_bibd:
        print(f"is_bibd=true L={status.common_treatment_count} l={status.common_pair_count}")
    else:
        print(f"is_bibd=false ({status.violation})")
    return 0


def _cmd_randomize(args) -> int:
    design = load_design(args.design)
    assignment = draw_assignment(design, args.seed)
    writer = csv.writer(sys.stdout if args.out is None else open(args.out, "w", newline=""))
    writer.writerow(["unit_id", "block", "treatment"])
    labels = block_labels(design)
    for i, (b, z) in enumerate(zip(labels, assignment.unit_treatments)):
        writer.writerow([i, int(b), int(z)])
    return 0


def _cmd_analyze(args) -> int:
    design = load_design(args.design)
    mapping = json.loads(args.treatment_map) if args.treatment_map else None
    rows = data_mod.load_rows(args.data, mapping)
    obs = from_arrays(design,
                      [row.block for row in rows],
                      [row.treatment for row in rows],
                      [row.outcome for row in rows],
                      [row.unit_id for row in rows],
                      strict=not args.lenient)
    w = make_weights(args.weights, design)

    if args.estimator == "adjusted":
        if args.pair is None:
            print("error: --pair required for the adjusted estimator", file=sys.stderr)
            return 2
        z1, z2 = (int(x) for x in args.pair.split(","))
        report = adjusted(obs, z1, z2)
        g = pair_contrast(z1, z2, design.n_treatments)
        variance = adjusted_var(obs, z1, z2, args.variance)
    else:
        if args.contrast is None:
            print("error: --contrast required", file=sys.stderr)
            return 2
        g = np.array([float(x) for x in args.contrast.split(",")])
        report = ht(obs, w, g) if args.estimator == "ht" else hajek(obs, w, g)
        cov = cov_bb(obs, w, report.estimator) if args.variance == "bb" \
            else cov_wb(obs, w, report.estimator)
        variance = contrast_variance(cov, g)
    ci = confidence_interval(report.point, variance, args.level)

    payload = {
        "estimator": report.estimator,
        "weights": w.kind,
        "point": report.point,
        "treatment_means": [None if np.isnan(v) else v for v in report.treatment_means],
        "variance_flavor": args.variance,
        "variance": variance,
        "level": args.level,
        "lower": ci.lower,
        "upper": ci.upper,
        "clamped": ci.clamped,
        "unbalanced": report.unbalanced,
    }
    if report.normalizers is not None:
        payload["normalizers"] = report.normalizers.tolist()
    json.dump(payload, sys.stdout, indent=2)
    print()
    return 0


def _expand_grid(payload: dict) -> list[dict]:
    if "cells" in payload:
        return list(payload["cells"])
    grid = payload.get("grid", payload)
    keys = list(grid)
    lists = [v if isinstance(v, list) else [v] for v in grid.values()]
    return [dict(zip(keys, combo)) for combo in itertools.product(*lists)]


_TUPLE_FIELDS = {"contrast", "estimators", "variance_flavors", "pair"}


def _cmd_simulate(args) -> int:
    with open(args.scenarios) as fh:
        payload = json.load(fh)
    cells = _expand_grid(payload)
    if not cells:
        print("error: scenario file defines no cells", file=sys.stderr)
        return 2
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    writer = csv.writer(out)
    writer.writerow(["setting", "n_blocks", "beta", "gamma", "rho", "weights",
                     "estimator", "flavor", "replicates", "true_value", "mean_point",
                     "empirical_se", "coverage", "mean_ci_length", "mean_variance"])
    for cell in cells:
        fields = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
                  for k, v in cell.items()}
        config = ScenarioConfig(**fields)
        if args.paper_scale:
            from dataclasses import replace
            config = replace(config, replicates=10_000)
        report = run_monte_carlo(config)
        _write_metric_rows(writer, report)
    if out is not sys.stdout:
        out.close()
    return 0


def _write_metric_rows(writer, report: MetricsReport) -> None:
    c = report.config
    base = [c.setting, c.n_blocks, c.beta, c.gamma, c.rho, c.weights_kind]
    for pm in report.points:
        iv = [m for m in report.intervals if m.estimator == pm.estimator]
        if not iv:
            writer.writerow(base + [pm.estimator, "", report.replicates, pm.true_value,
                                    pm.mean_point, pm.empirical_se, "", "", ""])
        for m in iv:
            writer.writerow(base + [pm.estimator, m.flavor, report.replicates,
                                    pm.true_value, pm.mean_point, pm.empirical_se,
                                    m.coverage, m.mean_length, m.mean_variance])


def _cmd_oracle_count(args) -> int:
    design = load_design(args.design)
    print(count_assignments(design))
    return 0


def _check(label: str, err: float, tol: float) -> bool:
    ok = err <= tol
    print(f"{'PASS' if ok else 'FAIL'} {label}: max error {err:.3e} (tol {tol:.0e})")
    return ok


def _cmd_oracle_verify(args) -> int:
    """Exhaustively verify the closed-form moments against enumeration."""
    design = load_design(args.design)
    po = data_mod.load_potential_outcomes_csv(args.outcomes, design)
    T = design.n_treatments
    weights = unit_weights(design.block_sizes)
    g = pair_contrast(1, 2, T)

    dist = enumerate_assignments(design, cap=args.cap)
    mean = np.zeros(T)
    cov = np.zeros((T, T))
    adj_mean = adj_sq = 0.0
    bb_mean = wb_mean = 0.0
    status = check_bibd(design)
    small_cells = any(design.units_per_cell(k + 1) < 2 for k in range(design.n_blocks))
    do_adj = status.is_bibd
    do_wb = not small_cells
    do_adj_wb = do_adj and do_wb and status.common_pair_count >= 2
    adj_bb_mean = adj_wb_mean = 0.0
    for a, p in dist:
        obs = observe(design, po, a)
        m = ht(obs, weights, g).treatment_means
        mean += p * m
        cov += p * np.outer(m, m)
        bb_mean += p * contrast_variance(cov_bb(obs, weights, "HT"), g)
        if do_wb:
            wb_mean += p * contrast_variance(cov_wb(obs, weights, "HT"), g)
        if do_adj:
            pt = adjusted(obs, 1, 2).point
            adj_mean += p * pt
            adj_sq += p * pt * pt
            if status.common_pair_count >= 2:
                adj_bb_mean += p * adjusted_var(obs, 1, 2, "bb")
                if do_adj_wb:
                    adj_wb_mean += p * adjusted_var(obs, 1, 2, "wb")
    cov -= np.outer(mean, mean)

    ok = True
    target_mean = weighted_means(po, weights)
    ok &= _check("unbiasedness (treatment means)",
                 float(np.max(np.abs(mean - target_mean))), 1e-12)
    ok &= _check("exact covariance",
                 float(np.max(np.abs(cov - true_cov_ht(po, design, weights)))), 1e-10)

    comp = variance_components(po, weights, g)
    bias_bb, bias_wb = _theorem_s1_biases(design, po, weights, g, comp)
    truth = float(g @ true_cov_ht(po, design, weights) @ g)
    ok &= _check("between-flavor variance-estimator bias",
                 abs(bb_mean - truth - bias_bb), 1e-9)
    if do_wb:
        ok &= _check("within-flavor variance-estimator bias",
                     abs(wb_mean - truth - bias_wb), 1e-9)
    if do_adj:
        wb_blocks = block_weights(design.n_blocks)
        tau = estimand(po, wb_blocks, g)
        ok &= _check("adjusted-estimator unbiasedness", abs(adj_mean - tau), 1e-12)
        ok &= _check("adjusted-estimator exact variance",
                     abs(adj_sq - adj_mean**2 - true_var_adjusted(po, design, 1, 2)), 1e-10)
        ok &= _check("pairwise variance (two closed forms)",
                     abs(true_var_bibd(po, design, 1, 2)
                         - float(g @ true_cov_ht(po, design, wb_blocks) @ g)), 1e-12)
        if status.common_pair_count >= 2:
            comp_b = variance_components(po, wb_blocks, g)
            ok &= _check("adjusted bb variance-estimator bias",
                         abs(adj_bb_mean - true_var_adjusted(po, design, 1, 2)
                             - comp_b.between_ht_pair_var[0, 1] / design.n_blocks), 1e-9)
            if do_adj_wb:
                tgt = float(np.sum(comp_b.within_pair_var[:, 0, 1] / po.block_sizes)
                            / design.n_blocks**2)
                ok &= _check("adjusted wb variance-estimator bias",
                             abs(adj_wb_mean - true_var_adjusted(po, design, 1, 2) - tgt),
                             1e-9)
    return 0 if ok else 1


def _theorem_s1_biases(design, po, weights, g, comp):
    """Exact expected excess of the two variance estimators over the truth."""
    inc = incidence(design)
    L = inc.treatment_counts
    l_mat = inc.pair_counts
    K = design.n_blocks
    T = design.n_treatments
    gw2 = (K * weights.values) ** 2
    sizes = po.block_sizes
    bias_bb = comp.between_ht_contrast / K
    bias_wb = float(np.sum(comp.within_contrast / sizes)) / K**2
    for i in range(T):
        for j in range(T):
            if i == j or g[i] * g[j] == 0 or l_mat[i, j] > 1:
                continue
            between = (comp.between_ht_var[i] + comp.between_ht_var[j]
                       - comp.between_ht_pair_var[i, j])
            within = float(np.sum(gw2 * (comp.within_var[:, i] + comp.within_var[:, j]
                                         - comp.within_pair_var[:, i, j]) / sizes)) / K
            d = between - within
            bias_bb -= g[i] * g[j] * l_mat[i, j] / (2.0 * L[i] * L[j]) * d
            bias_wb += g[i] * g[j] * 0.5 * (1.0 / K - l_mat[i, j] / (L[i] * L[j])) * d
    return bias_bb, bias_wb


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibdinfer",
                                     description="design-based inference for incomplete block designs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_design = sub.add_parser("design", help="design-file utilities")
    design_sub = p_design.add_subparsers(dest="design_command", required=True)
    p_check = design_sub.add_parser("check", help="print incidence and balance status")
    p_check.add_argument("design")
    p_check.set_defaults(func=_cmd_design_check)

    p_rand = sub.add_parser("randomize", help="draw one two-stage assignment")
    p_rand.add_argument("design")
    p_rand.add_argument("--seed", type=int, required=True)
    p_rand.add_argument("--out")
    p_rand.set_defaults(func=_cmd_randomize)

    p_an = sub.add_parser("analyze", help="estimate from an observed-data CSV")
    p_an.add_argument("data")
    p_an.add_argument("--design", required=True)
    p_an.add_argument("--estimator", choices=["ht", "hajek", "adjusted"], default="ht")
    p_an.add_argument("--weights", choices=["block", "unit"], default="block")
    p_an.add_argument("--contrast", help="comma-separated contrast, e.g. '1,-1,0'")
    p_an.add_argument("--pair", help="comma-separated pair for the adjusted estimator")
    p_an.add_argument("--variance", choices=["bb", "wb"], default="bb")
    p_an.add_argument("--level", type=float, default=0.95)
    p_an.add_argument("--treatment-map", help="JSON object mapping labels to 1..T")
    p_an.add_argument("--lenient", action="store_true",
                      help="accept unbalanced within-block counts")
    p_an.set_defaults(func=_cmd_analyze)

    p_sim = sub.add_parser("simulate", help="run scenario cells, emit metrics CSV")
    p_sim.add_argument("scenarios")
    p_sim.add_argument("--out")
    p_sim.add_argument("--paper-scale", action="store_true",
                       help="10,000 replicates per cell")
    p_sim.set_defaults(func=_cmd_simulate)

    p_oracle = sub.add_parser("oracle", help="exact enumeration checks")
    oracle_sub = p_oracle.add_subparsers(dest="oracle_command", required=True)
    p_count = oracle_sub.add_parser("count", help="number of legal assignments")
    p_count.add_argument("design")
    p_count.set_defaults(func=_cmd_oracle_count)
    p_verify = oracle_sub.add_parser("verify",
                                     help="verify closed-form moments by enumeration")
    p_verify.add_argument("design")
    p_verify.add_argument("outcomes", help="CSV with columns unit_id,block,y1..yT")
    p_verify.add_argument("--cap", type=int, default=10_000_000)
    p_verify.set_defaults(func=_cmd_oracle_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
