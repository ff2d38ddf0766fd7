"""Scenario-driven population generation and Monte Carlo evaluation.

Populations follow an interactive block/treatment model on top of the
(5,3,6,3) reference design scaled to K blocks: block effects and
block-treatment interactions decay along the block index through upper
chi-square(10) quantiles, and unit noise is exchangeably correlated across
treatments with per-block sample moments matched *exactly* (mean 0,
variance ``cell_variance``) so a generated population realizes its intended
setting rather than a random neighborhood of it.

The Monte Carlo engine redraws the two-stage assignment, re-estimates, and
aggregates coverage/length/SE metrics; replicate seeds derive from
(master seed, replicate index) so results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .design import REFERENCE_BIBD_5_3, DesignSpec, build_design
from .estimate import adjusted, hajek, ht, observe
from .population import (
    PotentialOutcomes,
    block_weights,
    estimand,
    make_weights,
    pair_contrast,
    true_var_adjusted,
    true_var_bibd,
)
from .randomize import block_labels, draw_assignment
from .variance import adjusted_var, confidence_interval, contrast_variance, cov_bb, cov_wb

_POPULATION_TAG = 0x90
_SIZES_TAG = 0x51
_REPLICATE_TAG = 0xA5


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    ``n_blocks`` must be a multiple of 10 (the reference catalog has ten
    subsets).  ``setting`` picks the block-size mechanism: S1 fixed at
    ``base_size``; S2 Poisson-derived (3 * max(2, X_k)); S3 like S2 but
    sorted ascending so size grows with the block index.
    """

    n_blocks: int = 10
    setting: str = "S1"
    base_size: int = 15
    poisson_mean: float = 5.0
    beta: float = 0.0
    gamma: float = 0.0
    rho: float = 0.0
    cell_variance: float = 100.0
    weights_kind: str = "unit"
    contrast: tuple[float, ...] = (1.0, -1.0, 0.0, 0.0, 0.0)
    replicates: int = 2000
    seed: int = 0
    estimators: tuple[str, ...] = ("HT", "Hajek")
    variance_flavors: tuple[str, ...] = ("bb", "wb")
    level: float = 0.95
    include_adjusted: bool = False
    pair: tuple[int, int] = (1, 2)

    def __post_init__(self):
        if self.setting not in ("S1", "S2", "S3"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.n_blocks % 10 != 0 or self.n_blocks < 10:
            raise ValueError("n_blocks must be a positive multiple of 10")
        if self.setting == "S1" and self.base_size % 3 != 0:
            raise ValueError("S1 block size must be divisible by 3")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.replicates < 1:
            raise ValueError("at least one replicate required")


def scenario_design(config: ScenarioConfig) -> DesignSpec:
    """The reference BIBD scaled to the scenario's block count and sizes."""
    K = config.n_blocks
    if config.setting == "S1":
        sizes = [config.base_size] * K
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, _SIZES_TAG]))
        draws = rng.poisson(config.poisson_mean, size=K)
        sizes = [3 * max(2, int(x)) for x in draws]
        if config.setting == "S3":
            sizes.sort()
    rep = K // 10
    return build_design(K, 5, 3, REFERENCE_BIBD_5_3,
                        (rep,) * len(REFERENCE_BIBD_5_3), sizes)


def _match_moments(x: np.ndarray, target_var: float) -> np.ndarray:
    """Affinely map x to sample mean 0 and sample variance target_var."""
    x = x - x.mean()
    ss = float(np.sum(x**2))
    if ss <= 0:
        raise ValueError("degenerate draw; cannot rescale to the target variance")
    return x * np.sqrt(target_var * (len(x) - 1) / ss)


def _matched_noise(rng: np.random.Generator, n: int, n_treatments: int,
                   rho: float, variance: float) -> np.ndarray:
    """n x T noise, exchangeably correlated at rho, with exact per-column
    sample mean 0 and sample variance ``variance``.

    For 0 < rho < 1 the idiosyncratic columns are projected orthogonal to
    the shared column before matching, so the mixture keeps the variance
    exact; that projection needs n >= 3.
    """
    if n < 2:
        raise ValueError("moment matching needs at least two units per block")
    if rho == 1.0:
        common = _match_moments(rng.standard_normal(n), variance)
        return np.tile(common[:, None], (1, n_treatments))
    if rho == 0.0:
        raw = rng.standard_normal((n, n_treatments))
        return np.column_stack([_match_moments(raw[:, z], variance)
                                for z in range(n_treatments)])
    if n < 3:
        raise ValueError("0 < rho < 1 moment matching needs at least three units per block")
    common = _match_moments(rng.standard_normal(n), variance)
    cols = []
    for _ in range(n_treatments):
        u = rng.standard_normal(n)
        u = u - (u @ common) / (common @ common) * common
        cols.append(_match_moments(u, variance))
    idio = np.column_stack(cols)
    return np.sqrt(rho) * common[:, None] + np.sqrt(1.0 - rho) * idio


def generate_population(config: ScenarioConfig,
                        design: DesignSpec | None = None) -> PotentialOutcomes:
    """Draw and exactly moment-match one finite population for the scenario."""
    if design is None:
        design = scenario_design(config)
    K = design.n_blocks
    T = design.n_treatments
    ranks = np.arange(1, K + 1)
    quantiles = chi2.ppf(1.0 - ranks / (K + 1), df=10)
    block_effect = config.beta * quantiles
    interaction = quantiles
    treatment_slope = config.gamma * np.arange(1, T + 1)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _POPULATION_TAG]))
    rows = []
    for k in range(K):
        n_k = design.block_sizes[k]
        base = block_effect[k] + treatment_slope * interaction[k]
        eps = _matched_noise(rng, n_k, T, config.rho, config.cell_variance)
        rows.append(base[None, :] + eps)
    return PotentialOutcomes(np.vstack(rows), block_labels(design))


def _replicate_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, _REPLICATE_TAG, index])


def _run_replicates(args):
    """Worker entry: evaluate a contiguous span of replicate indices."""
    (config, design, po, indices) = args
    w = make_weights(config.weights_kind, design)
    g = np.asarray(config.contrast, dtype=float)
    z1, z2 = config.pair
    wants_adj = config.include_adjusted
    out = []
    for i in indices:
        a = draw_assignment(design, _replicate_seed(config.seed, i))
        obs = observe(design, po, a)
        rec = {}
        for name in config.estimators:
            report = ht(obs, w, g) if name == "HT" else hajek(obs, w, g)
            rec[("point", name)] = report.point
            for flavor in config.variance_flavors:
                cov = cov_bb(obs, w, name) if flavor == "bb" else cov_wb(obs, w, name)
                rec[("var", name, flavor)] = contrast_variance(cov, g)
        if wants_adj:
            rec[("point", "Adjusted")] = adjusted(obs, z1, z2).point
            for flavor in config.variance_flavors:
                rec[("var", "Adjusted", flavor)] = adjusted_var(obs, z1, z2, flavor)
        out.append(rec)
    return out


@dataclass(frozen=True)
class PointMetrics:
    estimator: str
    true_value: float
    mean_point: float
    empirical_se: float


@dataclass(frozen=True)
class IntervalMetrics:
    estimator: str
    flavor: str
    coverage: float
    mean_length: float
    mean_variance: float


@dataclass(frozen=True)
class MetricsReport:
    config: ScenarioConfig
    replicates: int
    points: list[PointMetrics]
    intervals: list[IntervalMetrics]
    se_ratios: dict[str, float]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def point(self, estimator: str) -> PointMetrics:
        return next(m for m in self.points if m.estimator == estimator)

    def interval(self, estimator: str, flavor: str) -> IntervalMetrics:
        return next(m for m in self.intervals
                    if m.estimator == estimator and m.flavor == flavor)


def _worker_count() -> int:
    raw = os.environ.get("IBDINFER_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_monte_carlo(config: ScenarioConfig) -> MetricsReport:
    """Evaluate estimators over repeated two-stage randomizations.

    The population is generated once for the cell and held fixed; only the
    assignment is redrawn.  Deterministic for a given config, independent of
    the worker count.
    """
    design = scenario_design(config)
    po = generate_population(config, design)
    w = make_weights(config.weights_kind, design)
    g = np.asarray(config.contrast, dtype=float)
    truth = {name: estimand(po, w, g) for name in config.estimators}

    skipped = []
    config_eff = config
    if config.include_adjusted:
        wb = block_weights(design.n_blocks)
        if not np.allclose(w.values, wb.values, rtol=0, atol=0):
            skipped.append(("Adjusted", "defined for equal block weights only"))
            config_eff = replace(config, include_adjusted=False)
        else:
            truth["Adjusted"] = estimand(po, wb, pair_contrast(*config.pair,
                                                               design.n_treatments))

    indices = list(range(config.replicates))
    workers = _worker_count()
    if workers == 1:
        records = _run_replicates((config_eff, design, po, indices))
    else:
        spans = np.array_split(indices, workers * 4)
        records = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_replicates,
                                  [(config_eff, design, po, list(s)) for s in spans if len(s)]):
                records.extend(chunk)

    names = list(config.estimators) + (
        ["Adjusted"] if config_eff.include_adjusted else [])
    points = {}
    point_rows = []
    for name in names:
        vals = np.array([r[("point", name)] for r in records])
        points[name] = vals
        point_rows.append(PointMetrics(name, truth[name], float(vals.mean()),
                                       float(vals.std(ddof=1))))

    interval_rows = []
    for name in names:
        for flavor in config.variance_flavors:
            key = ("var", name, flavor)
            if key not in records[0]:
                continue
            variances = np.array([r[key] for r in records])
            pts = points[name]
            cis = [confidence_interval(pt, v, config.level)
                   for pt, v in zip(pts, variances)]
            covered = np.array([ci.lower <= truth[name] <= ci.upper for ci in cis])
            lengths = np.array([2.0 * ci.half_width for ci in cis])
            interval_rows.append(IntervalMetrics(
                name, flavor, float(covered.mean()), float(lengths.mean()),
                float(variances.mean())))

    ratios = {}
    for a in names:
        for b in names:
            if a < b:
                ratios[f"{a}/{b}"] = float(points[a].std(ddof=1) / points[b].std(ddof=1))

    return MetricsReport(config, config.replicates, point_rows, interval_rows,
                         ratios, skipped)


@dataclass(frozen=True)
class SeRatioRow:
    beta: float
    empirical_ratio: float
    theoretical_ratio: float
    mc_se: float


def se_ratio_sweep(config: ScenarioConfig, betas, n_batches: int = 25) -> list[SeRatioRow]:
    """Empirical vs theoretical SE(adjusted)/SE(design-based) across a beta grid.

    Requires the equal-size setting (the adjusted estimator's home turf).
    The Monte Carlo standard error of the empirical ratio comes from batch
    means over the replicate stream.
    """
    if config.setting != "S1":
        raise ValueError("SE-ratio comparison is defined under the equal-size setting")
    rows = []
    z1, z2 = config.pair
    for beta in betas:
        cell = replace(config, beta=float(beta), include_adjusted=True,
                       weights_kind="block",
                       contrast=tuple(pair_contrast(z1, z2, 5)),
                       variance_flavors=())
        design = scenario_design(cell)
        po = generate_population(cell, design)
        records = _run_replicates((cell, design, po, list(range(cell.replicates))))
        adj = np.array([r[("point", "Adjusted")] for r in records])
        base = np.array([r[("point", "HT")] for r in records])
        ratio = float(adj.std(ddof=1) / base.std(ddof=1))
        batches_a = np.array_split(adj, n_batches)
        batches_b = np.array_split(base, n_batches)
        batch_ratios = np.array([a.std(ddof=1) / b.std(ddof=1)
                                 for a, b in zip(batches_a, batches_b)])
        mc_se = float(batch_ratios.std(ddof=1) / np.sqrt(n_batches))
        theory = float(np.sqrt(true_var_adjusted(po, design, z1, z2)
                               / true_var_bibd(po, design, z1, z2)))
        rows.append(SeRatioRow(float(beta), ratio, theory, mc_se))
    return rows
