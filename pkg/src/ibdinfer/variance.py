"""Sample variance estimators and confidence intervals.

Two covariance-estimator flavors are provided for the inverse-probability
and ratio estimators: a between-block flavor built purely from block-level
sample variances, and a within-block flavor that adds observed within-cell
variability.  Both are conservative; their expected excess is between-block
or within-block treatment-effect heterogeneity respectively.  Entries whose
pair of treatments co-occurs in fewer than two blocks are zeroed by the
estimator's own indicator; entries that cannot be computed at all (a cell
with a single observation, say) are flagged unavailable and poison any
contrast that needs them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .design import check_bibd, conditional_probs, incidence
from .estimate import ObservedData, cell_counts, membership, observed_block_means
from .population import Weights, as_contrast, block_weights


@dataclass(frozen=True)
class WithinCellVariances:
    """Per-cell sample variances s_k^2(z).

    ``values[k-1, z-1]`` is 0 when block k did not receive z (the defined-as-
    zero convention); ``estimable`` is False only for received cells with a
    single observation, where no sample variance exists.
    """

    values: np.ndarray
    member: np.ndarray
    estimable: np.ndarray


def within_block_s2(obs: ObservedData) -> WithinCellVariances:
    """Observed within-cell sample variances, with availability flags."""
    member = membership(obs)
    counts = cell_counts(obs)
    means = np.where(member, observed_block_means(obs), 0.0)
    dev = obs.outcome - means[obs.block - 1, obs.treatment - 1]
    sq = np.zeros_like(means)
    np.add.at(sq, (obs.block - 1, obs.treatment - 1), dev**2)
    values = np.zeros_like(means)
    np.divide(sq, counts - 1, out=values, where=counts > 1)
    estimable = ~member | (counts > 1)
    return WithinCellVariances(values, member, estimable)


@dataclass(frozen=True)
class BetweenSampleVariances:
    """Block-level sample variances of (weighted) observed cell means.

    ``var[z-1]`` needs the treatment in at least two blocks; ``pair_var``
    needs the pair co-occurring in at least two blocks.  Unmet guards leave
    NaN with the matching ok-flag False.
    """

    estimator: str
    var: np.ndarray
    var_ok: np.ndarray
    pair_var: np.ndarray
    pair_ok: np.ndarray


def between_s2(obs: ObservedData, w: Weights, kind: str) -> BetweenSampleVariances:
    """Between-block sample variances with inverse-probability ("HT") or
    self-normalized ("Hajek") centering, per treatment and per pair."""
    if kind not in ("HT", "Hajek"):
        raise ValueError(f"kind must be 'HT' or 'Hajek', got {kind!r}")
    design = obs.design
    T = design.n_treatments
    K = design.n_blocks
    member = membership(obs)
    bm = np.where(member, observed_block_means(obs), 0.0)
    gw = K * w.values
    p = incidence(design).marginal_probs
    counts_z = member.sum(axis=0)

    if kind == "HT":
        center = (w.values[:, None] * member * bm).sum(axis=0) / p
        dev = gw[:, None] * bm - center
    else:
        wz = (w.values[:, None] * member).sum(axis=0)
        center = (w.values[:, None] * member * bm).sum(axis=0) / wz
        dev = gw[:, None] * (bm - center)
    var = np.full(T, np.nan)
    np.divide((member * dev**2).sum(axis=0), counts_z - 1, out=var, where=counts_z > 1)
    var_ok = counts_z > 1

    both = member[:, :, None] & member[:, None, :]
    l_mat = both.sum(axis=0)
    pair_ok = l_mat > 1
    if kind == "HT":
        pair_center = np.full((T, T), np.nan)
        np.divide(np.einsum("kzy,k,kz->zy", both, gw, bm), l_mat,
                  out=pair_center, where=l_mat > 0)
        pair_dev = (gw[:, None, None] * (bm[:, :, None] - bm[:, None, :])
                    - (pair_center - pair_center.T))
        weight = np.ones(K)
    else:
        pair_wsum = np.einsum("kzy,k->zy", both, w.values)
        pair_center = np.full((T, T), np.nan)
        np.divide(np.einsum("kzy,k,kz->zy", both, w.values, bm), pair_wsum,
                  out=pair_center, where=pair_wsum > 0)
        pair_dev = ((bm[:, :, None] - bm[:, None, :])
                    - (pair_center - pair_center.T))
        weight = gw**2
    sums = np.einsum("kzy,k,kzy->zy", both, weight, np.nan_to_num(pair_dev)**2)
    pair_var = np.full((T, T), np.nan)
    np.divide(sums, l_mat - 1, out=pair_var, where=pair_ok)
    np.fill_diagonal(pair_var, np.where(var_ok, 0.0, np.nan))
    return BetweenSampleVariances(kind, var, var_ok, pair_var, pair_ok)


@dataclass(frozen=True)
class CovEstimate:
    """A T x T covariance-matrix estimate with guard bookkeeping.

    ``zeroed`` marks entries set to zero by the co-occurrence indicator;
    ``available`` is False where the entry could not be computed (NaN in the
    matrix).  Use :func:`contrast_variance` to fold with a contrast safely.
    """

    flavor: str
    estimator: str
    matrix: np.ndarray
    zeroed: np.ndarray
    available: np.ndarray


def cov_bb(obs: ObservedData, w: Weights, kind: str) -> CovEstimate:
    """Between-block covariance estimator (conservative; bias is between-block
    treatment-effect heterogeneity)."""
    design = obs.design
    inc = incidence(design)
    L = inc.treatment_counts.astype(float)
    l_mat = inc.pair_counts.astype(float)
    bs = between_s2(obs, w, kind)
    indicator = l_mat >= 2
    s = np.nan_to_num(bs.var)
    s_pair = np.nan_to_num(bs.pair_var)
    matrix = np.where(indicator,
                      l_mat / (2.0 * np.outer(L, L)) * (s[:, None] + s[None, :] - s_pair),
                      0.0)
    T = design.n_treatments
    available = np.ones((T, T), dtype=bool)
    # An l >= 2 entry needs both marginal variances, but l >= 2 forces L >= 2.
    return CovEstimate("bb", kind, matrix, ~indicator, available)


def cov_wb(obs: ObservedData, w: Weights, kind: str) -> CovEstimate:
    """Within-block covariance estimator (conservative; bias is within-block
    treatment-effect heterogeneity).  Diagonal entries need at least two
    observations per received cell."""
    design = obs.design
    inc = incidence(design)
    L = inc.treatment_counts.astype(float)
    l_mat = inc.pair_counts.astype(float)
    p = inc.marginal_probs
    K = design.n_blocks
    indicator = l_mat >= 2

    base = cov_bb(obs, w, kind)
    shrink = np.where(indicator, 1.0 - np.outer(L, L) / (K * np.where(l_mat > 0, l_mat, 1.0)),
                      0.0)
    matrix = shrink * base.matrix

    cell = within_block_s2(obs)
    counts = cell_counts(obs)
    gw2 = (K * w.values) ** 2
    contrib = np.zeros_like(cell.values)
    np.divide(cell.member * gw2[:, None] * cell.values, counts,
              out=contrib, where=counts > 0)
    diag = contrib.sum(axis=0) / (K**2 * p)

    diag_ok = np.array([bool(np.all(cell.estimable[:, z])) for z in range(design.n_treatments)])
    full = matrix.copy()
    idx = np.arange(design.n_treatments)
    full[idx, idx] = np.where(diag_ok, matrix[idx, idx] + diag, np.nan)
    available = np.ones_like(indicator, dtype=bool)
    available[idx, idx] = diag_ok
    return CovEstimate("wb", kind, full, ~indicator, available)


def contrast_variance(cov: CovEstimate, g) -> float:
    """Fold a covariance estimate with a contrast, failing loudly if any
    needed entry is unavailable."""
    T = cov.matrix.shape[0]
    g = as_contrast(g, T)
    needed = np.outer(g, g) != 0
    bad = needed & ~cov.available
    if np.any(bad):
        pairs = [(int(z + 1), int(z2 + 1)) for z, z2 in zip(*np.nonzero(bad)) if z <= z2]
        raise ValueError(
            f"{cov.flavor} variance ({cov.estimator}) unavailable for entries {pairs}")
    return float(g @ np.where(needed, cov.matrix, 0.0) @ g)


def adjusted_var(obs: ObservedData, z1: int, z2: int, flavor: str) -> float:
    """Conservative variance estimate for the block-adjusted estimator.

    Both flavors share a between-block core built from pairwise block-level
    sample variances weighted by the conditional co-occurrence probabilities;
    the "wb" flavor adds observed within-cell variability (needing two or
    more observations per relevant cell) while "bb" adds the pairwise
    between-block sample variance.
    """
    if flavor not in ("bb", "wb"):
        raise ValueError(f"flavor must be 'bb' or 'wb', got {flavor!r}")
    design = obs.design
    status = check_bibd(design)
    if not status.is_bibd:
        raise ValueError(f"adjusted variance is defined for BIBDs only: {status.violation}")
    if status.common_pair_count < 2:
        raise ValueError(
            f"pairs co-occur in {status.common_pair_count} block(s); need at least 2")
    K = design.n_blocks
    T = design.n_treatments
    t = design.treatments_per_block
    bs = between_s2(obs, block_weights(K), "HT")

    def sbar(focal, other):
        table = conditional_probs(design, focal, other)
        others = [z for z in range(1, T + 1) if z not in (focal, other)]
        first = sum(table.co_prob[z - 1] * bs.pair_var[focal - 1, z - 1] for z in others)
        second = sum(table.co_pair_prob[z - 1, z2 - 1] * bs.pair_var[z - 1, z2 - 1]
                     for z in others for z2 in others if z2 != z)
        return first / (t - 1) - second / (2 * (t - 1) ** 2)

    core = (bs.pair_var[z1 - 1, z2 - 1]
            + (T - 1) * (t - 1) / t * (sbar(z1, z2) + sbar(z2, z1))) / K
    result = (T - t) / (T * (t - 1)) * core
    if flavor == "bb":
        return float(result + bs.pair_var[z1 - 1, z2 - 1] / K)

    cell = within_block_s2(obs)
    sizes = np.asarray(design.block_sizes, dtype=float)
    bad_blocks = [k + 1 for k in range(K)
                  if not (cell.estimable[k, z1 - 1] and cell.estimable[k, z2 - 1])]
    if bad_blocks:
        raise ValueError(
            f"within-block variances unavailable in blocks {bad_blocks} "
            "(single observation per cell)")
    within = np.sum((cell.member[:, z1 - 1] * cell.values[:, z1 - 1]
                     + cell.member[:, z2 - 1] * cell.values[:, z2 - 1]) * T / sizes) / K**2
    return float(result + within)


@dataclass(frozen=True)
class IntervalReport:
    """A normal-approximation confidence interval."""

    point: float
    half_width: float
    lower: float
    upper: float
    level: float
    variance_used: float
    clamped: bool


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


def confidence_interval(point: float, variance: float, level: float = 0.95) -> IntervalReport:
    """Two-sided interval from a point estimate and its variance estimate.

    A negative variance estimate (possible for plug-in contrast variances)
    is clamped to zero here and only here, with ``clamped`` set.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be inside (0, 1), got {level}")
    clamped = variance < 0
    z = normal_quantile(0.5 + level / 2.0)
    half = z * np.sqrt(max(variance, 0.0))
    return IntervalReport(point, float(half), float(point - half), float(point + half),
                          level, float(variance), bool(clamped))
