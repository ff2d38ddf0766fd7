"""Finite-population quantities: estimands and exact randomization moments.

Everything here is computed from the full potential-outcome matrix, so these
are oracle-side values: the estimand itself, within/between-block variance
components, the exact covariance of the inverse-probability estimator, the
pairwise-contrast variance under a balanced design, the variance of the
block-adjusted estimator, and the closed-form difference between the two.
Sample-side analogues that only see observed data live in ``variance``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import DesignSpec, check_bibd, conditional_probs, incidence


@dataclass(frozen=True)
class PotentialOutcomes:
    """Fixed N x T matrix of potential outcomes with per-unit block labels.

    ``outcomes[i, z-1]`` is unit i's outcome under treatment z.  Units must
    be grouped by block in ascending block order (1..K), every block
    nonempty.
    """

    outcomes: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        b = np.asarray(self.blocks, dtype=np.int64)
        if y.ndim != 2 or b.ndim != 1 or y.shape[0] != b.shape[0]:
            raise ValueError("outcomes must be N x T with one block label per unit")
        if b.shape[0] == 0:
            raise ValueError("empty population")
        if np.any(np.diff(b) < 0):
            raise ValueError("units must be grouped by block in ascending order")
        labels = np.unique(b)
        if b[0] != 1 or not np.array_equal(labels, np.arange(1, labels[-1] + 1)):
            raise ValueError("block labels must cover 1..K with every block nonempty")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "blocks", b)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_blocks(self) -> int:
        return int(self.blocks[-1])

    @property
    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.blocks, minlength=self.n_blocks + 1)[1:]

    def check_design(self, design: DesignSpec) -> None:
        if self.n_treatments != design.n_treatments:
            raise ValueError(
                f"{self.n_treatments} outcome columns for {design.n_treatments} treatments")
        if not np.array_equal(self.block_sizes, design.block_sizes):
            raise ValueError("population block sizes do not match the design")


@dataclass(frozen=True)
class Weights:
    """Normalized block weights with a provenance tag."""

    values: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.values, dtype=float)
        if w.ndim != 1 or np.any(w <= 0):
            raise ValueError("weights must be a 1-d positive vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()}, expected 1")
        object.__setattr__(self, "values", w)


def block_weights(n_blocks: int) -> Weights:
    """Equal weight per block (block-level estimand)."""
    return Weights(np.full(n_blocks, 1.0 / n_blocks), "block_level")


def unit_weights(block_sizes) -> Weights:
    """Weight proportional to block size (unit-level estimand)."""
    n = np.asarray(block_sizes, dtype=float)
    return Weights(n / n.sum(), "unit_level")


def make_weights(kind: str, design: DesignSpec) -> Weights:
    if kind in ("block", "block_level"):
        return block_weights(design.n_blocks)
    if kind in ("unit", "unit_level"):
        return unit_weights(design.block_sizes)
    raise ValueError(f"unknown weight kind {kind!r}")


def as_contrast(g, n_treatments: int) -> np.ndarray:
    """Validate a contrast vector: length T, entries summing to zero."""
    arr = np.asarray(g, dtype=float)
    if arr.shape != (n_treatments,):
        raise ValueError(f"contrast must have length {n_treatments}")
    scale = max(1.0, float(np.max(np.abs(arr))) if arr.size else 1.0)
    if abs(arr.sum()) > 1e-12 * scale:
        raise ValueError(f"contrast entries sum to {arr.sum()}, expected 0")
    return arr


def pair_contrast(z1: int, z2: int, n_treatments: int) -> np.ndarray:
    g = np.zeros(n_treatments)
    g[z1 - 1] = 1.0
    g[z2 - 1] = -1.0
    return g


def block_means(po: PotentialOutcomes) -> np.ndarray:
    """K x T matrix of per-block mean potential outcomes."""
    sizes = po.block_sizes
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    sums = np.add.reduceat(po.outcomes, offsets[:-1], axis=0)
    return sums / sizes[:, None]


def weighted_means(po: PotentialOutcomes, w: Weights) -> np.ndarray:
    """Length-T vector of weighted treatment means across blocks."""
    return w.values @ block_means(po)


def estimand(po: PotentialOutcomes, w: Weights, g) -> float:
    """Contrast of weighted treatment means."""
    g = as_contrast(g, po.n_treatments)
    return float(g @ weighted_means(po, w))


@dataclass(frozen=True)
class VarianceComponents:
    """Within- and between-block variance terms of a fixed population.

    Within terms use (n_k - 1) divisors, between terms (K - 1).  When a
    contrast was supplied, the contrast-level terms are filled; otherwise
    they are None.  ``within_defined[k-1]`` is False for single-unit blocks,
    whose within rows are NaN.
    """

    within_var: np.ndarray          # K x T        S_k^2(z)
    within_pair_var: np.ndarray     # K x T x T    S_k^2(tau(z, z'))
    between_ht_var: np.ndarray      # T            variance of K w_k * block mean
    between_ht_pair_var: np.ndarray  # T x T
    between_haj_var: np.ndarray     # T            (K w_k)^2-weighted deviations
    between_haj_pair_var: np.ndarray  # T x T
    within_defined: np.ndarray      # K bool
    between_ht_contrast: float | None = None
    between_haj_contrast: float | None = None
    within_contrast: np.ndarray | None = None  # K   S_k^2(tau_w(g))


def variance_components(po: PotentialOutcomes, w: Weights, g=None) -> VarianceComponents:
    K = po.n_blocks
    T = po.n_treatments
    if K < 2:
        raise ValueError("between-block variances need at least two blocks")
    sizes = po.block_sizes
    bm = block_means(po)
    gw = K * w.values  # K w_k
    m = w.values @ bm  # weighted treatment means

    within = np.full((K, T), np.nan)
    within_pair = np.full((K, T, T), np.nan)
    defined = sizes >= 2
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for k in range(K):
        if not defined[k]:
            continue
        yk = po.outcomes[offsets[k]:offsets[k + 1]]
        centered = yk - bm[k]
        within[k] = np.sum(centered**2, axis=0) / (sizes[k] - 1)
        diff = centered[:, :, None] - centered[:, None, :]
        within_pair[k] = np.sum(diff**2, axis=0) / (sizes[k] - 1)

    dev_ht = gw[:, None] * bm - m          # K w_k Ybar_k(z) - Ybar(z; w)
    between_ht = np.sum(dev_ht**2, axis=0) / (K - 1)
    pair_ht = gw[:, None, None] * (bm[:, :, None] - bm[:, None, :]) \
        - (m[:, None] - m[None, :])
    between_ht_pair = np.sum(pair_ht**2, axis=0) / (K - 1)

    dev_haj = gw[:, None] * (bm - m)       # K w_k (Ybar_k(z) - Ybar(z; w))
    between_haj = np.sum(dev_haj**2, axis=0) / (K - 1)
    pair_haj = gw[:, None, None] * ((bm[:, :, None] - bm[:, None, :])
                                    - (m[:, None] - m[None, :]))
    between_haj_pair = np.sum(pair_haj**2, axis=0) / (K - 1)

    ht_c = haj_c = None
    within_c = None
    if g is not None:
        g = as_contrast(g, T)
        ht_c = float(np.sum((gw * (bm @ g) - m @ g) ** 2) / (K - 1))
        haj_c = float(np.sum((gw * (bm @ g - m @ g)) ** 2) / (K - 1))
        within_c = np.full(K, np.nan)
        for k in range(K):
            if not defined[k]:
                continue
            yk = po.outcomes[offsets[k]:offsets[k + 1]]
            dev = gw[k] * (yk @ g - bm[k] @ g)
            within_c[k] = np.sum(dev**2) / (sizes[k] - 1)

    return VarianceComponents(within, within_pair, between_ht, between_ht_pair,
                              between_haj, between_haj_pair, defined,
                              ht_c, haj_c, within_c)


def true_cov_ht(po: PotentialOutcomes, design: DesignSpec, w: Weights) -> np.ndarray:
    """Exact T x T covariance of the inverse-probability treatment-mean vector.

    Sum of a between-block and a within-block matrix, scaled by 1/K; requires
    every block to have at least two units.
    """
    po.check_design(design)
    comp = variance_components(po, w)
    if not np.all(comp.within_defined):
        raise ValueError("within-block variances undefined for single-unit blocks")
    inc = incidence(design)
    p = inc.marginal_probs
    q = inc.pair_probs
    K = design.n_blocks
    sizes = po.block_sizes
    gw2 = (K * w.values) ** 2
    t = design.treatments_per_block

    s_ht = comp.between_ht_var
    between = 0.5 * (q / np.outer(p, p) - 1.0) * (
        s_ht[:, None] + s_ht[None, :] - comp.between_ht_pair_var)

    # Sum over blocks of (K w_k)^2 * [S_k^2(z) + S_k^2(z') - S_k^2(tau)] / n_k
    sk_over_n = (gw2 / sizes)[:, None] * comp.within_var           # K x T
    cross = sk_over_n[:, :, None] + sk_over_n[:, None, :] \
        - (gw2 / sizes)[:, None, None] * comp.within_pair_var
    within = -(q / (2.0 * np.outer(p, p))) * np.sum(cross, axis=0) / K
    diag = (t - 1) * np.sum(sk_over_n, axis=0) / (K * p)
    np.fill_diagonal(within, diag)

    return (between + within) / K


def true_var_contrast_ht(po: PotentialOutcomes, design: DesignSpec, w: Weights, g) -> float:
    """Exact variance of the inverse-probability contrast estimator."""
    g = as_contrast(g, po.n_treatments)
    return float(g @ true_cov_ht(po, design, w) @ g)


def _require_bibd(design: DesignSpec):
    status = check_bibd(design)
    if not status.is_bibd:
        raise ValueError(f"operation defined for BIBDs only: {status.violation}")
    return status


def true_var_bibd(po: PotentialOutcomes, design: DesignSpec, z1: int, z2: int) -> float:
    """Exact variance of the pairwise-difference estimator under a BIBD (w = 1/K).

    Weighted combination of between-block and within-block terms with design
    coefficients (T-t)/(t(T-1)) and T(t-1)/(t(T-1)).
    """
    po.check_design(design)
    _require_bibd(design)
    K = design.n_blocks
    T = design.n_treatments
    t = design.treatments_per_block
    comp = variance_components(po, block_weights(K))
    i, j = z1 - 1, z2 - 1
    s_bb = comp.between_ht_var
    between = (s_bb[i] + s_bb[j]) * T / K - comp.between_ht_pair_var[i, j] / K
    sizes = po.block_sizes
    within = np.sum((comp.within_var[:, i] + comp.within_var[:, j]) * T / sizes
                    - comp.within_pair_var[:, i, j] / sizes) / K**2
    return float(((T - t) * between + T * (t - 1) * within) / (t * (T - 1)))


def _adjusted_prob_sums(table, values_pair: np.ndarray, t: int,
                        focal: int, excluded: int) -> float:
    """p(z)-weighted average of pairwise terms tau(focal, .) minus the
    co-occurrence correction, the closed form of the subset average."""
    T = values_pair.shape[0]
    others = [z for z in range(1, T + 1) if z not in (focal, excluded)]
    first = sum(table.co_prob[z - 1] * values_pair[focal - 1, z - 1] for z in others)
    second = sum(table.co_pair_prob[z - 1, z2 - 1] * values_pair[z - 1, z2 - 1]
                 for z in others for z2 in others if z2 != z)
    return first / (t - 1) - second / (2 * (t - 1) ** 2)


def _adjusted_terms(po, design, z1, z2, explicit=False):
    """Between and within building blocks of the adjusted estimator's variance.

    Returns (sbb_pair, sbar_bb, v_pair, vbar, comp) where sbar_bb[z] and
    vbar[z] are dicts keyed by focal treatment.  ``explicit`` averages over
    the eligible catalog subsets directly instead of the probability-weighted
    closed form (slower; used for cross-checking).
    """
    K = design.n_blocks
    t = design.treatments_per_block
    comp = variance_components(po, block_weights(K))
    sizes = po.block_sizes
    i, j = z1 - 1, z2 - 1
    sbb_pair = comp.between_ht_pair_var[i, j]
    v_pair = ((comp.within_var[:, i] + comp.within_var[:, j]) * t
              - comp.within_pair_var[:, i, j]) / sizes

    sbar_bb = {}
    vbar = {}
    bm = block_means(po)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for focal, other in ((z1, z2), (z2, z1)):
        if explicit:
            subsets = [w for w in design.catalog if focal in w and other not in w]
            sbb_vals = []
            sk_tau_bar = np.zeros(K)
            sk_bar = np.zeros(K)
            for omega in subsets:
                rest = [z for z in omega if z != focal]
                contrast_bm = bm[:, focal - 1] - bm[:, [z - 1 for z in rest]].mean(axis=1)
                sbb_vals.append(np.sum((contrast_bm - contrast_bm.mean())**2) / (K - 1))
                for k in range(K):
                    yk = po.outcomes[offsets[k]:offsets[k + 1]]
                    ci = yk[:, focal - 1] - yk[:, [z - 1 for z in rest]].mean(axis=1)
                    sk_tau_bar[k] += np.sum((ci - ci.mean())**2) / (sizes[k] - 1)
                    sk_bar[k] += sum(comp.within_var[k, z - 1] for z in rest) / (t - 1)
            n_sub = len(subsets)
            sbar_bb[focal] = float(np.sum(sbb_vals) / n_sub)
            sk_tau_bar /= n_sub
            sk_bar /= n_sub
        else:
            table = conditional_probs(design, focal, other)
            sbar_bb[focal] = _adjusted_prob_sums(
                table, comp.between_ht_pair_var, t, focal, other)
            sk_tau_bar = np.array([
                _adjusted_prob_sums(table, comp.within_pair_var[k], t, focal, other)
                for k in range(K)])
            others = [z for z in range(1, design.n_treatments + 1)
                      if z not in (focal, other)]
            sk_bar = sum(table.co_prob[z - 1] * comp.within_var[:, z - 1]
                         for z in others) / (t - 1)
        vbar[focal] = (t * comp.within_var[:, focal - 1]
                       + sk_bar * t / (t - 1) - sk_tau_bar) / sizes
    return sbb_pair, sbar_bb, v_pair, vbar, comp


def true_var_adjusted(po: PotentialOutcomes, design: DesignSpec, z1: int, z2: int,
                      explicit: bool = False) -> float:
    """Exact variance of the block-adjusted pairwise estimator under a BIBD."""
    po.check_design(design)
    _require_bibd(design)
    if not np.all(po.block_sizes >= 2):
        raise ValueError("within-block variances undefined for single-unit blocks")
    K = design.n_blocks
    T = design.n_treatments
    t = design.treatments_per_block
    sbb_pair, sbar_bb, v_pair, vbar, _ = _adjusted_terms(po, design, z1, z2, explicit)
    between = (sbb_pair + (T - 1) * (t - 1) / t * (sbar_bb[z1] + sbar_bb[z2])) / K
    within = np.sum(t * v_pair + (T - t) * (t - 1) / t * (vbar[z1] + vbar[z2])) / K**2
    return float(((T - t) * between + (T - 1) * within) / (T * (t - 1)))


@dataclass(frozen=True)
class VarianceDifference:
    """Closed-form var(adjusted) - var(design-based), split by component."""

    between: float
    within: float

    @property
    def total(self) -> float:
        return self.between + self.within


def variance_difference(po: PotentialOutcomes, design: DesignSpec,
                        z1: int, z2: int) -> VarianceDifference:
    """Between- and within-block components of var(adjusted) - var(design-based)."""
    po.check_design(design)
    _require_bibd(design)
    K = design.n_blocks
    T = design.n_treatments
    t = design.treatments_per_block
    sbb_pair, sbar_bb, v_pair, vbar, comp = _adjusted_terms(po, design, z1, z2)
    sizes = po.block_sizes
    i, j = z1 - 1, z2 - 1
    coef = (2 * T * t - T - t) / (T * (T - 1) * (t - 1))

    between = (T - t) / (K * t) * (
        coef * sbb_pair
        + (T - 1) / T * (sbar_bb[z1] + sbar_bb[z2])
        - T / (T - 1) * (comp.between_ht_var[i] + comp.between_ht_var[j]))
    within_terms = (
        coef * v_pair
        + (T - 1) / T * (vbar[z1] + vbar[z2])
        - T * (t - 1) / (T - 1) * (comp.within_var[:, i] + comp.within_var[:, j]) / sizes)
    within = (T - t) / (K**2 * t) * float(np.sum(within_terms))
    return VarianceDifference(float(between), within)


def threshold_constant(rho: float, n_treatments: int, treatments_per_block: int) -> float:
    """Between/within variability ratio at which the adjusted and design-based
    estimators tie, under the additive model with exchangeable correlation rho."""
    T, t = n_treatments, treatments_per_block
    return (T - 1) / T * (1.0 + rho / (t - 1)) + rho


def ht_haj_gap(po: PotentialOutcomes, w: Weights, z: int) -> float:
    """Difference of the two between-block variance flavors for treatment z.

    Computed directly and through the closed-form identity linking them; the
    two routes must agree to 1e-10 (relative), which guards both code paths.
    """
    comp = variance_components(po, w)
    direct = float(comp.between_ht_var[z - 1] - comp.between_haj_var[z - 1])

    K = po.n_blocks
    gw = K * w.values
    bm = block_means(po)[:, z - 1]
    m = float(weighted_means(po, w)[z - 1])
    gamma2_bar = float(np.mean(gw**2))
    cross_bar = float(np.mean(gw**2 * bm))
    identity = -K / (K - 1) * (m**2 * (gamma2_bar + 1.0) - 2.0 * m * cross_bar)

    scale = max(1.0, abs(direct), abs(identity))
    if abs(direct - identity) > 1e-10 * scale:
        raise AssertionError(
            f"variance-gap routes disagree: direct={direct}, identity={identity}")
    return direct
