"""Point estimation from observed incomplete-block data.

Only observed rows (block, treatment, outcome) enter these estimators.  The
inverse-probability estimator divides each block's contribution by the
design probability that its treatment subset contains the treatment; the
ratio estimator normalizes by the estimated total weight of contributing
blocks; the adjusted estimator removes block effects by subtracting each
block's mean observed outcome before averaging (balanced designs only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import DesignSpec, check_bibd, incidence
from .population import PotentialOutcomes, Weights, as_contrast
from .randomize import Assignment, block_labels


@dataclass(frozen=True)
class ObservedData:
    """Validated observations attached to their design.

    ``realized_subsets[k-1]`` is the treatment subset block k actually
    received, always a member of the design catalog with overall
    multiplicities matching the design reps.  In strict mode every block has
    exactly n_k/t rows per received treatment; ``unbalanced`` marks data
    accepted in lenient mode where realized cell counts may differ.
    """

    design: DesignSpec
    unit_id: np.ndarray
    block: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    realized_subsets: tuple[tuple[int, ...], ...]
    unbalanced: bool = False


def observe(design: DesignSpec, po: PotentialOutcomes, assignment: Assignment) -> ObservedData:
    """Reveal observed outcomes for one assignment of a fixed population."""
    po.check_design(design)
    z = assignment.unit_treatments
    y = po.outcomes[np.arange(po.n_units), z - 1]
    return ObservedData(design, np.arange(po.n_units), block_labels(design), z, y,
                        assignment.subsets.subsets)


def from_arrays(design: DesignSpec, block, treatment, outcome,
                unit_id=None, strict: bool = True) -> ObservedData:
    """Build ObservedData from raw columns, validating against the design.

    ``strict=False`` (lenient mode) accepts unbalanced within-block counts,
    for raw multi-site data that has not been subsampled to balance; subset
    membership and multiplicity checks still apply.
    """
    block = np.asarray(block, dtype=np.int64)
    treatment = np.asarray(treatment, dtype=np.int64)
    outcome = np.asarray(outcome, dtype=float)
    if unit_id is None:
        unit_id = np.arange(block.shape[0])
    unit_id = np.asarray(unit_id)
    if not (block.shape == treatment.shape == outcome.shape == unit_id.shape):
        raise ValueError("observation columns must have equal length")

    K = design.n_blocks
    t = design.treatments_per_block
    subsets = []
    unbalanced = False
    for k in range(1, K + 1):
        mask = block == k
        if not np.any(mask):
            raise ValueError(f"block {k} has no observations")
        zs, counts = np.unique(treatment[mask], return_counts=True)
        subset = tuple(int(z) for z in zs)
        if subset not in design.catalog:
            raise ValueError(f"block {k} received {subset}, not a catalog subset")
        if strict:
            m = design.units_per_cell(k)
            if int(mask.sum()) != design.block_sizes[k - 1] or not np.all(counts == m):
                raise ValueError(
                    f"block {k} must have exactly {m} rows per treatment of {subset}")
        elif not np.all(counts == design.units_per_cell(k)):
            unbalanced = True
        subsets.append(subset)

    for omega, r in zip(design.catalog, design.reps):
        got = sum(s == omega for s in subsets)
        if got != r:
            raise ValueError(f"subset {omega} realized in {got} blocks, design says {r}")

    return ObservedData(design, unit_id, block, treatment, outcome,
                        tuple(subsets), unbalanced)


def membership(obs: ObservedData) -> np.ndarray:
    """K x T boolean: does block k's realized subset contain treatment z."""
    K, T = obs.design.n_blocks, obs.design.n_treatments
    member = np.zeros((K, T), dtype=bool)
    for k, subset in enumerate(obs.realized_subsets):
        member[k, np.array(subset) - 1] = True
    return member


def cell_counts(obs: ObservedData) -> np.ndarray:
    """K x T realized observation counts per (block, treatment) cell."""
    K, T = obs.design.n_blocks, obs.design.n_treatments
    counts = np.zeros((K, T), dtype=np.int64)
    np.add.at(counts, (obs.block - 1, obs.treatment - 1), 1)
    return counts


def observed_block_means(obs: ObservedData) -> np.ndarray:
    """K x T observed cell means; NaN where the block did not receive z."""
    K, T = obs.design.n_blocks, obs.design.n_treatments
    sums = np.zeros((K, T))
    np.add.at(sums, (obs.block - 1, obs.treatment - 1), obs.outcome)
    counts = cell_counts(obs)
    means = np.full((K, T), np.nan)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means


@dataclass(frozen=True)
class EstimateReport:
    """A point estimate with the per-treatment means behind it."""

    estimator: str
    point: float
    treatment_means: np.ndarray
    normalizers: np.ndarray | None = None
    weights_kind: str | None = None
    contrast: np.ndarray | None = None
    pair: tuple[int, int] | None = None
    unbalanced: bool = False
    notes: dict = field(default_factory=dict)


def ht(obs: ObservedData, w: Weights, g) -> EstimateReport:
    """Inverse-probability weighted contrast estimate."""
    design = obs.design
    g = as_contrast(g, design.n_treatments)
    if w.values.shape != (design.n_blocks,):
        raise ValueError("one weight per block required")
    p = incidence(design).marginal_probs
    member = membership(obs)
    bm = np.where(member, observed_block_means(obs), 0.0)
    means = (w.values[:, None] * member * bm).sum(axis=0) / p
    point = float(g @ means)
    return EstimateReport("HT", point, means, weights_kind=w.kind, contrast=g,
                          unbalanced=obs.unbalanced)


def hajek(obs: ObservedData, w: Weights, g) -> EstimateReport:
    """Ratio (self-normalized) contrast estimate; location invariant."""
    design = obs.design
    g = as_contrast(g, design.n_treatments)
    if w.values.shape != (design.n_blocks,):
        raise ValueError("one weight per block required")
    p = incidence(design).marginal_probs
    member = membership(obs)
    bm = np.where(member, observed_block_means(obs), 0.0)
    wz = (w.values[:, None] * member).sum(axis=0)
    needed = g != 0
    if np.any(wz[needed] <= 0):
        bad = [z + 1 for z in np.nonzero(needed & (wz <= 0))[0]]
        raise ValueError(f"zero total weight for treatments {bad}; ratio undefined")
    means = np.full(design.n_treatments, np.nan)
    np.divide((w.values[:, None] * member * bm).sum(axis=0), wz, out=means, where=wz > 0)
    normalizers = wz / p
    point = float(g[needed] @ means[needed])
    return EstimateReport("Hajek", point, means, normalizers=normalizers,
                          weights_kind=w.kind, contrast=g, unbalanced=obs.unbalanced)


def adjusted(obs: ObservedData, z1: int, z2: int) -> EstimateReport:
    """Block-effect-adjusted pairwise estimate (BIBD, equal block weights).

    Subtracts each block's mean observed cell outcome before summing, then
    rescales by t/(lT) so the expectation over the randomization is the
    block-level pairwise difference.
    """
    design = obs.design
    status = check_bibd(design)
    if not status.is_bibd:
        raise ValueError(f"adjusted estimator is defined for BIBDs only: {status.violation}")
    if z1 == z2:
        raise ValueError("treatments under comparison must differ")
    T = design.n_treatments
    t = design.treatments_per_block
    member = membership(obs)
    bm = np.where(member, observed_block_means(obs), 0.0)
    block_avg = bm.sum(axis=1) / t
    adj = member * (bm - block_avg[:, None])
    totals = adj.sum(axis=0)
    point = float(t * (totals[z1 - 1] - totals[z2 - 1]) / (status.common_pair_count * T))
    means = np.full(T, np.nan)
    means[[z1 - 1, z2 - 1]] = totals[[z1 - 1, z2 - 1]]
    return EstimateReport("Adjusted", point, means, pair=(z1, z2),
                          weights_kind="block_level", unbalanced=obs.unbalanced)
