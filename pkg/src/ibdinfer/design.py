"""Block/treatment structure of incomplete block designs.

A design assigns each of K blocks one subset of t treatments drawn from a
fixed catalog of subsets of {1..T}; subset omega is used in exactly
``reps[omega]`` blocks.  This module validates that structure, computes
incidence counts (how often treatments and treatment pairs share a block),
classifies balanced designs, and derives the conditional co-occurrence
probabilities needed by the block-adjusted estimator.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np


class DesignError(ValueError):
    """Raised when a design specification is structurally invalid."""


@dataclass(frozen=True)
class DesignSpec:
    """A validated incomplete block design.

    Treatments are labeled 1..n_treatments.  Catalog subsets are sorted
    tuples; multiplicity is carried by ``reps``, never by duplicates.
    """

    n_blocks: int
    n_treatments: int
    treatments_per_block: int
    catalog: tuple[tuple[int, ...], ...]
    reps: tuple[int, ...]
    block_sizes: tuple[int, ...]

    @property
    def n_units(self) -> int:
        return sum(self.block_sizes)

    def units_per_cell(self, block: int) -> int:
        """Units receiving each treatment in 1-indexed ``block``."""
        return self.block_sizes[block - 1] // self.treatments_per_block


@dataclass(frozen=True)
class IncidenceSummary:
    """Treatment and pair incidence counts with their block-level probabilities.

    ``treatment_counts[z-1]`` is the number of blocks containing treatment z;
    ``pair_counts[z-1, z'-1]`` the number containing both z and z' (diagonal:
    the treatment count itself).  ``marginal_probs`` and ``pair_probs`` divide
    by the number of blocks.
    """

    treatment_counts: np.ndarray
    pair_counts: np.ndarray
    marginal_probs: np.ndarray
    pair_probs: np.ndarray


@dataclass(frozen=True)
class BibdStatus:
    """Result of balanced-design classification."""

    is_bibd: bool
    common_treatment_count: int | None = None
    common_pair_count: int | None = None
    violation: str | None = None


@dataclass(frozen=True)
class AdjustedProbTable:
    """Conditional co-occurrence probabilities for one focal treatment.

    Conditioning event: the block received ``focal`` but not ``excluded``.
    ``subset_count`` is the number of distinct catalog subsets compatible with
    that event.  ``co_prob[z-1]`` is the probability that treatment z is also
    in the block; ``co_pair_prob[z-1, z'-1]`` that both z and z' are.  Entries
    for z in {focal, excluded} are 0.
    """

    focal: int
    excluded: int
    subset_count: int
    co_prob: np.ndarray
    co_pair_prob: np.ndarray


def build_design(n_blocks, n_treatments, treatments_per_block, catalog, reps,
                 block_sizes) -> DesignSpec:
    """Validate and normalize a design specification.

    Catalog subsets are normalized to sorted tuples.  Raises DesignError on
    any structural violation: wrong subset sizes, duplicate subsets, reps not
    summing to the block count, block sizes not divisible by the subset size,
    or a treatment that never appears.
    """
    K = int(n_blocks)
    T = int(n_treatments)
    t = int(treatments_per_block)
    if K < 1:
        raise DesignError(f"need at least one block, got {K}")
    if T < 3:
        raise DesignError(f"need at least 3 treatments, got {T}")
    if t < 2 or t >= T:
        raise DesignError(f"treatments per block must satisfy 2 <= t < T, got t={t}, T={T}")

    norm = []
    for omega in catalog:
        sub = tuple(sorted(int(z) for z in omega))
        if len(sub) != t or len(set(sub)) != t:
            raise DesignError(f"catalog subset {tuple(omega)} is not {t} distinct treatments")
        if sub[0] < 1 or sub[-1] > T:
            raise DesignError(f"catalog subset {sub} has treatments outside 1..{T}")
        norm.append(sub)
    if len(set(norm)) != len(norm):
        raise DesignError("duplicate catalog subsets; express multiplicity via reps")
    if not norm:
        raise DesignError("catalog is empty")

    reps = tuple(int(r) for r in reps)
    if len(reps) != len(norm):
        raise DesignError(f"{len(reps)} reps for {len(norm)} catalog subsets")
    if any(r < 1 for r in reps):
        raise DesignError("every catalog subset needs a positive rep count")
    if sum(reps) != K:
        raise DesignError(f"reps sum to {sum(reps)}, expected K={K}")

    sizes = tuple(int(n) for n in block_sizes)
    if len(sizes) != K:
        raise DesignError(f"{len(sizes)} block sizes for K={K} blocks")
    for k, n in enumerate(sizes, start=1):
        if n < t or n % t != 0:
            raise DesignError(f"block {k} has size {n}, not a positive multiple of t={t}")

    covered = set(itertools.chain.from_iterable(norm))
    missing = sorted(set(range(1, T + 1)) - covered)
    if missing:
        raise DesignError(f"treatments {missing} appear in no catalog subset")

    return DesignSpec(K, T, t, tuple(norm), reps, sizes)


def unreduced_catalog(n_treatments: int, treatments_per_block: int):
    """All C(T, t) treatment subsets, the catalog of an unreduced BIBD."""
    return tuple(itertools.combinations(range(1, n_treatments + 1), treatments_per_block))


def incidence(design: DesignSpec) -> IncidenceSummary:
    """Count blocks containing each treatment and each treatment pair."""
    T = design.n_treatments
    counts = np.zeros(T, dtype=np.int64)
    pairs = np.zeros((T, T), dtype=np.int64)
    for omega, r in zip(design.catalog, design.reps):
        idx = np.array(omega) - 1
        counts[idx] += r
        for a, b in itertools.combinations(idx, 2):
            pairs[a, b] += r
            pairs[b, a] += r
    np.fill_diagonal(pairs, counts)
    K = design.n_blocks
    return IncidenceSummary(counts, pairs, counts / K, pairs / K)


def check_bibd(design: DesignSpec) -> BibdStatus:
    """Classify a design as balanced or report the first violation found."""
    if len(set(design.reps)) > 1:
        return BibdStatus(False, violation=f"unequal subset reps {design.reps}")
    inc = incidence(design)
    L = inc.treatment_counts
    if len(set(L.tolist())) > 1:
        return BibdStatus(False, violation=f"unequal treatment counts {L.tolist()}")
    T = design.n_treatments
    off = inc.pair_counts[~np.eye(T, dtype=bool)]
    if len(set(off.tolist())) > 1:
        return BibdStatus(
            False, violation=f"unequal pair counts {sorted(set(off.tolist()))}")
    common_L = int(L[0])
    common_l = int(off[0])
    # TL = tK and l(T-1) = L(t-1) follow from the equalities above; assert anyway.
    assert T * common_L == design.treatments_per_block * design.n_blocks
    assert common_l * (T - 1) == common_L * (design.treatments_per_block - 1)
    return BibdStatus(True, common_L, common_l)


def conditional_probs(design: DesignSpec, focal: int, excluded: int) -> AdjustedProbTable:
    """Co-occurrence probabilities given the block has ``focal`` but not ``excluded``.

    Defined for balanced designs only (the adjusted estimator's setting).
    Probabilities are ratios of catalog-subset counts, so they are invariant
    to scaling every rep by a constant; ``subset_count`` counts distinct
    catalog subsets (equals L - l when each subset is used once).
    """
    if focal == excluded:
        raise DesignError("focal and excluded treatments must differ")
    status = check_bibd(design)
    if not status.is_bibd:
        raise DesignError(f"conditional probabilities need a BIBD: {status.violation}")
    T = design.n_treatments
    for z in (focal, excluded):
        if not 1 <= z <= T:
            raise DesignError(f"treatment {z} outside 1..{T}")

    eligible = [set(w) for w in design.catalog if focal in w and excluded not in w]
    count = len(eligible)
    co = np.zeros(T)
    co_pair = np.zeros((T, T))
    others = [z for z in range(1, T + 1) if z not in (focal, excluded)]
    for z in others:
        co[z - 1] = sum(z in w for w in eligible) / count
        for z2 in others:
            if z2 != z:
                co_pair[z - 1, z2 - 1] = sum(z in w and z2 in w for w in eligible) / count
    return AdjustedProbTable(focal, excluded, count, co, co_pair)


# Columns of the published (T,t,L,l) = (5,3,6,3) reference BIBD catalog.
REFERENCE_BIBD_5_3 = (
    (1, 2, 3), (1, 3, 4), (3, 4, 5), (2, 3, 5), (1, 2, 4),
    (2, 3, 4), (1, 3, 5), (1, 2, 5), (2, 4, 5), (1, 4, 5),
)


def reference_design_5_3(rep: int = 1, block_size: int = 15) -> DesignSpec:
    """The 10-column (5,3,6,3) reference BIBD, scaled by ``rep``."""
    catalog = REFERENCE_BIBD_5_3
    K = 10 * rep
    return build_design(K, 5, 3, catalog, (rep,) * len(catalog), (block_size,) * K)


def to_dict(design: DesignSpec) -> dict:
    return {
        "K": design.n_blocks,
        "T": design.n_treatments,
        "t": design.treatments_per_block,
        "catalog": [list(w) for w in design.catalog],
        "reps": list(design.reps),
        "block_sizes": list(design.block_sizes),
    }


def from_dict(payload: dict) -> DesignSpec:
    try:
        return build_design(payload["K"], payload["T"], payload["t"],
                            payload["catalog"], payload["reps"],
                            payload["block_sizes"])
    except KeyError as exc:
        raise DesignError(f"design file missing field {exc}") from exc


def save_design(design: DesignSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(design), fh, indent=2)
        fh.write("\n")


def load_design(path) -> DesignSpec:
    with open(path) as fh:
        return from_dict(json.load(fh))
