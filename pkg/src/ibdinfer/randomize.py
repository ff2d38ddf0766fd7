"""Two-stage randomization for incomplete block designs.

Stage 1 assigns catalog subsets to blocks by a completely randomized draw
over the multiset permutations of the catalog (subset omega appearing
reps[omega] times).  Stage 2 independently assigns treatments to units
within each block, n_k/t units per treatment.  Exhaustive enumeration of
the full assignment distribution is provided as an exact verification
oracle for the closed-form moments elsewhere in the package.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from .design import DesignSpec


class EnumerationCapError(RuntimeError):
    """Raised when a design's assignment space exceeds the enumeration cap."""

    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} assignments exceed the enumeration cap {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class SubsetAssignment:
    """Stage-1 outcome: the treatment subset received by each block (in block order)."""

    subsets: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class Assignment:
    """A complete assignment: per-block subsets plus per-unit treatments.

    Units are ordered by block: block k (1-indexed) owns the contiguous
    slice of length block_sizes[k-1] starting at sum of earlier sizes.
    """

    subsets: SubsetAssignment
    unit_treatments: np.ndarray


def block_labels(design: DesignSpec) -> np.ndarray:
    """Per-unit block label (1..K), units ordered by block."""
    return np.repeat(np.arange(1, design.n_blocks + 1), design.block_sizes)


def block_slices(design: DesignSpec) -> list[slice]:
    offsets = np.concatenate([[0], np.cumsum(design.block_sizes)])
    return [slice(int(offsets[k]), int(offsets[k + 1])) for k in range(design.n_blocks)]


def count_assignments(design: DesignSpec) -> int:
    """Exact number of legal assignments (big-integer arithmetic)."""
    stage1 = math.factorial(design.n_blocks)
    for r in design.reps:
        stage1 //= math.factorial(r)
    stage2 = 1
    t = design.treatments_per_block
    for n in design.block_sizes:
        stage2 *= math.factorial(n) // math.factorial(n // t) ** t
    return stage1 * stage2


def assignment_probability(design: DesignSpec) -> Fraction:
    """Probability of any single legal assignment under the two-stage mechanism."""
    return Fraction(1, count_assignments(design))


def validate_subsets(design: DesignSpec, subsets: SubsetAssignment) -> None:
    if len(subsets.subsets) != design.n_blocks:
        raise ValueError("one subset per block required")
    for omega, r in zip(design.catalog, design.reps):
        got = sum(s == omega for s in subsets.subsets)
        if got != r:
            raise ValueError(f"subset {omega} assigned to {got} blocks, expected {r}")


def validate_assignment(design: DesignSpec, assignment: Assignment) -> None:
    """Hard check of the assignment invariants (exact cell counts per block)."""
    validate_subsets(design, assignment.subsets)
    z = np.asarray(assignment.unit_treatments)
    if z.shape != (design.n_units,):
        raise ValueError(f"expected {design.n_units} unit treatments, got {z.shape}")
    for k, sl in enumerate(block_slices(design)):
        omega = assignment.subsets.subsets[k]
        m = design.units_per_cell(k + 1)
        vals, counts = np.unique(z[sl], return_counts=True)
        if set(vals.tolist()) != set(omega) or not np.all(counts == m):
            raise ValueError(f"block {k + 1} does not have {m} units per treatment of {omega}")


def assign_stage1(design: DesignSpec, seed) -> SubsetAssignment:
    """Uniform draw of the block -> subset map; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    expanded = [i for i, r in enumerate(design.reps) for _ in range(r)]
    order = np.array(expanded)
    rng.shuffle(order)
    return SubsetAssignment(tuple(design.catalog[i] for i in order))


def assign_stage2(design: DesignSpec, subsets: SubsetAssignment, seed) -> Assignment:
    """Complete randomization within each block; deterministic given the seed."""
    validate_subsets(design, subsets)
    rng = np.random.default_rng(seed)
    z = np.empty(design.n_units, dtype=np.int64)
    for k, sl in enumerate(block_slices(design)):
        m = design.units_per_cell(k + 1)
        cell = np.repeat(np.array(subsets.subsets[k], dtype=np.int64), m)
        rng.shuffle(cell)
        z[sl] = cell
    return Assignment(subsets, z)


def draw_assignment(design: DesignSpec, seed) -> Assignment:
    """Run both stages from a single seed."""
    rng = np.random.default_rng(seed)
    return assign_stage2(design, assign_stage1(design, rng), rng)


def _multiset_permutations(pool) -> Iterator[tuple]:
    """Distinct permutations of ``pool`` in lexicographic order."""
    items = sorted(set(pool))
    counts = {v: 0 for v in items}
    for v in pool:
        counts[v] += 1
    n = len(pool)
    buf = [None] * n

    def rec(depth):
        if depth == n:
            yield tuple(buf)
            return
        for v in items:
            if counts[v]:
                counts[v] -= 1
                buf[depth] = v
                yield from rec(depth + 1)
                counts[v] += 1

    yield from rec(0)


@dataclass
class AssignmentDistribution:
    """The full randomization distribution, enumerated lazily.

    Iterating yields ``(Assignment, probability)`` pairs; every legal
    assignment appears exactly once and all share ``probability``
    (= 1 / total_count under the two-stage mechanism).
    """

    design: DesignSpec
    total_count: int
    exact_probability: Fraction

    @property
    def probability(self) -> float:
        return float(self.exact_probability)

    def __iter__(self) -> Iterator[tuple[Assignment, float]]:
        design = self.design
        prob = self.probability
        expanded = [i for i, r in enumerate(design.reps) for _ in range(r)]

        # Arrangements depend on (subset, units-per-cell); cache per pair.
        arrangement_cache: dict[tuple[int, int], list[np.ndarray]] = {}

        def block_arrangements(subset_index: int, block: int) -> list[np.ndarray]:
            m = design.units_per_cell(block)
            key = (subset_index, m)
            if key not in arrangement_cache:
                pool = [z for z in design.catalog[subset_index] for _ in range(m)]
                arrangement_cache[key] = [np.array(p, dtype=np.int64)
                                          for p in _multiset_permutations(pool)]
            return arrangement_cache[key]

        slices = block_slices(design)
        for stage1 in _multiset_permutations(expanded):
            subsets = SubsetAssignment(tuple(design.catalog[i] for i in stage1))
            options = [block_arrangements(i, k + 1) for k, i in enumerate(stage1)]
            for combo in itertools.product(*options):
                z = np.empty(design.n_units, dtype=np.int64)
                for sl, arr in zip(slices, combo):
                    z[sl] = arr
                yield Assignment(subsets, z), prob


def enumerate_assignments(design: DesignSpec, cap: int = 10_000_000) -> AssignmentDistribution:
    """Exhaustive assignment distribution, refusing instances above ``cap``."""
    count = count_assignments(design)
    if count > cap:
        raise EnumerationCapError(count, cap)
    return AssignmentDistribution(design, count, Fraction(1, count))
