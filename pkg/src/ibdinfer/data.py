"""CSV ingestion and the complete-block -> incomplete-block subsampling pipeline.

A complete-block dataset (every block holding all treatments) is converted
into a balanced two-treatments-per-block design by assigning each block a
treatment pair, keeping an equal number of rows per kept treatment (the cell
minimum; excess rows dropped at random), and re-deriving the design from
what survives.  Blocks that already hold exactly one of the candidate pairs
keep it.  Repeating with fresh seeds and averaging gives stable estimates
from one dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .design import DesignSpec, build_design
from .estimate import ObservedData, adjusted, from_arrays, hajek, ht
from .population import PotentialOutcomes, make_weights, pair_contrast
from .variance import adjusted_var, contrast_variance, cov_bb, cov_wb


@dataclass(frozen=True)
class DatasetRow:
    unit_id: str
    block: str
    treatment: int
    outcome: float


def load_rows(path, treatment_map: dict | None = None) -> list[DatasetRow]:
    """Read ``unit_id,block,treatment,outcome`` rows.

    ``treatment_map`` maps raw treatment labels to integers 1..T; without it
    the labels must already be integers.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"unit_id", "block", "treatment", "outcome"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"CSV must have columns {sorted(required)}")
        for rec in reader:
            label = rec["treatment"]
            if treatment_map is not None:
                if label not in treatment_map:
                    raise ValueError(f"unknown treatment label {label!r}")
                z = int(treatment_map[label])
            else:
                z = int(label)
            rows.append(DatasetRow(rec["unit_id"], rec["block"], z, float(rec["outcome"])))
    if not rows:
        raise ValueError(f"no data rows in {path}")
    return rows


def _group_cells(rows):
    """block label -> treatment -> list of row indices."""
    cells: dict[str, dict[int, list[int]]] = {}
    for i, row in enumerate(rows):
        cells.setdefault(row.block, {}).setdefault(row.treatment, []).append(i)
    return cells


@dataclass(frozen=True)
class SubsampleSpec:
    """How to carve an incomplete design out of a complete-block dataset.

    ``pair_counts`` maps each candidate treatment pair to its target number
    of blocks (including blocks pre-fixed to that pair because they hold
    nothing else); counts must sum to the number of analyzed blocks.  With
    ``equal_allocation`` the targets are an even split instead.  Blocks
    where every candidate treatment has fewer than ``min_cell`` rows are
    excluded; ``target_blocks`` optionally thins the eligible blocks to a
    fixed number at random.
    """

    pairs: tuple[tuple[int, int], ...]
    pair_counts: dict | None = None
    equal_allocation: bool = True
    min_cell: int = 1
    target_blocks: int | None = None

    def __post_init__(self):
        norm = tuple(tuple(sorted(p)) for p in self.pairs)
        object.__setattr__(self, "pairs", norm)
        if len(set(norm)) != len(norm):
            raise ValueError("duplicate treatment pairs")
        if self.pair_counts is None and not self.equal_allocation:
            raise ValueError("either give pair_counts or request equal allocation")
        if self.pair_counts is not None:
            counts = {tuple(sorted(p)): int(c) for p, c in self.pair_counts.items()}
            if set(counts) != set(norm):
                raise ValueError("pair_counts keys must match pairs")
            object.__setattr__(self, "pair_counts", counts)


def subsample_cbd(rows, spec: SubsampleSpec, seed) -> tuple[DesignSpec, ObservedData]:
    """One random reduction of a complete-block dataset to a balanced design.

    Returns the induced design (catalog = the realized pairs, reps = realized
    pair counts, block sizes = kept rows) and the balanced observations.
    """
    rng = np.random.default_rng(seed)
    cells = _group_cells(rows)
    treatments = sorted({row.treatment for row in rows})
    n_treatments = max(treatments)
    if treatments != list(range(1, n_treatments + 1)):
        raise ValueError(f"treatments must be labeled 1..T, got {treatments}")

    candidate = set()
    for pair in spec.pairs:
        candidate.update(pair)

    fixed: dict[str, tuple[int, int]] = {}
    free: list[str] = []
    for label in sorted(cells):
        present = {z for z, idx in cells[label].items()
                   if len(idx) >= spec.min_cell and z in candidate}
        if present == candidate:
            free.append(label)
        else:
            matching = [p for p in spec.pairs if set(p) == present]
            if matching:
                fixed[label] = matching[0]
            # blocks supporting neither everything nor exactly one pair are excluded

    eligible = sorted(fixed) + free
    if spec.target_blocks is not None:
        if len(eligible) < spec.target_blocks:
            raise ValueError(
                f"only {len(eligible)} eligible blocks for target {spec.target_blocks}")
        drop = len(eligible) - spec.target_blocks
        if drop:
            dropped = set(rng.choice(len(eligible), size=drop, replace=False))
            keep = [b for i, b in enumerate(eligible) if i not in dropped]
            fixed = {b: p for b, p in fixed.items() if b in keep}
            free = [b for b in free if b in keep]
            eligible = keep

    n_total = len(eligible)
    if spec.pair_counts is not None:
        targets = dict(spec.pair_counts)
        if sum(targets.values()) != n_total:
            raise ValueError(
                f"pair counts sum to {sum(targets.values())} but {n_total} blocks are analyzed")
    else:
        if n_total % len(spec.pairs) != 0:
            raise ValueError(
                f"{n_total} blocks cannot be split evenly across {len(spec.pairs)} pairs")
        targets = {p: n_total // len(spec.pairs) for p in spec.pairs}

    remaining = dict(targets)
    for label, pair in fixed.items():
        remaining[pair] -= 1
        if remaining[pair] < 0:
            raise ValueError(f"more blocks pre-fixed to {pair} than its target count")
    pool = [p for p in spec.pairs for _ in range(remaining[p])]
    if len(pool) != len(free):
        raise ValueError(f"{len(free)} free blocks for {len(pool)} remaining slots")
    order = rng.permutation(len(pool))
    allocation = dict(fixed)
    for label, idx in zip(free, order):
        allocation[label] = pool[idx]

    kept_blocks = sorted(allocation)
    block_ids, treatments_out, outcomes_out, unit_out = [], [], [], []
    sizes = []
    for new_k, label in enumerate(kept_blocks, start=1):
        pair = allocation[label]
        for z in pair:
            idx = cells[label].get(z, [])
            if len(idx) < 1:
                raise ValueError(f"block {label!r} cannot support pair {pair}: no rows for {z}")
        keep_count = min(len(cells[label][z]) for z in pair)
        for z in pair:
            idx = np.array(cells[label][z])
            chosen = idx if len(idx) == keep_count else \
                np.sort(rng.choice(idx, size=keep_count, replace=False))
            for i in chosen:
                block_ids.append(new_k)
                treatments_out.append(z)
                outcomes_out.append(rows[i].outcome)
                unit_out.append(rows[i].unit_id)
        sizes.append(2 * keep_count)

    catalog = sorted(set(allocation.values()))
    reps = [sum(1 for p in allocation.values() if p == c) for c in catalog]
    design = build_design(len(kept_blocks), n_treatments, 2, catalog, reps, sizes)
    obs = from_arrays(design, block_ids, treatments_out, outcomes_out, unit_out)
    return design, obs


def cbd_block_difference(rows, z1: int, z2: int) -> float:
    """Equal-weight block average of observed mean differences z1 - z2.

    Uses every row of every block holding both treatments; no subsampling.
    """
    cells = _group_cells(rows)
    diffs = []
    for label in sorted(cells):
        have = cells[label]
        if z1 in have and z2 in have:
            m1 = np.mean([rows[i].outcome for i in have[z1]])
            m2 = np.mean([rows[i].outcome for i in have[z2]])
            diffs.append(m1 - m2)
    if not diffs:
        raise ValueError(f"no block holds both treatments {z1} and {z2}")
    return float(np.mean(diffs))


@dataclass(frozen=True)
class AnalysisPlan:
    """Repeated-subsampling analysis: estimators x weights x variance flavors."""

    spec: SubsampleSpec
    pair: tuple[int, int] = (1, 2)
    estimators: tuple[str, ...] = ("HT", "Hajek", "Adjusted")
    weight_kinds: tuple[str, ...] = ("block", "unit")
    variance_flavors: tuple[str, ...] = ("bb", "wb")
    repetitions: int = 500
    seed: int = 0
    level: float = 0.95


@dataclass
class AnalysisCell:
    estimator: str
    weight_kind: str
    point: float | None = None
    sigma: dict = field(default_factory=dict)   # flavor -> mean SE or None
    unavailable: str | None = None


def analyze_dataset(rows, plan: AnalysisPlan) -> list[AnalysisCell]:
    """Average estimates over repeated random subsamples of one dataset.

    Emits one cell per (estimator, weight kind) with the averaged point
    estimate and averaged standard-error estimates per variance flavor;
    combinations ruled out by their guards carry a reason instead.
    """
    z1, z2 = plan.pair
    acc: dict[tuple[str, str], dict] = {}
    for name in plan.estimators:
        for wk in plan.weight_kinds:
            acc[(name, wk)] = {"points": [], "sigma": {f: [] for f in plan.variance_flavors},
                               "blocked": None}

    for rep in range(plan.repetitions):
        design, obs = subsample_cbd(
            rows, plan.spec, np.random.SeedSequence([plan.seed, rep]))
        g = pair_contrast(z1, z2, design.n_treatments)
        for (name, wk), slot in acc.items():
            if slot["blocked"]:
                continue
            try:
                if name == "Adjusted":
                    if wk != "block":
                        raise ValueError("adjusted estimator is defined for block weights only")
                    report = adjusted(obs, z1, z2)
                else:
                    w = make_weights(wk, design)
                    report = ht(obs, w, g) if name == "HT" else hajek(obs, w, g)
            except ValueError as exc:
                slot["blocked"] = str(exc)
                continue
            slot["points"].append(report.point)
            for flavor in plan.variance_flavors:
                if slot["sigma"][flavor] is None:
                    continue
                try:
                    if name == "Adjusted":
                        v = adjusted_var(obs, z1, z2, flavor)
                    else:
                        w = make_weights(wk, design)
                        cov = cov_bb(obs, w, name) if flavor == "bb" else cov_wb(obs, w, name)
                        v = contrast_variance(cov, g)
                except ValueError:
                    slot["sigma"][flavor] = None
                    continue
                slot["sigma"][flavor].append(np.sqrt(max(v, 0.0)))

    cells = []
    for (name, wk), slot in acc.items():
        cell = AnalysisCell(name, wk)
        if slot["blocked"]:
            cell.unavailable = slot["blocked"]
        else:
            cell.point = float(np.mean(slot["points"]))
            for flavor in plan.variance_flavors:
                vals = slot["sigma"][flavor]
                cell.sigma[flavor] = None if vals is None else float(np.mean(vals))
        cells.append(cell)
    return cells


def load_potential_outcomes_csv(path, design: DesignSpec) -> PotentialOutcomes:
    """Read a ``unit_id,block,y1..yT`` table into a PotentialOutcomes matrix."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [f"y{z}" for z in range(1, design.n_treatments + 1)]
        required = {"block", *cols}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"potential-outcome CSV must have columns {sorted(required)}")
        blocks, outcomes = [], []
        for rec in reader:
            blocks.append(int(rec["block"]))
            outcomes.append([float(rec[c]) for c in cols])
    order = np.argsort(np.asarray(blocks), kind="stable")
    po = PotentialOutcomes(np.asarray(outcomes)[order], np.asarray(blocks)[order])
    po.check_design(design)
    return po
