"""Design-based estimation and inference for incomplete block designs."""

from .design import (
    AdjustedProbTable,
    BibdStatus,
    DesignError,
    DesignSpec,
    IncidenceSummary,
    build_design,
    check_bibd,
    conditional_probs,
    incidence,
    load_design,
    reference_design_5_3,
    save_design,
    unreduced_catalog,
)
from .estimate import (
    EstimateReport,
    ObservedData,
    adjusted,
    from_arrays,
    hajek,
    ht,
    observe,
    observed_block_means,
)
from .population import (
    PotentialOutcomes,
    VarianceComponents,
    VarianceDifference,
    Weights,
    block_means,
    block_weights,
    estimand,
    ht_haj_gap,
    make_weights,
    pair_contrast,
    threshold_constant,
    true_cov_ht,
    true_var_adjusted,
    true_var_bibd,
    true_var_contrast_ht,
    unit_weights,
    variance_components,
    variance_difference,
)
from .randomize import (
    Assignment,
    AssignmentDistribution,
    EnumerationCapError,
    SubsetAssignment,
    assign_stage1,
    assign_stage2,
    count_assignments,
    draw_assignment,
    enumerate_assignments,
    validate_assignment,
)
from .variance import (
    BetweenSampleVariances,
    CovEstimate,
    IntervalReport,
    WithinCellVariances,
    adjusted_var,
    between_s2,
    confidence_interval,
    contrast_variance,
    cov_bb,
    cov_wb,
    within_block_s2,
)
from .harness import (
    MetricsReport,
    ScenarioConfig,
    generate_population,
    run_monte_carlo,
    scenario_design,
    se_ratio_sweep,
)
from .data import (
    AnalysisPlan,
    DatasetRow,
    SubsampleSpec,
    analyze_dataset,
    cbd_block_difference,
    load_rows,
    subsample_cbd,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
