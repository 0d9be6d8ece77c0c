"""fairprune: train, magnitude-prune, and audit small dense classifiers for
per-group disparate impact, with Lagrangian-dual mitigation."""

from .data import (
    ColumnSchema,
    DataError,
    Dataset,
    SynthSpec,
    load_csv,
    save_csv,
    split,
    synth_gaussian_groups,
    upsample_group,
)
from .diffengine import (
    GradVector,
    HvpOperator,
    dense_hessian,
    gradient,
    hvp,
    output_hessian_per_class,
    output_jacobian,
)
from .fairaudit import (
    AuditOptions,
    AuditResult,
    FairnessViolation,
    GroupAuditReport,
    TaylorBoundReport,
    audit,
    boundary_term,
    corollary1_check,
    excessive_loss,
    fairness_violation,
    grad_norm_bound_rhs,
    group_grad_norm,
    group_hessian_max_eig,
    hessian_bound_rhs,
    taylor_bound,
)
from .harness import (
    ExperimentConfig,
    SweepReport,
    emit,
    run_sweep,
    run_upsample_ablation,
)
from .mitigator import (
    REGIMES,
    MitigationOptions,
    MitigationState,
    fair_train,
    monitor_eq5_constraints,
    regime,
)
from .netcore import (
    DivergenceError,
    ModelSpec,
    ParamVector,
    TrainConfig,
    TrainResult,
    accuracy,
    empirical_risk,
    group_risk,
    init_model,
    load_params,
    predict_soft,
    save_params,
    train,
)
from .pruner import PruneMask, magnitude_prune, nested, prune_delta_norm

__version__ = "0.1.0"
