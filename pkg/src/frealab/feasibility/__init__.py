from .advantage import feasibility_advantage
from .dataset import (
    DatasetWriter,
    TransitionRecord,
    format_report,
    read_dataset,
    to_offline_data,
    validate_dataset,
    write_dataset,
)
from .grid import (
    Axis,
    ConvergenceError,
    FeasibleValueGrid,
    LongitudinalInstance,
    grid_value_iteration,
    infeasible_counts_by_speed,
    q_from_next,
    lfr_membership,
    one_step_q,
    reachability_value_iteration,
)
from .offline import (
    ConstantFeasibility,
    FeasibilityNets,
    OfflineData,
    OfflineTrainer,
    expectile_loss,
    grid_dataset,
    qh_target,
    train_offline,
)
