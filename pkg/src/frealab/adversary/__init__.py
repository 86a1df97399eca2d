from .policy import ACTION_BOUNDS, PolicyNet, ValueNet, squash, to_action
from .ppo import (
    MODES,
    ConfigError,
    Learner,
    ModeSpec,
    RolloutBuffer,
    SealedBatch,
    TelemetryWriter,
    TrainConfig,
    UpdateStats,
    compute_advantages,
    fppo_rs_reward,
    gae,
    gae_linked,
    hybrid_advantage,
    ppo_clip_term,
    select_mode,
    update_policy,
)
