from .cbv import (
    CbvInfo,
    CbvRegistry,
    Reject,
    Withdraw,
    adversarial_reward,
    assign_goal,
    cbv_eligible,
    cbv_maintain,
    cbv_withdraw_check,
)
from .episode import (
    SOURCES,
    AggressiveCbvPolicy,
    EpisodeConfig,
    EpisodeResult,
    EpisodeRunner,
    LearnedCbvPolicy,
    RandomCbvPolicy,
    RuleCbvPolicy,
    av_pseudo_state,
    collect_offline,
    run_episode,
)
