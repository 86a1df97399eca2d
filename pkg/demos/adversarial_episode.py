"""
One intersection episode, two kinds of critical vehicle
=======================================================

The AV follows its route through a four-way junction.  Nearby background
vehicles get promoted to "critical" vehicles and handed to a controller.
Here we compare rule-following critical vehicles with a scripted attacker
that drives straight at a goal point just ahead of the AV, then score
both episodes with the surrogate safety metrics.
"""
from frealab import metrics
from frealab.scenario import AggressiveCbvPolicy, EpisodeConfig, RuleCbvPolicy, run_episode
from frealab.world import get_layout

cfg = EpisodeConfig()
layout = get_layout(cfg.layout)

# %%
for name, controller in [("rule-based", RuleCbvPolicy()), ("attacker", AggressiveCbvPolicy())]:
    res = run_episode(cfg, controller, seed=3)
    rep = metrics.evaluate_episode(res.records, layout.lanes[res.av_lane], cfg.dt, res.seed, name)
    promoted = sum(e["type"] == "promote" for e in res.events)
    print(f"{name:>10}: ended by {res.reason} after {res.steps} steps, {promoted} promotions")
    print(f"{'':>10}  near misses {rep.near_misses}, PET samples {len(rep.pet)}, "
          f"route completion {rep.completion:.0%}")
    for s in rep.severities:
        print(f"{'':>10}  collision at {s['relative_speed']:.1f} m/s, impulse proxy {s['impulse_proxy']:.0f}")

# %%
# Withdrawals explain why a critical vehicle stopped attacking.
res = run_episode(cfg, AggressiveCbvPolicy(), seed=3)
for e in res.events:
    if e["type"] == "withdraw":
        print(f"t={e['t']:5.1f}s vehicle {e['id']} withdrawn: {e['case']}")
