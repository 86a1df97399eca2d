"""
Where is it still possible to stop?
===================================

A car approaches a hazard on a single lane.  The state is the bumper gap,
the car's speed and the hazard's speed; each step the car may brake,
coast or accelerate.  Value iteration over this grid gives the optimal
feasible value: the worst future constraint value under the best
braking policy.  Its zero level set is the largest feasible region.
"""
from pathlib import Path

import numpy as np

from frealab import plots
from frealab.feasibility import LongitudinalInstance, infeasible_counts_by_speed, q_from_next, one_step_q

out = Path("runs/demos")
out.mkdir(parents=True, exist_ok=True)

# %%
# Solve the discounted backup.  A handful of sweeps is enough because
# the violation value is absorbing.
inst = LongitudinalInstance()
grid = inst.solve(gamma=0.98)
print(f"{grid.values.size} cells, converged after {len(grid.residuals)} sweeps")

# %%
# The region shrinks as the car gets faster: more gaps become too short
# to stop in.
counts = infeasible_counts_by_speed(grid)
for v, c in zip(grid.axes[1].nodes[::4], counts[::4]):
    print(f"  AV speed {v:4.1f} m/s: {c:5d} infeasible cells")

# %%
# The feasibility Q-value of every action can be read off the current and
# next state alone.  On the undiscounted fixed point this matches a
# one-step backup exactly.
reach = inst.solve_reachability()
q, v_next, h_next, exact = one_step_q(reach, inst.h, inst.dynamics)
h = inst.h(reach.points())[:, None]
gap = np.abs(q - q_from_next(h, h_next, reach.values.ravel()[:, None], v_next))
print(f"largest mismatch on exact successors: {gap[exact].max():.1e}")

# %%
# Boundary of the region for a few car speeds.
plots.level_sets(out / "level_sets.svg", grid, [2.0, 6.0, 10.0])
print(f"wrote {out / 'level_sets.svg'}")
