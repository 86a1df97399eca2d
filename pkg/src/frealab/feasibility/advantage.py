"""Feasibility advantage computed from current and next states."""
from __future__ import annotations

import numpy as np


def feasibility_advantage(h_s, h_next, v_s, v_next):
    """Q*_h - V*_h with Q*_h taken from the state pair.

    If the constraint does not improve (h' >= h) the optimal Q equals V(s');
    otherwise it is max(h(s), V(s')).
    """
    h_s, h_next, v_s, v_next = (np.asarray(x, dtype=float) for x in (h_s, h_next, v_s, v_next))
    q = np.where(h_next >= h_s, v_next, np.maximum(h_s, v_next))
    out = q - v_s
    return float(out) if out.ndim == 0 else out
