"""Hot loop of forward-path planning.

The same Python source is compiled with numba when available. Setting
``LEMIX_DISABLE_NUMBA=1`` selects the interpreted version, which is what the
benchmark compares against.
"""

import os

import numpy as np


def _plan_forward(start0, fwd, prev_end, has_prev, bstart, bend, bdur, head0):
    """Place one forward pass stage by stage around pending backwards.

    ``bstart/bend/bdur`` are ``(K, S)`` backward intervals in queue order.
    Rows before ``head0`` are backwards that already finished: they never
    delay the forward but still count as busy time inside its gap. Returns
    ``(start_f, end_f, ii, retire)`` where ``retire[k]`` flags training
    tasks whose first-stage backward finishes before the new forward starts.
    """
    n_stages = fwd.shape[0]
    n_train = bstart.shape[0]
    start_f = np.empty(n_stages)
    end_f = np.empty(n_stages)
    retire = np.zeros(n_train, dtype=np.bool_)
    ii = 0.0
    head = head0
    stage_ready = start0
    for s in range(n_stages):
        pe = prev_end[s] if has_prev else stage_ready
        st = max(stage_ready, pe)
        en = st + fwd[s]
        offset = 0.0
        # backwards of tasks consumed on an earlier stage may still sit in
        # this stage's gap (the reverse pipeline runs them before stage 1)
        for k in range(head):
            if bstart[k, s] >= pe and bend[k, s] <= st:
                offset += bdur[k, s]
        while head < n_train:
            k = head
            if en <= bstart[k, s]:
                break
            head += 1
            if bend[k, s] > st:
                st = bend[k, s]
            en = st + fwd[s]
            if pe <= bstart[k, s]:
                offset += bdur[k, s]
            if s == 0 and bend[k, 0] <= st:
                retire[k] = True
        ii += st - pe - offset
        start_f[s] = st
        end_f[s] = en
        stage_ready = en
    if ii < 0.0:
        ii = 0.0
    return start_f, end_f, ii, retire


USE_NUMBA = os.environ.get("LEMIX_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes", "on")

plan_forward_py = _plan_forward
plan_forward = _plan_forward

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False
    else:
        plan_forward = njit(cache=True)(_plan_forward)
