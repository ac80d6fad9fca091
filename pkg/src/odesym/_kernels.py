"""Backend selection for the labeling scorer.

The compiled extension is preferred when it imported cleanly; the
pure-NumPy module is the fallback.  ``ODESYM_BACKEND=fallback`` (or
``=compiled``) forces the choice, which the parity tests and the kernel
benchmark rely on.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # pragma: no cover - build-env dependent
    _core = None

STATUS_DONE = _fallback.STATUS_DONE
STATUS_OUT_FULL = _fallback.STATUS_OUT_FULL
STATUS_TABLE_FULL = _fallback.STATUS_TABLE_FULL
STATUS_DEADLINE = _fallback.STATUS_DEADLINE


def available_backends() -> dict:
    """Importable scorer modules keyed by name."""
    out = {"fallback": _fallback}
    if _core is not None:
        out["compiled"] = _core
    return out


def _choose():
    forced = os.environ.get("ODESYM_BACKEND", "").strip().lower()
    if forced:
        try:
            return forced, available_backends()[forced]
        except KeyError:
            raise ImportError(f"requested backend {forced!r} is not available")
    if _core is not None:
        return "compiled", _core
    return "fallback", _fallback


BACKEND, _impl = _choose()
DedupTable = _impl.DedupTable
count_labelings = _impl.count_labelings
score_labelings = _impl.score_labelings


def run_scoring(
    code,
    a1,
    a2,
    cval,
    slot_pos,
    choices_flat,
    choices_off,
    roots,
    probes_t,
    probes_y,
    data_t,
    data_y,
    F,
    GF,
    eps,
    accept_loss,
    table,
    deadline,
    module=None,
    out_capacity: int = 4096,
    out_bufs=None,
):
    """Score every labeling of one skeleton, driving the resume protocol.

    Handles OUT_FULL (drain and continue), TABLE_FULL (grow the dedup
    table) and DEADLINE (stop early).  Returns
    ``(ids, losses, counters, exhausted)`` where ``exhausted`` is True
    when the deadline cut the sweep short.  ``out_bufs`` lets callers
    reuse the two output arrays across many calls.
    """
    if module is None:
        module = _impl
    if out_bufs is None:
        out_ids = np.empty(out_capacity, dtype=np.int64)
        out_losses = np.empty(out_capacity, dtype=np.float64)
    else:
        out_ids, out_losses = out_bufs
    ids: list = []
    losses: list = []
    totals = [0, 0, 0, 0]
    start = 0
    while True:
        status, nxt, n_out, counters = module.score_labelings(
            code, a1, a2, cval, slot_pos, choices_flat, choices_off, roots,
            probes_t, probes_y, data_t, data_y, F, GF, eps, accept_loss,
            table, start, deadline, out_ids, out_losses,
        )
        ids.extend(int(v) for v in out_ids[:n_out])
        losses.extend(float(v) for v in out_losses[:n_out])
        for i in range(4):
            totals[i] += counters[i]
        if status == STATUS_DONE:
            return ids, losses, tuple(totals), False
        if status == STATUS_DEADLINE:
            return ids, losses, tuple(totals), True
        if status == STATUS_TABLE_FULL:
            table.grow()
        start = nxt
