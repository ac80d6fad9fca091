"""Pure-NumPy labeling scorer: the fallback backend.

Scores every operator labeling of one skeleton tape against a dataset,
in three stages per candidate:

  A. evaluate on 16 probe points, hash into a 64-bit fingerprint,
     skip labelings whose fingerprint was already seen (same function),
  B. evaluate on all dataset points; reject on any domain error, then
     reject numerically negligible candidates (median |value| below eps),
  C. forward-mode duals over the dataset, reduced-condition residual
     against precomputed f values/Jacobians, mean squared loss; keep
     labelings below the acceptance threshold.

The compiled backend (same module contract) implements the identical
semantics candidate by candidate; this one vectorizes across labelings
in chunks.  Both walk labelings in the same mixed-radix order (slot 0 is
the most significant digit), so accepted ids and counters agree.
"""

from __future__ import annotations

import time

import numpy as np

from .expr import (
    DIV_GUARD,
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_INV,
    OP_LOG,
    OP_MUL,
    OP_NEG,
    OP_POW,
    OP_SIN,
    OP_SQRT,
    OP_SQUARE,
    OP_SUB,
    OP_TAN,
    OP_VAR,
)

STATUS_DONE = 0
STATUS_OUT_FULL = 1
STATUS_TABLE_FULL = 2
STATUS_DEADLINE = 3

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)
ERROR_WORD = np.uint64(0x7FF8000000000001)  # NaN payload: unreachable as a value

_CHUNK = 2048
_GRAD_CHUNK = 256


class DedupTable:
    """Set of uint64 fingerprints: a sorted array plus a pending overflow
    buffer, merged periodically.  Semantically a plain set.  Key 0 is
    remapped to 1, mirroring the compiled table's empty-slot reservation,
    so both backends store identical key sets."""

    def __init__(self, capacity_hint: int = 0):
        self._sorted = np.empty(0, dtype=np.uint64)
        self._pending: set = set()

    def __len__(self) -> int:
        return len(self._sorted) + len(self._pending)

    def _merge(self):
        if self._pending:
            extra = np.fromiter(self._pending, dtype=np.uint64, count=len(self._pending))
            self._sorted = np.sort(np.concatenate([self._sorted, extra]))
            self._pending.clear()

    def filter_new(self, keys: np.ndarray) -> np.ndarray:
        """Mask of keys not seen before; first occurrence inside ``keys``
        counts as new.  All new keys are added."""
        keys = np.where(keys == 0, np.uint64(1), keys)
        n = len(keys)
        mask = np.ones(n, dtype=bool)
        if len(self._sorted):
            pos = np.searchsorted(self._sorted, keys)
            inside = pos < len(self._sorted)
            hit = np.zeros(n, dtype=bool)
            hit[inside] = self._sorted[pos[inside]] == keys[inside]
            mask &= ~hit
        pending = self._pending
        for i, key in enumerate(keys.tolist()):
            if mask[i]:
                if key in pending:
                    mask[i] = False
                else:
                    pending.add(key)
        if len(pending) > 1 << 16:
            self._merge()
        return mask

    def contains(self, key: int) -> bool:
        key = 1 if key == 0 else int(key)
        if key in self._pending:
            return True
        pos = int(np.searchsorted(self._sorted, np.uint64(key)))
        return pos < len(self._sorted) and int(self._sorted[pos]) == key

    def add(self, key: int) -> bool:
        """Insert; True when the key was not present before."""
        key = 1 if key == 0 else int(key)
        if self.contains(key):
            return False
        self._pending.add(key)
        return True

    def grow(self):
        """No-op: this table grows as needed."""

    def keys(self) -> np.ndarray:
        self._merge()
        return self._sorted.copy()


def _radices(choices_off):
    return np.diff(choices_off).astype(np.int64)


def count_labelings(choices_off) -> int:
    radix = _radices(choices_off)
    return int(np.prod(radix)) if len(radix) else 1


def _value_op(opc, q, x, z, err):
    """Apply one operator to value arrays; flags domain errors in ``err``.

    Mirrors the scalar evaluation rules exactly (guards, branch forms).
    """
    if opc == OP_NEG:
        return -x
    if opc == OP_INV:
        bad = np.abs(x) < DIV_GUARD
        err |= bad
        return 1.0 / np.where(bad, 1.0, x)
    if opc == OP_EXP:
        v = np.exp(x)
        bad = ~np.isfinite(v)
        err |= bad
        return np.where(bad, 1.0, v)
    if opc == OP_LOG:
        bad = x <= 0.0
        err |= bad
        return np.log(np.where(bad, 1.0, x))
    if opc == OP_SIN:
        return np.sin(x)
    if opc == OP_COS:
        return np.cos(x)
    if opc == OP_TAN:
        v = np.tan(x)
        bad = ~np.isfinite(v)
        err |= bad
        return np.where(bad, 1.0, v)
    if opc == OP_SQRT:
        bad = x < 0.0
        err |= bad
        return np.sqrt(np.where(bad, 1.0, x))
    if opc == OP_SQUARE:
        v = x * x
        bad = ~np.isfinite(v)
        err |= bad
        return np.where(bad, 1.0, v)
    if opc == OP_ADD:
        v = x + z
    elif opc == OP_SUB:
        v = x - z
    elif opc == OP_MUL:
        v = x * z
    elif opc == OP_DIV:
        bad = np.abs(z) < DIV_GUARD
        err |= bad
        v = x / np.where(bad, 1.0, z)
    elif opc == OP_POW:
        if q < 0:
            bad = np.abs(x) < DIV_GUARD
            if q == -0.5:
                bad = bad | (x < 0.0)
            err |= bad
            xs = np.where(bad, 1.0, x)
            if q == -1.0:
                return 1.0 / xs
            if q == -2.0:
                return 1.0 / (xs * xs)
            if q == -3.0:
                return 1.0 / (xs * xs * xs)
            return 1.0 / np.sqrt(xs)
        if q == 0.5:
            bad = x < 0.0
            err |= bad
            return np.sqrt(np.where(bad, 1.0, x))
        if q == 2.0:
            v = x * x
        elif q == 3.0:
            v = x * x * x
        else:  # 4
            xx = x * x
            v = xx * xx
    else:
        raise ValueError(f"unknown opcode {opc}")
    bad = ~np.isfinite(v)
    err |= bad
    return np.where(bad, 1.0, v)


def _dual_op(opc, q, x, gx, z, gz, err):
    """Value and derivative arrays for one operator (forward mode).

    ``gx``/``gz`` carry a trailing axis of d+1 partials.  Domain and
    non-finite events are flagged per row in ``err``.
    """
    if opc == OP_NEG:
        return -x, -gx
    if opc == OP_INV:
        bad = np.abs(x) < DIV_GUARD
        err |= bad
        xs = np.where(bad, 1.0, x)
        v = 1.0 / xs
        return v, gx * (-(v * v))[..., None]
    if opc == OP_EXP:
        v = np.exp(x)
        bad = ~np.isfinite(v)
        err |= bad
        v = np.where(bad, 1.0, v)
        g = gx * v[..., None]
    elif opc == OP_LOG:
        bad = x <= 0.0
        err |= bad
        xs = np.where(bad, 1.0, x)
        return np.log(xs), gx / xs[..., None]
    elif opc == OP_SIN:
        return np.sin(x), gx * np.cos(x)[..., None]
    elif opc == OP_COS:
        return np.cos(x), gx * (-np.sin(x))[..., None]
    elif opc == OP_TAN:
        v = np.tan(x)
        bad = ~np.isfinite(v)
        err |= bad
        v = np.where(bad, 1.0, v)
        g = gx * (1.0 + v * v)[..., None]
    elif opc == OP_SQRT:
        bad = x < 0.0
        err |= bad
        v = np.sqrt(np.where(bad, 1.0, x))
        den = 2.0 * v
        badd = den < DIV_GUARD
        err |= badd
        g = gx / np.where(badd, 1.0, den)[..., None]
        return v, g
    elif opc == OP_SQUARE:
        v = x * x
        bad = ~np.isfinite(v)
        err |= bad
        v = np.where(bad, 1.0, v)
        g = gx * (2.0 * x)[..., None]
    elif opc == OP_ADD:
        v, g = x + z, gx + gz
    elif opc == OP_SUB:
        v, g = x - z, gx - gz
    elif opc == OP_MUL:
        v = x * z
        g = gx * z[..., None] + gz * x[..., None]
    elif opc == OP_DIV:
        bad = np.abs(z) < DIV_GUARD
        err |= bad
        zs = np.where(bad, 1.0, z)
        v = x / zs
        g = (gx - gz * v[..., None]) / zs[..., None]
    elif opc == OP_POW:
        if q < 0:
            bad = np.abs(x) < DIV_GUARD
            if q == -0.5:
                bad = bad | (x < 0.0)
            err |= bad
            xs = np.where(bad, 1.0, x)
            if q == -1.0:
                v = 1.0 / xs
                slope = -v * v
            elif q == -2.0:
                v = 1.0 / (xs * xs)
                slope = -2.0 / (xs * xs * xs)
            elif q == -3.0:
                v = 1.0 / (xs * xs * xs)
                xx = xs * xs
                slope = -3.0 / (xx * xx)
            else:
                v = 1.0 / np.sqrt(xs)
                slope = q * v / xs
            return v, gx * slope[..., None]
        if q == 0.5:
            bad = x < 0.0
            err |= bad
            xs = np.where(bad, 1.0, x)
            v = np.sqrt(xs)
            badd = np.abs(xs) < DIV_GUARD
            err |= badd
            xs = np.where(badd, 1.0, xs)
            v = np.where(badd, 1.0, v)
            return v, gx * (q * v / xs)[..., None]
        if q == 2.0:
            v = x * x
            slope = 2.0 * x
        elif q == 3.0:
            v = x * x * x
            slope = 3.0 * x * x
        else:
            xx = x * x
            v = xx * xx
            slope = 4.0 * x * x * x
        bad = ~np.isfinite(v)
        err |= bad
        v = np.where(bad, 1.0, v)
        g = gx * slope[..., None]
    else:
        raise ValueError(f"unknown opcode {opc}")
    bad = ~np.isfinite(v)
    err |= bad
    v = np.where(bad, 1.0, v)
    badg = ~np.isfinite(g).all(axis=-1)
    err |= badg
    g = np.where(badg[..., None], 0.0, g)
    return v, g


def _chunk_values(code, a1, a2, cval, slot_pos, ops, ts, ys, rows):
    """Evaluate the tape for ``rows`` labelings at once over given points.

    ``ops`` has shape (rows, n_slots): the opcode chosen at each slot.
    Returns (values per node list, err (rows, npts)).
    """
    npts = len(ts)
    err = np.zeros((rows, npts), dtype=bool)
    vals = [None] * len(code)
    slot_of = {int(p): s for s, p in enumerate(slot_pos)}
    with np.errstate(all="ignore"):
        for i in range(len(code)):
            opc = int(code[i])
            if opc == OP_VAR:
                idx = int(a1[i])
                col = ts if idx == 0 else ys[:, idx - 1]
                vals[i] = np.broadcast_to(col, (rows, npts))
                continue
            if opc == OP_CONST:
                vals[i] = np.broadcast_to(np.float64(cval[i]), (rows, npts))
                continue
            x = vals[a1[i]]
            if opc >= 0:
                q = float(cval[a2[i]]) if opc == OP_POW else 0.0
                vals[i] = _value_op(opc, q, x, vals[a2[i]] if opc >= OP_ADD else None, err)
                continue
            # slot node: rows disagree on the op
            s = slot_of[i]
            out = np.empty((rows, npts))
            for choice in np.unique(ops[:, s]):
                sel = ops[:, s] == choice
                suberr = err[sel]
                c = int(choice)
                xz = vals[a2[i]][sel] if c >= OP_ADD else None
                q = float(cval[a2[i]]) if c == OP_POW else 0.0
                out[sel] = _value_op(c, q, x[sel], xz, suberr)
                err[sel] = suberr
            vals[i] = out
    return vals, err


def _chunk_duals(code, a1, a2, cval, slot_pos, ops, ts, ys, rows, width):
    """Like :func:`_chunk_values` but with forward-mode partials."""
    npts = len(ts)
    err = np.zeros((rows, npts), dtype=bool)
    vals = [None] * len(code)
    grads = [None] * len(code)
    slot_of = {int(p): s for s, p in enumerate(slot_pos)}
    with np.errstate(all="ignore"):
        for i in range(len(code)):
            opc = int(code[i])
            if opc == OP_VAR:
                idx = int(a1[i])
                col = ts if idx == 0 else ys[:, idx - 1]
                vals[i] = np.broadcast_to(col, (rows, npts))
                g = np.zeros((1, npts, width))
                g[0, :, idx] = 1.0
                grads[i] = np.broadcast_to(g, (rows, npts, width))
                continue
            if opc == OP_CONST:
                vals[i] = np.broadcast_to(np.float64(cval[i]), (rows, npts))
                grads[i] = np.broadcast_to(np.zeros(width), (rows, npts, width))
                continue
            x, gx = vals[a1[i]], grads[a1[i]]
            if opc >= 0:
                z = vals[a2[i]] if opc >= OP_ADD else None
                gz = grads[a2[i]] if opc >= OP_ADD else None
                q = float(cval[a2[i]]) if opc == OP_POW else 0.0
                vals[i], grads[i] = _dual_op(opc, q, x, gx, z, gz, err)
                continue
            s = slot_of[i]
            out_v = np.empty((rows, npts))
            out_g = np.empty((rows, npts, width))
            for choice in np.unique(ops[:, s]):
                sel = ops[:, s] == choice
                suberr = err[sel]
                c = int(choice)
                z = vals[a2[i]][sel] if c >= OP_ADD else None
                gz = grads[a2[i]][sel] if c >= OP_ADD else None
                q = float(cval[a2[i]]) if c == OP_POW else 0.0
                out_v[sel], out_g[sel] = _dual_op(c, q, x[sel], gx[sel], z, gz, suberr)
                err[sel] = suberr
            vals[i] = out_v
            grads[i] = out_g
    return vals, grads, err


def _fingerprints(root_vals, err, rows):
    """FNV-style 64-bit mix over (root, probe) words."""
    fp = np.full(rows, FNV_OFFSET, dtype=np.uint64)
    for vals in root_vals:
        scaled = np.rint(vals * 1e9) + 0.0
        words = scaled.astype(np.float64).view(np.uint64)
        words = np.where(err, ERROR_WORD, words)
        for p in range(vals.shape[1]):
            fp = (fp ^ words[:, p]) * FNV_PRIME
    return fp


def score_labelings(
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
    start,
    deadline,
    out_ids,
    out_losses,
):
    """Score labelings ``start..L-1``; see module docstring for stages.

    Returns ``(status, next_start, n_out, (scored, dups, domain, trivial))``.
    On OUT_FULL/DEADLINE the caller drains outputs and resumes at
    ``next_start``.
    """
    code = np.asarray(code, dtype=np.int32)
    n_slots = len(slot_pos)
    radix = _radices(choices_off)
    total = count_labelings(choices_off)
    strides = np.ones(n_slots, dtype=np.int64)
    for s in range(n_slots - 2, -1, -1):
        strides[s] = strides[s + 1] * radix[s + 1]
    max_out = len(out_ids)
    block = max(1, min(_CHUNK, max_out))
    n_out = 0
    scored = dups = domain = trivial = 0

    lab = int(start)
    while lab < total:
        if time.monotonic() > deadline:
            return STATUS_DEADLINE, lab, n_out, (scored, dups, domain, trivial)
        hi = min(lab + block, total)
        if n_out + (hi - lab) > max_out:
            return STATUS_OUT_FULL, lab, n_out, (scored, dups, domain, trivial)
        ids = np.arange(lab, hi, dtype=np.int64)
        rows = len(ids)
        if n_slots:
            digits = (ids[:, None] // strides[None, :]) % radix[None, :]
            ops = choices_flat[choices_off[:-1][None, :] + digits].astype(np.int32)
        else:
            ops = np.zeros((rows, 0), dtype=np.int32)

        # stage A: probe fingerprints and dedup
        pv, perr = _chunk_values(
            code, a1, a2, cval, slot_pos, ops, probes_t, probes_y, rows
        )
        fps = _fingerprints([pv[r] for r in roots], perr, rows)
        if table is not None:
            new = table.filter_new(fps)
        else:
            new = np.ones(rows, dtype=bool)
        dups += int(rows - new.sum())
        scored += int(new.sum())
        survivors = np.flatnonzero(new)

        if len(survivors):
            n_out, dcount, tcount = _score_block(
                code, a1, a2, cval, slot_pos, roots, data_t, data_y, F, GF,
                eps, accept_loss, ops, ids, survivors, out_ids, out_losses, n_out,
            )
            domain += dcount
            trivial += tcount
        lab = hi
    return STATUS_DONE, total, n_out, (scored, dups, domain, trivial)


def _score_block(
    code, a1, a2, cval, slot_pos, roots, data_t, data_y, F, GF,
    eps, accept_loss, ops, ids, survivors, out_ids, out_losses, n_out,
):
    """Stages B and C for the non-duplicate rows of one chunk."""
    d = len(roots)
    n = len(data_t)
    width = d + 1
    domain = trivial = 0
    with np.errstate(all="ignore"):
        # stage B: dataset values, domain and triviality filters
        sub_ops = ops[survivors]
        dv, derr = _chunk_values(
            code, a1, a2, cval, slot_pos, sub_ops, data_t, data_y, len(survivors)
        )
        row_bad = derr.any(axis=1)
        domain += int(row_bad.sum())
        alive = ~row_bad
        if alive.any():
            vals3 = np.stack([dv[r] for r in roots], axis=2)  # (rows, n, d)
            med = np.median(np.abs(vals3[alive]).reshape(int(alive.sum()), -1), axis=1)
            keep_idx = np.flatnonzero(alive)
            small = med < eps
            trivial += int(small.sum())
            keep_idx = keep_idx[~small]
        else:
            keep_idx = np.empty(0, dtype=np.int64)

        # stage C: duals and loss for the remaining rows
        for lo2 in range(0, len(keep_idx), _GRAD_CHUNK):
            part = keep_idx[lo2 : lo2 + _GRAD_CHUNK]
            gv, gg, gerr = _chunk_duals(
                code, a1, a2, cval, slot_pos, sub_ops[part],
                data_t, data_y, len(part), width,
            )
            eta = np.stack([gv[r] for r in roots], axis=2)  # (rows, n, d)
            grad = np.stack([gg[r] for r in roots], axis=2)  # (rows, n, d, w)
            s_val = (
                grad[..., 0]
                + np.einsum("rnkj,nj->rnk", grad[..., 1:], F)
                - np.einsum("nkj,rnj->rnk", GF, eta)
            )
            losses = np.sum(s_val * s_val, axis=(1, 2)) / (n * d)
            # rows that erred during duals cannot be trusted
            losses = np.where(gerr.any(axis=1), np.inf, losses)
            for j in np.flatnonzero(losses < accept_loss):
                out_ids[n_out] = ids[survivors[part[j]]]
                out_losses[n_out] = losses[j]
                n_out += 1
    return n_out, domain, trivial
