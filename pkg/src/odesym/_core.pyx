# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled labeling scorer: the fast backend.

Same module contract and staged semantics as the pure-NumPy fallback
(stage A fingerprint dedup on probe points, stage B dataset values with
domain and triviality filters, stage C forward-mode duals and reduced
condition loss), evaluated candidate by candidate in C loops.  Accepted
labeling ids and all counters match the fallback; losses agree up to
floating-point summation order.
"""

from time import monotonic

import numpy as np

from libc.math cimport cos, exp, fabs, isfinite, log, rint, sin, sqrt, tan
from libc.stdint cimport int32_t, int64_t, uint64_t
from libc.string cimport memcpy

STATUS_DONE = 0
STATUS_OUT_FULL = 1
STATUS_TABLE_FULL = 2
STATUS_DEADLINE = 3

cdef double DIV_GUARD = 1e-12

cdef enum:
    OP_CONST = 0
    OP_VAR = 1
    OP_NEG = 2
    OP_INV = 3
    OP_EXP = 4
    OP_LOG = 5
    OP_SIN = 6
    OP_COS = 7
    OP_TAN = 8
    OP_SQRT = 9
    OP_SQUARE = 10
    OP_ADD = 11
    OP_SUB = 12
    OP_MUL = 13
    OP_DIV = 14
    OP_POW = 15

cdef uint64_t FNV_OFFSET = <uint64_t>0xCBF29CE484222325
cdef uint64_t FNV_PRIME = <uint64_t>0x100000001B3
cdef uint64_t ERROR_WORD = <uint64_t>0x7FF8000000000001


def _check_opcodes():
    # the enum above must stay in sync with the expression module
    from . import expr
    table = {
        "OP_CONST": OP_CONST, "OP_VAR": OP_VAR, "OP_NEG": OP_NEG,
        "OP_INV": OP_INV, "OP_EXP": OP_EXP, "OP_LOG": OP_LOG,
        "OP_SIN": OP_SIN, "OP_COS": OP_COS, "OP_TAN": OP_TAN,
        "OP_SQRT": OP_SQRT, "OP_SQUARE": OP_SQUARE, "OP_ADD": OP_ADD,
        "OP_SUB": OP_SUB, "OP_MUL": OP_MUL, "OP_DIV": OP_DIV,
        "OP_POW": OP_POW,
    }
    for name, value in table.items():
        if getattr(expr, name) != value:
            raise ImportError(f"opcode mismatch for {name}")
    if expr.DIV_GUARD != DIV_GUARD:
        raise ImportError("division guard mismatch")


_check_opcodes()


cdef inline uint64_t _mix(uint64_t k) nogil:
    # fingerprint low bits carry almost no entropy (integer-valued double
    # patterns), so keys must be finalized before slotting
    k ^= k >> 33
    k *= <uint64_t>0xFF51AFD7ED558CCDULL
    k ^= k >> 33
    k *= <uint64_t>0xC4CEB9FE1A85EC53ULL
    k ^= k >> 33
    return k


cdef class DedupTable:
    """Open-addressing set of uint64 fingerprints (0 is the empty slot;
    a zero key is remapped to 1)."""

    cdef object _buf
    cdef uint64_t[::1] _keys
    cdef readonly Py_ssize_t size

    def __init__(self, Py_ssize_t capacity_hint=1 << 16):
        cdef Py_ssize_t cap = 8
        while cap < capacity_hint:
            cap <<= 1
        self._alloc(cap)
        self.size = 0

    cdef void _alloc(self, Py_ssize_t cap):
        self._buf = np.zeros(cap, dtype=np.uint64)
        self._keys = self._buf

    @property
    def capacity(self):
        return self._keys.shape[0]

    cdef bint _needs_grow(self) nogil:
        return self.size * 10 >= self._keys.shape[0] * 7

    cdef bint _add(self, uint64_t key) nogil:
        cdef uint64_t mask = <uint64_t>(self._keys.shape[0] - 1)
        cdef uint64_t h
        if key == 0:
            key = 1
        h = _mix(key) & mask
        while self._keys[h] != 0:
            if self._keys[h] == key:
                return False
            h = (h + 1) & mask
        self._keys[h] = key
        self.size += 1
        return True

    def add(self, key):
        """Insert; True when the key was not present before."""
        return bool(self._add(<uint64_t>key))

    def contains(self, key):
        cdef uint64_t k = <uint64_t>key
        cdef uint64_t mask = <uint64_t>(self._keys.shape[0] - 1)
        if k == 0:
            k = 1
        cdef uint64_t h = _mix(k) & mask
        while self._keys[h] != 0:
            if self._keys[h] == k:
                return True
            h = (h + 1) & mask
        return False

    def grow(self):
        old = np.asarray(self._buf)
        old = old[old != 0]
        self._alloc(self._keys.shape[0] * 2)
        self.size = 0
        for k in old:
            self._add(<uint64_t>k)

    def __len__(self):
        return self.size

    def keys(self):
        arr = np.asarray(self._buf)
        return np.sort(arr[arr != 0])


def count_labelings(choices_off):
    off = np.asarray(choices_off, dtype=np.int64)
    total = 1
    for s in range(len(off) - 1):
        total *= int(off[s + 1] - off[s])
    return total


cdef inline uint64_t _word(double v) nogil:
    cdef double scaled = rint(v * 1e9) + 0.0
    cdef uint64_t bits
    memcpy(&bits, &scaled, 8)
    return bits


cdef inline bint _val_op(int opc, double x, double z, double q, double* out) nogil:
    """One operator on values; True signals a domain error.

    The guard structure matches the fallback's vectorized rules
    branch for branch.
    """
    cdef double v, xx
    if opc == OP_NEG:
        out[0] = -x
        return False
    if opc == OP_INV:
        if fabs(x) < DIV_GUARD:
            return True
        out[0] = 1.0 / x
        return False
    if opc == OP_EXP:
        v = exp(x)
        if not isfinite(v):
            return True
        out[0] = v
        return False
    if opc == OP_LOG:
        if x <= 0.0:
            return True
        out[0] = log(x)
        return False
    if opc == OP_SIN:
        out[0] = sin(x)
        return False
    if opc == OP_COS:
        out[0] = cos(x)
        return False
    if opc == OP_TAN:
        v = tan(x)
        if not isfinite(v):
            return True
        out[0] = v
        return False
    if opc == OP_SQRT:
        if x < 0.0:
            return True
        out[0] = sqrt(x)
        return False
    if opc == OP_SQUARE:
        v = x * x
        if not isfinite(v):
            return True
        out[0] = v
        return False
    if opc == OP_ADD:
        v = x + z
    elif opc == OP_SUB:
        v = x - z
    elif opc == OP_MUL:
        v = x * z
    elif opc == OP_DIV:
        if fabs(z) < DIV_GUARD:
            return True
        v = x / z
    elif opc == OP_POW:
        if q < 0.0:
            if fabs(x) < DIV_GUARD:
                return True
            if q == -0.5 and x < 0.0:
                return True
            if q == -1.0:
                out[0] = 1.0 / x
            elif q == -2.0:
                out[0] = 1.0 / (x * x)
            elif q == -3.0:
                out[0] = 1.0 / (x * x * x)
            else:
                out[0] = 1.0 / sqrt(x)
            return False
        if q == 0.5:
            if x < 0.0:
                return True
            out[0] = sqrt(x)
            return False
        if q == 2.0:
            v = x * x
        elif q == 3.0:
            v = x * x * x
        else:
            xx = x * x
            v = xx * xx
    else:
        return True
    if not isfinite(v):
        return True
    out[0] = v
    return False


cdef inline bint _dual_op(int opc, double x, double* gx, double z, double* gz,
                          double q, double* ov, double* og, Py_ssize_t w) nogil:
    """One operator on (value, partials); True signals a domain error.

    Ops whose fallback twin returns early skip the finiteness tail here
    too, so infinities propagate into the loss (rejecting the candidate)
    instead of raising a spurious domain error.
    """
    cdef double v, slope, den, xx
    cdef Py_ssize_t j
    if opc == OP_NEG:
        ov[0] = -x
        for j in range(w):
            og[j] = -gx[j]
        return False
    if opc == OP_INV:
        if fabs(x) < DIV_GUARD:
            return True
        v = 1.0 / x
        ov[0] = v
        slope = -(v * v)
        for j in range(w):
            og[j] = gx[j] * slope
        return False
    if opc == OP_LOG:
        if x <= 0.0:
            return True
        ov[0] = log(x)
        for j in range(w):
            og[j] = gx[j] / x
        return False
    if opc == OP_SIN:
        ov[0] = sin(x)
        slope = cos(x)
        for j in range(w):
            og[j] = gx[j] * slope
        return False
    if opc == OP_COS:
        ov[0] = cos(x)
        slope = -sin(x)
        for j in range(w):
            og[j] = gx[j] * slope
        return False
    if opc == OP_SQRT:
        if x < 0.0:
            return True
        v = sqrt(x)
        den = 2.0 * v
        if den < DIV_GUARD:
            return True
        ov[0] = v
        for j in range(w):
            og[j] = gx[j] / den
        return False
    if opc == OP_EXP:
        v = exp(x)
        if not isfinite(v):
            return True
        slope = v
    elif opc == OP_TAN:
        v = tan(x)
        if not isfinite(v):
            return True
        slope = 1.0 + v * v
    elif opc == OP_SQUARE:
        v = x * x
        if not isfinite(v):
            return True
        slope = 2.0 * x
    elif opc == OP_POW:
        if q < 0.0:
            if fabs(x) < DIV_GUARD:
                return True
            if q == -0.5 and x < 0.0:
                return True
            if q == -1.0:
                v = 1.0 / x
                slope = -(v * v)
            elif q == -2.0:
                v = 1.0 / (x * x)
                slope = -2.0 / (x * x * x)
            elif q == -3.0:
                v = 1.0 / (x * x * x)
                xx = x * x
                slope = -3.0 / (xx * xx)
            else:
                v = 1.0 / sqrt(x)
                slope = q * v / x
            ov[0] = v
            for j in range(w):
                og[j] = gx[j] * slope
            return False
        if q == 0.5:
            if x < 0.0:
                return True
            if fabs(x) < DIV_GUARD:
                return True
            v = sqrt(x)
            ov[0] = v
            slope = q * v / x
            for j in range(w):
                og[j] = gx[j] * slope
            return False
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
        if not isfinite(v):
            return True
    elif opc == OP_ADD:
        v = x + z
        if not isfinite(v):
            return True
        ov[0] = v
        for j in range(w):
            og[j] = gx[j] + gz[j]
            if not isfinite(og[j]):
                return True
        return False
    elif opc == OP_SUB:
        v = x - z
        if not isfinite(v):
            return True
        ov[0] = v
        for j in range(w):
            og[j] = gx[j] - gz[j]
            if not isfinite(og[j]):
                return True
        return False
    elif opc == OP_MUL:
        v = x * z
        if not isfinite(v):
            return True
        ov[0] = v
        for j in range(w):
            og[j] = gx[j] * z + gz[j] * x
            if not isfinite(og[j]):
                return True
        return False
    elif opc == OP_DIV:
        if fabs(z) < DIV_GUARD:
            return True
        v = x / z
        if not isfinite(v):
            return True
        ov[0] = v
        for j in range(w):
            og[j] = (gx[j] - gz[j] * v) / z
            if not isfinite(og[j]):
                return True
        return False
    else:
        return True
    # unary fall-through ops: value checked above, grads share one slope
    ov[0] = v
    for j in range(w):
        og[j] = gx[j] * slope
        if not isfinite(og[j]):
            return True
    return False


cdef bint _tape_values(int32_t* code, int32_t* a1, int32_t* a2, double* cval,
                       Py_ssize_t n_nodes, double tval, double* yrow,
                       double* vals) nogil:
    cdef Py_ssize_t i
    cdef int opc
    cdef double x, z, q
    for i in range(n_nodes):
        opc = code[i]
        if opc == OP_VAR:
            vals[i] = tval if a1[i] == 0 else yrow[a1[i] - 1]
        elif opc == OP_CONST:
            vals[i] = cval[i]
        else:
            x = vals[a1[i]]
            if opc >= OP_ADD:
                z = vals[a2[i]]
                q = cval[a2[i]] if opc == OP_POW else 0.0
            else:
                z = 0.0
                q = 0.0
            if _val_op(opc, x, z, q, &vals[i]):
                return True
    return False


cdef bint _tape_duals(int32_t* code, int32_t* a1, int32_t* a2, double* cval,
                      Py_ssize_t n_nodes, double tval, double* yrow,
                      double* vals, double* grads, Py_ssize_t w) nogil:
    cdef Py_ssize_t i, j
    cdef int opc
    cdef double x, z, q
    cdef double* gx
    cdef double* gz
    for i in range(n_nodes):
        opc = code[i]
        if opc == OP_VAR:
            vals[i] = tval if a1[i] == 0 else yrow[a1[i] - 1]
            for j in range(w):
                grads[i * w + j] = 0.0
            grads[i * w + a1[i]] = 1.0
        elif opc == OP_CONST:
            vals[i] = cval[i]
            for j in range(w):
                grads[i * w + j] = 0.0
        else:
            x = vals[a1[i]]
            gx = grads + a1[i] * w
            if opc >= OP_ADD:
                z = vals[a2[i]]
                gz = grads + a2[i] * w
                q = cval[a2[i]] if opc == OP_POW else 0.0
            else:
                z = 0.0
                gz = gx
                q = 0.0
            if _dual_op(opc, x, gx, z, gz, q, &vals[i], grads + i * w, w):
                return True
    return False


cdef double _select(double* a, Py_ssize_t n, Py_ssize_t k) nogil:
    """Quickselect: places the k-th order statistic at a[k], with all
    smaller-or-equal elements to its left.  Permutes ``a``."""
    cdef Py_ssize_t lo = 0, hi = n - 1, mid, store, i
    cdef double pivot, tmp
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # median-of-three pivot, parked at hi
        if a[mid] < a[lo]:
            tmp = a[mid]; a[mid] = a[lo]; a[lo] = tmp
        if a[hi] < a[lo]:
            tmp = a[hi]; a[hi] = a[lo]; a[lo] = tmp
        if a[hi] < a[mid]:
            tmp = a[hi]; a[hi] = a[mid]; a[mid] = tmp
        pivot = a[mid]
        tmp = a[mid]; a[mid] = a[hi]; a[hi] = tmp
        store = lo
        for i in range(lo, hi):
            if a[i] < pivot:
                tmp = a[i]; a[i] = a[store]; a[store] = tmp
                store += 1
        tmp = a[store]; a[store] = a[hi]; a[hi] = tmp
        if store == k:
            return a[k]
        if store < k:
            lo = store + 1
        else:
            hi = store - 1
    return a[k]


cdef double _median_abs(double* a, Py_ssize_t m) nogil:
    cdef Py_ssize_t k = m // 2
    cdef Py_ssize_t i
    cdef double hi = _select(a, m, k)
    cdef double lo
    if m & 1:
        return hi
    lo = a[0]
    for i in range(1, k):
        if a[i] > lo:
            lo = a[i]
    return (lo + hi) * 0.5


def score_labelings(
    int32_t[::1] code,
    int32_t[::1] a1,
    int32_t[::1] a2,
    double[::1] cval,
    int32_t[::1] slot_pos,
    int32_t[::1] choices_flat,
    int64_t[::1] choices_off,
    int32_t[::1] roots,
    double[::1] probes_t,
    double[:, ::1] probes_y,
    double[::1] data_t,
    double[:, ::1] data_y,
    double[:, ::1] F,
    double[:, :, ::1] GF,
    double eps,
    double accept_loss,
    object table,
    int64_t start,
    double deadline,
    int64_t[::1] out_ids,
    double[::1] out_losses,
):
    """Score labelings ``start..L-1`` of one skeleton tape.

    Returns ``(status, next_start, n_out, (scored, dups, domain, trivial))``;
    same contract as the fallback backend.  TABLE_FULL asks the caller to
    grow the dedup table and resume.
    """
    cdef Py_ssize_t n_nodes = code.shape[0]
    cdef Py_ssize_t n_slots = slot_pos.shape[0]
    cdef Py_ssize_t d = roots.shape[0]
    cdef Py_ssize_t n = data_t.shape[0]
    cdef Py_ssize_t nprobes = probes_t.shape[0]
    cdef Py_ssize_t w = d + 1
    cdef Py_ssize_t max_out = out_ids.shape[0]

    cdef DedupTable tbl = None
    if table is not None:
        tbl = <DedupTable?>table

    radix_arr = np.empty(n_slots, dtype=np.int64)
    strides_arr = np.ones(n_slots, dtype=np.int64)
    cdef int64_t[::1] radix = radix_arr
    cdef int64_t[::1] strides = strides_arr
    cdef Py_ssize_t s
    cdef int64_t total = 1
    for s in range(n_slots):
        radix[s] = choices_off[s + 1] - choices_off[s]
    for s in range(n_slots - 2, -1, -1):
        strides[s] = strides[s + 1] * radix[s + 1]
    for s in range(n_slots):
        total *= radix[s]

    codew_arr = np.empty(n_nodes, dtype=np.int32)
    cdef int32_t[::1] codew = codew_arr
    cdef Py_ssize_t i
    for i in range(n_nodes):
        codew[i] = code[i]

    digits_arr = np.zeros(max(n_slots, 1), dtype=np.int64)
    cdef int64_t[::1] digits = digits_arr
    vals_arr = np.empty(n_nodes, dtype=np.float64)
    cdef double[::1] vals = vals_arr
    grads_arr = np.empty(n_nodes * w, dtype=np.float64)
    cdef double[::1] grads = grads_arr
    words_arr = np.empty((max(d, 1), max(nprobes, 1)), dtype=np.uint64)
    cdef uint64_t[:, ::1] words = words_arr
    abs_arr = np.empty(max(n * d, 1), dtype=np.float64)
    cdef double[::1] absbuf = abs_arr

    cdef int64_t lab = start
    cdef int64_t n_out = 0
    cdef int64_t scored = 0, dups = 0, domain = 0, trivial = 0
    # fire the deadline check on the very first labeling, then every 1024
    cdef int since_check = 1023
    cdef bint err, alive
    cdef Py_ssize_t p, k, j, r
    cdef uint64_t fp
    cdef double med, acc, sv, l
    cdef double* gk

    for s in range(n_slots):
        digits[s] = (start // strides[s]) % radix[s]

    while lab < total:
        since_check += 1
        if since_check >= 1024:
            since_check = 0
            if monotonic() > deadline:
                return STATUS_DEADLINE, int(lab), int(n_out), (int(scored), int(dups), int(domain), int(trivial))
        if n_out >= max_out:
            return STATUS_OUT_FULL, int(lab), int(n_out), (int(scored), int(dups), int(domain), int(trivial))
        if tbl is not None and tbl._needs_grow():
            return STATUS_TABLE_FULL, int(lab), int(n_out), (int(scored), int(dups), int(domain), int(trivial))

        for s in range(n_slots):
            codew[slot_pos[s]] = choices_flat[choices_off[s] + digits[s]]

        # stage A: probe fingerprint, dedup
        for p in range(nprobes):
            err = _tape_values(&codew[0], &a1[0], &a2[0], &cval[0], n_nodes,
                               probes_t[p], &probes_y[p, 0], &vals[0])
            if err:
                for r in range(d):
                    words[r, p] = ERROR_WORD
            else:
                for r in range(d):
                    words[r, p] = _word(vals[roots[r]])
        fp = FNV_OFFSET
        for r in range(d):
            for p in range(nprobes):
                fp = (fp ^ words[r, p]) * FNV_PRIME

        if tbl is not None and not tbl._add(fp):
            dups += 1
        else:
            scored += 1
            # stage B: dataset values, domain and triviality filters
            alive = True
            for i in range(n):
                err = _tape_values(&codew[0], &a1[0], &a2[0], &cval[0], n_nodes,
                                   data_t[i], &data_y[i, 0], &vals[0])
                if err:
                    alive = False
                    break
                for k in range(d):
                    absbuf[i * d + k] = fabs(vals[roots[k]])
            if not alive:
                domain += 1
            else:
                med = _median_abs(&absbuf[0], n * d)
                if med < eps:
                    trivial += 1
                else:
                    # stage C: duals, residual, loss
                    acc = 0.0
                    for i in range(n):
                        err = _tape_duals(&codew[0], &a1[0], &a2[0], &cval[0],
                                          n_nodes, data_t[i], &data_y[i, 0],
                                          &vals[0], &grads[0], w)
                        if err:
                            alive = False
                            break
                        for k in range(d):
                            gk = &grads[roots[k] * w]
                            sv = gk[0]
                            for j in range(d):
                                sv += gk[1 + j] * F[i, j]
                            for j in range(d):
                                sv -= GF[i, k, j] * vals[roots[j]]
                            acc += sv * sv
                    if alive:
                        l = acc / (n * d)
                        if l < accept_loss:
                            out_ids[n_out] = lab
                            out_losses[n_out] = l
                            n_out += 1

        # advance the odometer (slot n_slots-1 moves fastest)
        lab += 1
        s = n_slots - 1
        while s >= 0:
            digits[s] += 1
            if digits[s] < radix[s]:
                break
            digits[s] = 0
            s -= 1

    return STATUS_DONE, int(total), int(n_out), (int(scored), int(dups), int(domain), int(trivial))
