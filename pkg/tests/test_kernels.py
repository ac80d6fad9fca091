"""Scoring-kernel backends: parity, dedup table contract, resume protocol."""

import time

import numpy as np
import pytest

from odesym import _fallback, _kernels, expr, odeint, search, symmetry

BACKENDS = _kernels.available_backends()
backend = pytest.mark.parametrize(
    "module", list(BACKENDS.values()), ids=list(BACKENDS.keys())
)

# guard-heavy data (negatives for log/sqrt/tan rejections) comes from ODE8
SYSTEMS = {
    "intro": odeint.OdeSystem.from_strings(
        "intro", ["-y2", "y1"], (1.0, 2.0), (0.0, 3.0)
    ),
    "ode8": odeint.OdeSystem.from_strings(
        "ode8", ["exp(-t)*sin(y2)", "exp(-t)*sin(y1)"], (-1.0, 0.0), (-1.0, 0.0)
    ),
}

ARITH_OPS = ("neg", "inv", "square", "add", "sub", "mul", "div")


def test_both_backends_present():
    # the package ships a compiled core; its absence means a broken build
    assert set(BACKENDS) == {"fallback", "compiled"}
    assert _kernels.BACKEND in BACKENDS


@pytest.fixture(scope="module")
def intro_inputs():
    return _kernel_inputs("intro")


def _kernel_inputs(name, seed=7):
    system = SYSTEMS[name]
    ds = odeint.build_dataset(system, seed=1)
    T, Y = ds.flat_points()
    T = np.ascontiguousarray(T)
    Y = np.ascontiguousarray(Y)
    F, GF_full, err = expr.gradient_batch(system.f, T, Y)
    assert not err.any()
    GF = np.ascontiguousarray(GF_full[:, :, 1:])
    probes = search.draw_probes(ds, seed)
    return {
        "system": system,
        "dataset": ds,
        "T": T,
        "Y": Y,
        "F": np.ascontiguousarray(F),
        "GF": GF,
        "probes_t": np.ascontiguousarray(probes[:, 0]),
        "probes_y": np.ascontiguousarray(probes[:, 1:]),
    }


def _sweep(inputs, module, cfg, table, n_ops_max=2, deadline_offset=600.0):
    """Run every skeleton up to n_ops_max through one backend; returns
    accepted (skeleton_index, labeling_id, loss) triples and counters."""
    accepted = []
    totals = [0, 0, 0, 0]
    deadline = time.monotonic() + deadline_offset
    idx = 0
    for n_ops in range(n_ops_max + 1):
        for sk in search.enumerate_skeletons(inputs["system"].d, n_ops):
            tape = search._Tape(sk, cfg)
            ids, losses, counters, exhausted = _kernels.run_scoring(
                tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
                tape.choices_flat, tape.choices_off, tape.roots,
                inputs["probes_t"], inputs["probes_y"],
                inputs["T"], inputs["Y"], inputs["F"], inputs["GF"],
                cfg.trivial_eps, cfg.accept_loss, table, deadline,
                module=module,
            )
            assert not exhausted
            accepted.extend((idx, i, l) for i, l in zip(ids, losses))
            for k in range(4):
                totals[k] += counters[k]
            idx += 1
    return accepted, tuple(totals)


@pytest.mark.parametrize("name", ["intro", "ode8"])
def test_backend_parity_full_sweep(name):
    inputs = _kernel_inputs(name)
    cfg = search.SearchConfig(operators=search.DEFAULT_OPERATORS, accept_loss=1e-8)
    results = {}
    tables = {}
    for bname, module in BACKENDS.items():
        table = module.DedupTable()
        results[bname] = _sweep(inputs, module, cfg, table)
        tables[bname] = table
    acc_f, counters_f = results["fallback"]
    acc_c, counters_c = results["compiled"]
    assert counters_f == counters_c
    assert [(s, i) for s, i, _ in acc_f] == [(s, i) for s, i, _ in acc_c]
    # loss summation order differs (pairwise vs sequential); values agree
    lf = np.array([l for _, _, l in acc_f])
    lc = np.array([l for _, _, l in acc_c])
    assert np.allclose(lf, lc, rtol=1e-12, atol=1e-300)
    # libm and numpy transcendentals may differ by 1 ulp, which flips a
    # fingerprint when a probe value sits on a rint boundary; everything
    # but a sliver of raw keys must still coincide
    kf = set(int(k) for k in tables["fallback"].keys())
    kc = set(int(k) for k in tables["compiled"].keys())
    assert len(kf) == len(kc)
    assert len(kf ^ kc) <= max(8, len(kf) // 200)


def test_backend_parity_bit_exact_arithmetic(intro_inputs):
    # without transcendental ops both backends evaluate identical float
    # sequences, so accepted losses and fingerprints agree to the last bit
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e-8)
    out = {}
    tables = {}
    for bname, module in BACKENDS.items():
        tables[bname] = module.DedupTable()
        out[bname] = _sweep(intro_inputs, module, cfg, tables[bname])
    acc_f, counters_f = out["fallback"]
    acc_c, counters_c = out["compiled"]
    assert counters_f == counters_c
    assert acc_f == acc_c  # exact equality, including losses
    assert np.array_equal(tables["fallback"].keys(), tables["compiled"].keys())


def test_backend_parity_without_dedup(intro_inputs):
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e-8)
    out = {
        bname: _sweep(intro_inputs, module, cfg, None)
        for bname, module in BACKENDS.items()
    }
    assert out["fallback"] == out["compiled"]
    # dedup only removes rescoring work, never changes the accepted set
    with_table = _sweep(
        intro_inputs, _kernels._impl, cfg, _kernels.DedupTable()
    )
    kept = {(s, i) for s, i, _ in with_table[0]}
    assert kept <= {(s, i) for s, i, _ in out["fallback"][0]}


@backend
def test_out_full_resume_matches_single_shot(intro_inputs, module):
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e30)
    sk = next(iter(search.enumerate_skeletons(2, 1)))
    tape = search._Tape(sk, cfg)
    args = (
        tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
        tape.choices_flat, tape.choices_off, tape.roots,
        intro_inputs["probes_t"], intro_inputs["probes_y"],
        intro_inputs["T"], intro_inputs["Y"],
        intro_inputs["F"], intro_inputs["GF"],
        cfg.trivial_eps, cfg.accept_loss,
    )
    deadline = time.monotonic() + 600.0
    big = _kernels.run_scoring(*args, None, deadline, module=module)
    tiny = _kernels.run_scoring(
        *args, None, deadline, module=module, out_capacity=1
    )
    assert big[:3] == tiny[:3]
    assert len(big[0]) > 1  # the resume path actually cycled


@backend
def test_out_full_status_positions(intro_inputs, module):
    # raw protocol: a full output buffer reports OUT_FULL with next_start
    # pointing at the first unprocessed labeling
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e30)
    sk = next(iter(search.enumerate_skeletons(2, 1)))
    tape = search._Tape(sk, cfg)
    out_ids = np.empty(1, dtype=np.int64)
    out_losses = np.empty(1, dtype=np.float64)
    status, nxt, n_out, counters = module.score_labelings(
        tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
        tape.choices_flat, tape.choices_off, tape.roots,
        intro_inputs["probes_t"], intro_inputs["probes_y"],
        intro_inputs["T"], intro_inputs["Y"],
        intro_inputs["F"], intro_inputs["GF"],
        cfg.trivial_eps, cfg.accept_loss,
        None, 0, time.monotonic() + 600.0, out_ids, out_losses,
    )
    assert status == _kernels.STATUS_OUT_FULL
    assert n_out == 1
    assert int(out_ids[0]) < nxt <= tape.n_labelings


@backend
def test_deadline_returns_immediately(intro_inputs, module):
    cfg = search.SearchConfig(operators=ARITH_OPS)
    sk = next(iter(search.enumerate_skeletons(2, 2)))
    tape = search._Tape(sk, cfg)
    ids, losses, counters, exhausted = _kernels.run_scoring(
        tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
        tape.choices_flat, tape.choices_off, tape.roots,
        intro_inputs["probes_t"], intro_inputs["probes_y"],
        intro_inputs["T"], intro_inputs["Y"],
        intro_inputs["F"], intro_inputs["GF"],
        cfg.trivial_eps, cfg.accept_loss,
        None, time.monotonic() - 1.0, module=module,
    )
    assert exhausted
    assert ids == [] and losses == []
    assert counters == (0, 0, 0, 0)


def test_compiled_table_grows_under_pressure(intro_inputs):
    compiled = BACKENDS["compiled"]
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e-8)
    small = compiled.DedupTable(capacity_hint=8)
    acc_small, counters_small = _sweep(intro_inputs, compiled, cfg, small)
    roomy = compiled.DedupTable()
    acc_roomy, counters_roomy = _sweep(intro_inputs, compiled, cfg, roomy)
    assert acc_small == acc_roomy
    assert counters_small == counters_roomy
    assert np.array_equal(small.keys(), roomy.keys())
    assert small.capacity > 8


@backend
def test_scored_plus_dups_covers_all_labelings(intro_inputs, module):
    cfg = search.SearchConfig(operators=search.DEFAULT_OPERATORS, accept_loss=1e-8)
    table = module.DedupTable()
    _, (scored, dups, domain, trivial) = _sweep(
        intro_inputs, module, cfg, table, n_ops_max=1
    )
    total = sum(
        search._Tape(sk, cfg).n_labelings
        for n in (0, 1)
        for sk in search.enumerate_skeletons(2, n)
    )
    assert scored + dups == total
    assert len(table) == scored
    assert domain + trivial <= scored


def test_stage_a_fingerprint_matches_python_reference(intro_inputs):
    # one labeled candidate scored through each backend must insert
    # exactly the fingerprint the pure helper computes
    cfg = search.SearchConfig(operators=("add",))
    sk = search.Skeleton(2, ((2, 0, 1),), (5, 5))
    tape = search._Tape(sk, cfg)
    e = tape.build(sk, 0)
    probes = np.column_stack([intro_inputs["probes_t"], intro_inputs["probes_y"]])
    expected = search.fingerprint(e, probes)
    for module in BACKENDS.values():
        table = module.DedupTable()
        _kernels.run_scoring(
            tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
            tape.choices_flat, tape.choices_off, tape.roots,
            intro_inputs["probes_t"], intro_inputs["probes_y"],
            intro_inputs["T"], intro_inputs["Y"],
            intro_inputs["F"], intro_inputs["GF"],
            cfg.trivial_eps, 1e30, table, time.monotonic() + 60.0,
            module=module,
        )
        assert list(table.keys()) == [expected]


def test_kernel_loss_matches_scalar_loss(intro_inputs):
    # stage C must reproduce the reference loss for surviving candidates
    cfg = search.SearchConfig(operators=ARITH_OPS, accept_loss=1e30)
    system = intro_inputs["system"]
    ds = intro_inputs["dataset"]
    for sk in search.enumerate_skeletons(2, 1):
        tape = search._Tape(sk, cfg)
        ids, losses, _, _ = _kernels.run_scoring(
            tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
            tape.choices_flat, tape.choices_off, tape.roots,
            intro_inputs["probes_t"], intro_inputs["probes_y"],
            intro_inputs["T"], intro_inputs["Y"],
            intro_inputs["F"], intro_inputs["GF"],
            cfg.trivial_eps, cfg.accept_loss, None, time.monotonic() + 600.0,
        )
        for lab, loss_val in zip(ids, losses):
            ref = symmetry.loss(system, tape.build(sk, lab), ds)
            assert loss_val == pytest.approx(ref, rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("cls", [_kernels.DedupTable, _fallback.DedupTable])
def test_dedup_table_set_contract(cls):
    t = cls()
    assert len(t) == 0
    assert t.add(42)
    assert not t.add(42)
    assert t.contains(42)
    assert not t.contains(43)
    # key 0 shares a slot with key 1 by the empty-slot remap rule
    assert t.add(0)
    assert t.contains(0) and t.contains(1)
    assert not t.add(1)
    keys = [int(k) for k in t.keys()]
    assert keys == [1, 42]
    t.grow()
    assert [int(k) for k in t.keys()] == [1, 42]
    assert len(t) == 2


def test_count_labelings_matches_tape():
    cfg = search.SearchConfig()
    for sk in search.enumerate_skeletons(1, 2):
        tape = search._Tape(sk, cfg)
        for module in BACKENDS.values():
            assert module.count_labelings(tape.choices_off) == tape.n_labelings
