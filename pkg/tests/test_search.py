"""Skeleton enumeration, labeling, fingerprints, and the discovery loop."""

import dataclasses

import numpy as np
import pytest

from _oracles import brute_force_skeletons, multi_canon_key
from odesym import expr as ex
from odesym import odeint as oi
from odesym import search, symmetry

INTRO = oi.OdeSystem.from_strings("intro", ["-y2", "y1"], (1.0, 2.0), (0.0, 3.0))
INDEP = oi.OdeSystem.from_strings(
    "indep", ["sqrt(y1)*t", "y1*y2*t"], (1.0, 2.0), (1.0, 2.0)
)


@pytest.fixture(scope="module")
def intro_ds():
    return oi.build_dataset(INTRO, seed=3)


@pytest.fixture(scope="module")
def indep_ds():
    return oi.build_dataset(INDEP, seed=3)


# ---------------------------------------------------------------------------
# skeleton enumeration


@pytest.mark.parametrize("d,n_ops", [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)])
def test_enumeration_matches_brute_force(d, n_ops):
    stream = list(search.enumerate_skeletons(d, n_ops))
    keys = [multi_canon_key(sk.n_leaves, sk.ops, sk.roots) for sk in stream]
    assert len(set(keys)) == len(keys), "stream emitted an isomorphic duplicate"
    assert set(keys) == brute_force_skeletons(d, n_ops)


def test_skeleton_counts_pinned():
    # d=1 and d=2 counts; small ones equal the brute-force oracle, the
    # larger ones pin the stream against regressions
    for d, expected in [(1, [4, 20, 200, 2800]), (2, [25, 330, 5580])]:
        got = [
            sum(1 for _ in search.enumerate_skeletons(d, n))
            for n in range(len(expected))
        ]
        assert got == expected


def test_skeletons_are_postorder_and_reachable():
    for n in range(4):
        for sk in search.enumerate_skeletons(1, n):
            # children-first numbering: every child slot index is smaller
            for i, (arity, c1, c2) in enumerate(sk.ops):
                for c in (c1, c2)[:arity]:
                    if c >= sk.n_leaves:
                        assert c - sk.n_leaves < i


def test_shared_subgraph_skeleton_exists():
    # two binary roots can share one unary node: the shape behind
    # generators like (t^2*y1, t^2*y2) with a reused square(t)
    hits = []
    for sk in search.enumerate_skeletons(2, 3):
        arities = sorted(a for a, _, _ in sk.ops)
        if arities != [1, 2, 2]:
            continue
        unary = next(i for i, (a, _, _) in enumerate(sk.ops) if a == 1)
        users = sum(
            1
            for a, c1, c2 in sk.ops
            for c in (c1, c2)[:a]
            if c == sk.n_leaves + unary
        )
        if users == 2:
            hits.append(sk)
    assert hits


def test_skeleton_validation_rejects_malformed():
    with pytest.raises(ValueError):
        search.Skeleton(1, ((1, 99, -1),), (4,))  # child out of range
    with pytest.raises(ValueError):
        search.Skeleton(1, ((3, 0, 1),), (4,))  # bad arity
    with pytest.raises(ValueError):
        search.Skeleton(1, ((1, 0, -1),), (0,))  # unreachable slot
    with pytest.raises(ValueError):
        search.Skeleton(2, ((1, 0, -1),), (5,))  # one root for d=2


# ---------------------------------------------------------------------------
# labeling


def test_label_skeleton_unary_choices():
    cfg = search.SearchConfig(operators=("sin", "cos"))
    sk = search.Skeleton(1, ((1, 0, -1),), (4,))  # one unary slot over t
    labeled = [ex.to_str(e) for e in search.label_skeleton(sk, cfg)]
    assert labeled == ["sin(t)", "cos(t)"]


def test_labeling_order_is_mixed_radix():
    # slot 0 is the most significant digit
    cfg = search.SearchConfig(operators=("sin", "cos", "add", "mul"))
    sk = search.Skeleton(1, ((1, 0, -1), (2, 4, 1)), (5,))
    labeled = [ex.to_str(e) for e in search.label_skeleton(sk, cfg)]
    assert labeled == [
        "sin(t) + y1",
        "sin(t)*y1",
        "cos(t) + y1",
        "cos(t)*y1",
    ]


def test_pow_only_on_constant_exponent_slots():
    cfg = search.SearchConfig(operators=("mul", "pow"))
    with_const = search.Skeleton(1, ((2, 1, 3),), (4,))  # y1 ? 2
    names = search._Tape(with_const, cfg).choice_names[0]
    assert names == ["mul", "pow"]
    without = search.Skeleton(1, ((2, 1, 0),), (4,))  # y1 ? t
    names = search._Tape(without, cfg).choice_names[0]
    assert names == ["mul"]
    # exponent 1 is not an allowed pow exponent, so a const-1 right
    # child does not legalize pow
    one_leaf = search.Skeleton(1, ((2, 1, 2),), (4,))  # y1 ? 1
    names = search._Tape(one_leaf, cfg).choice_names[0]
    assert names == ["mul"]


def test_tape_build_round_trips_all_labelings(intro_ds):
    cfg = search.SearchConfig()
    for sk in search.enumerate_skeletons(1, 2):
        tape = search._Tape(sk, cfg)
        for lab in range(min(tape.n_labelings, 20)):
            e = tape.build(sk, lab)
            assert e.n_outputs == 1
            assert ex.count_ops(e) <= 2
    with pytest.raises(ValueError):
        tape.build(sk, tape.n_labelings)


# ---------------------------------------------------------------------------
# fingerprints and probes


def test_fingerprint_merges_semantic_duplicates(intro_ds):
    probes = search.draw_probes(intro_ds, seed=11)
    pairs = [
        ("y1 + y2", "y2 + y1"),
        ("2*y1", "y1 + y1"),
        ("y1*y1", "y1^2"),
    ]
    for a, b in pairs:
        fa = search.fingerprint(ex.parse(a, 2), probes)
        fb = search.fingerprint(ex.parse(b, 2), probes)
        assert fa == fb, (a, b)
    assert search.fingerprint(ex.parse("y1", 2), probes) != search.fingerprint(
        ex.parse("y2", 2), probes
    )


def test_fingerprint_folds_domain_errors(indep_ds):
    # the indep box is strictly positive, so both expressions error on
    # every probe and share the all-error fingerprint
    probes = search.draw_probes(indep_ds, seed=11)
    fa = search.fingerprint(ex.parse("log(0 - y1)", 2), probes)
    fb = search.fingerprint(ex.parse("sqrt(0 - y2 - t)", 2), probes)
    assert fa == fb


def test_draw_probes_in_bounding_box(intro_ds):
    probes = search.draw_probes(intro_ds, seed=5)
    lows, highs = intro_ds.bounding_box()
    assert probes.shape == (search.N_PROBES, 3)
    assert (probes >= np.asarray(lows)).all()
    assert (probes <= np.asarray(highs)).all()
    again = search.draw_probes(intro_ds, seed=5)
    assert np.array_equal(probes, again)
    assert not np.array_equal(probes, search.draw_probes(intro_ds, seed=6))


# ---------------------------------------------------------------------------
# config


def test_search_config_validation():
    with pytest.raises(ValueError):
        search.SearchConfig(max_operator_nodes=-1)
    with pytest.raises(ValueError):
        search.SearchConfig(operators=("add", "nope"))
    with pytest.raises(ValueError):
        search.SearchConfig(operators=("add", "add"))
    with pytest.raises(ValueError):
        search.SearchConfig(trivial_eps=0.0)
    with pytest.raises(ValueError):
        search.SearchConfig(accept_loss=-1.0)
    with pytest.raises(ValueError):
        search.SearchConfig(time_budget=0.0)
    with pytest.raises(ValueError):
        search.SearchConfig(max_generators=0)
    cfg = search.SearchConfig(operators=("sin", "add", "pow"))
    assert cfg.unary_operators == ("sin",)
    assert cfg.binary_operators == ("add", "pow")


# ---------------------------------------------------------------------------
# discovery


def test_discover_intro_scaling_generator(intro_ds):
    res = search.discover(INTRO, intro_ds, search.SearchConfig(max_operator_nodes=1))
    assert len(res.generators) == 1
    g = res.generators[0]
    assert list(ex.component_strs(g.eta_star)) == ["y1", "y2"]
    assert g.loss == 0.0
    assert g.provenance is not None
    # depth-0 skeletons for d=2: 5*5 = 25, searched before any slots
    assert res.skeletons_enumerated <= 25
    assert res.candidates_scored >= 8


def test_discover_provenance_rebuilds_generator(intro_ds):
    res = search.discover(INTRO, intro_ds, search.SearchConfig(max_operator_nodes=1))
    g = res.generators[0]
    cfg = search.SearchConfig(max_operator_nodes=1)
    stream = []
    for n in range(2):
        stream.extend(search.enumerate_skeletons(2, n))
    sk = stream[g.provenance.skeleton_id]
    rebuilt = search._Tape(sk, cfg).build(sk, g.provenance.labeling_id)
    assert ex.component_strs(rebuilt) == ex.component_strs(g.eta_star)


def test_discover_is_deterministic(indep_ds):
    cfg = search.SearchConfig(max_operator_nodes=2, max_generators=2, seed=9)
    a = search.discover(INDEP, indep_ds, cfg)
    b = search.discover(INDEP, indep_ds, cfg)
    oa, ob = a.to_json_obj(), b.to_json_obj()
    oa.pop("wall_time"), ob.pop("wall_time")
    assert oa == ob


def test_discover_finds_independent_pair(indep_ds):
    cfg = search.SearchConfig(max_operator_nodes=2, max_generators=2)
    res = search.discover(INDEP, indep_ds, cfg)
    assert len(res.generators) == 2
    exprs = [g.eta_star for g in res.generators]
    rank, _ = symmetry.independence_rank(exprs, indep_ds)
    assert rank == 2
    for g in res.generators:
        assert g.loss < 1e-10
        assert all(symmetry.symbolic_zero(INDEP, g.eta_star))
        assert not symmetry.is_trivial(g.eta_star, indep_ds)


def test_discover_results_sorted_by_loss(indep_ds):
    cfg = search.SearchConfig(max_operator_nodes=2, max_generators=2)
    res = search.discover(INDEP, indep_ds, cfg)
    losses = [g.loss for g in res.generators]
    assert losses == sorted(losses)


def test_discover_accepts_only_verified(indep_ds):
    # every returned generator re-verifies against the scalar reference
    cfg = search.SearchConfig(max_operator_nodes=2, max_generators=2)
    res = search.discover(INDEP, indep_ds, cfg)
    for g in res.generators:
        assert symmetry.loss(INDEP, g.eta_star, indep_ds) == pytest.approx(
            g.loss, rel=1e-12
        )


def test_discover_numeric_only_mode(intro_ds):
    cfg = search.SearchConfig(max_operator_nodes=1, require_symbolic=False)
    res = search.discover(INTRO, intro_ds, cfg)
    assert [list(ex.component_strs(g.eta_star)) for g in res.generators] == [
        ["y1", "y2"]
    ]


def test_discover_tiny_budget_returns_gracefully(indep_ds):
    cfg = search.SearchConfig(time_budget=1e-9, max_operator_nodes=3)
    res = search.discover(INDEP, indep_ds, cfg)
    assert res.generators == ()
    assert res.wall_time < 60.0


def test_discover_dimension_mismatch(intro_ds):
    one_d = oi.OdeSystem.from_strings("flat", ["y1"], (1.0, 2.0), (0.0, 1.0))
    with pytest.raises(ValueError, match="dimension"):
        search.discover(one_d, intro_ds)


def test_discover_rejects_dataset_outside_domain():
    bad = oi.OdeSystem.from_strings("bad", ["log(y1)", "y2"], (1.0, 2.0), (0.0, 1.0))
    ts = np.tile(np.linspace(0.0, 1.0, 5), (3, 1))
    ys = np.full((3, 5, 2), -1.0)
    ys[:, :, 1] = 1.0
    ds = oi.TrajectoryDataset("bad", ts, ys)
    with pytest.raises(ValueError, match="domain"):
        search.discover(bad, ds)


def test_discover_config_immutable():
    cfg = search.SearchConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 1


def test_search_result_json_shape(intro_ds):
    res = search.discover(INTRO, intro_ds, search.SearchConfig(max_operator_nodes=1))
    obj = res.to_json_obj()
    assert set(obj) == {
        "generators",
        "skeletons_enumerated",
        "candidates_scored",
        "candidates_deduplicated",
        "wall_time",
    }
    gen = obj["generators"][0]
    assert set(gen) == {"eta_star", "loss", "provenance"}
    assert set(gen["provenance"]) == {"skeleton_id", "labeling_id"}
