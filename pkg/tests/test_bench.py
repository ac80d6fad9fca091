"""Benchmark registry, self-checks, the run harness, and serializers."""

import json

import pytest

from odesym import bench, expr, search, symmetry

EXPECTED_NAMES = [
    "ODE1", "ODE2", "ODE3", "ODE4", "ODE5", "ODE6", "ODE7", "ODE8",
    "ODE9", "ODE10", "intro", "indep",
]


@pytest.fixture(scope="module")
def cases():
    return bench.registry()  # self-check included


def test_registry_has_twelve_cases(cases):
    assert [c.name for c in cases] == EXPECTED_NAMES
    assert bench.case_names() == EXPECTED_NAMES


def test_known_generators_self_check(cases):
    # registry() already ran the check; assert the numbers directly too
    for case in cases:
        ds = case.default_dataset()
        for g in case.known_generators:
            assert symmetry.loss(case.system, g, ds) < 1e-10
            assert all(symmetry.symbolic_zero(case.system, g))


def test_case_settings_match_published_table(cases):
    by_name = {c.name: c for c in cases}
    assert by_name["ODE4"].system.start_range == (1.0, 2.0)
    assert by_name["ODE4"].system.time_interval == (1.0, 2.0)
    f4 = expr.component_strs(by_name["ODE4"].system.f)
    assert f4 == ["t^-1*(2*y1 + y2*exp(-y1*t^-2))", "y2"]
    gen4 = expr.component_strs(by_name["ODE4"].known_generators[0])
    assert gen4 == ["t^2", "y2"]
    assert by_name["ODE8"].system.start_range == (-1.0, 0.0)
    assert by_name["ODE8"].system.time_interval == (-1.0, 0.0)
    assert by_name["intro"].known_generators[0] is not None
    assert expr.component_strs(by_name["intro"].known_generators[0]) == ["y1", "y2"]
    assert len(by_name["indep"].known_generators) == 2


def test_default_dataset_cached(cases):
    case = cases[0]
    assert case.default_dataset() is case.default_dataset()


def test_self_check_rejects_wrong_generator():
    case = bench.get_case("ODE1")
    broken = bench.BenchmarkCase(
        name=case.name,
        system=case.system,
        known_generators=(expr.parse_system(["t", "t"], 2),),
    )
    with pytest.raises(RuntimeError, match="loss"):
        bench.self_check(broken)


def test_get_case_lookup():
    assert bench.get_case("ode3").name == "ODE3"
    with pytest.raises(KeyError):
        bench.get_case("nonexistent")


def test_run_case_finds_generator():
    cfg = search.SearchConfig(max_operator_nodes=2, seed=42)
    row = bench.run_case(bench.get_case("intro"), cfg)
    assert row.status == "ok"
    assert row.generators == (("y1", "y2"),)
    assert row.losses[0] < 1e-10
    assert row.symbolic == ((True, True),)
    assert row.wall_time > 0


def test_run_case_error_becomes_row():
    # a system that blows up before its interval ends cannot build a
    # dataset; the harness reports it instead of raising
    bad_system = bench.get_case("ODE2").system
    bad = bench.BenchmarkCase(
        name="blowup",
        system=type(bad_system)(
            "blowup", bad_system.f, (1.0, 2.0), (0.0, 5.0)
        ),
        known_generators=(),
    )
    row = bench.run_case(bad, search.SearchConfig(max_operator_nodes=1))
    assert row.status == "error"
    assert "IntegrationError" in row.error


def test_run_benchmark_empty_subset():
    assert bench.run_benchmark([]) == []
    assert bench.rows_to_json_obj([]) == {"rows": []}
    assert bench.rows_to_csv([]).startswith("name,")
    assert bench.rows_to_markdown([]).count("\n") == 2


@pytest.fixture(scope="module")
def sample_rows():
    cfg = search.SearchConfig(max_operator_nodes=2, seed=42)
    subset = [bench.get_case("intro"), bench.get_case("ODE1")]
    return bench.run_benchmark(subset, cfg)


def test_rows_json_deterministic(sample_rows):
    a = bench.rows_to_json(sample_rows)
    b = bench.rows_to_json(sample_rows)
    assert a == b
    obj = json.loads(a)
    assert [r["name"] for r in obj["rows"]] == ["intro", "ODE1"]
    assert all("wall_time" not in r for r in obj["rows"])
    timed = json.loads(bench.rows_to_json(sample_rows, include_timing=True))
    assert all("wall_time" in r for r in timed["rows"])


def test_rows_csv_layout(sample_rows):
    lines = bench.rows_to_csv(sample_rows).strip().splitlines()
    assert lines[0] == "name,status,generators,loss,symbolic_zero,wall_time_s"
    assert len(lines) == 3
    assert lines[1].startswith("intro,ok,")


def test_rows_markdown_layout(sample_rows):
    md = bench.rows_to_markdown(sample_rows)
    lines = md.strip().splitlines()
    assert lines[0].startswith("| Problem |")
    assert len(lines) == 4
    assert "[y1, y2]" in lines[2]


def test_timing_stats_shape():
    cfg = search.SearchConfig(max_operator_nodes=1, seed=0)
    stats = bench.timing_stats(bench.get_case("intro"), cfg, repeat=2)
    assert stats.n_runs == 2
    assert stats.mean > 0
    assert stats.ci95 >= 0
    single = bench.timing_stats(bench.get_case("intro"), cfg, repeat=1)
    assert single.ci95 == 0.0
    with pytest.raises(ValueError):
        bench.timing_stats(bench.get_case("intro"), cfg, repeat=0)
