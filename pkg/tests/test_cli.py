"""Problem files, CLI subcommands, exit codes, and JSON schema conformance."""

import json
from importlib import resources

import jsonschema
import pytest

from odesym import bench, cli, expr, odeint

GOOD_TEXT = """\
# circular motion
name = demo
dim = 2
f1 = -y2
f2 = y1
start_lo = 1.0
start_hi = 2.0
t0 = 0.0
t1 = 3.0
gen1 = y1
gen2 = y2
r = t
v = log(y1) + y2/y1
s1 = y2/y1
"""


def _schema(name):
    path = resources.files("odesym") / "schemas" / f"{name}.schema.json"
    return json.loads(path.read_text())


def _check(payload, schema_name):
    jsonschema.validate(payload, _schema(schema_name))


# ---------------------------------------------------------------------------
# problem files


def test_parse_problem_text_complete():
    p = cli.parse_problem_text(GOOD_TEXT)
    assert p.name == "demo"
    assert p.system.d == 2
    assert expr.component_strs(p.system.f) == ["-y2", "y1"]
    assert p.system.start_range == (1.0, 2.0)
    assert p.system.time_interval == (0.0, 3.0)
    assert expr.component_strs(p.known_generator) == ["y1", "y2"]
    assert p.transform is not None
    assert len(p.transform.s) == 1


@pytest.mark.parametrize(
    "mutation,fragment",
    [
        (lambda t: t.replace("dim = 2\n", ""), "missing required key 'dim'"),
        (lambda t: t.replace("f2 = y1\n", ""), "missing required key 'f2'"),
        (lambda t: t.replace("f1 = -y2", "f1 = -y3"), "dimension"),
        (lambda t: t.replace("f1 = -y2", "f1 = -y2 +"), "position"),
        (lambda t: t.replace("gen2 = y2\n", ""), "generator needs all of"),
        (lambda t: t.replace("s1 = y2/y1\n", ""), "transform needs all of"),
        (lambda t: t + "name = again\n", "duplicate key"),
        (lambda t: t + "mystery = 3\n", "unknown keys"),
        (lambda t: t + "just a line\n", "expected 'key = value'"),
        (lambda t: t.replace("dim = 2", "dim = x"), "not an integer"),
        (lambda t: t.replace("t0 = 0.0", "t0 = soon"), "not a number"),
    ],
)
def test_parse_problem_text_errors(mutation, fragment):
    with pytest.raises(cli.ProblemFileError, match=fragment):
        cli.parse_problem_text(mutation(GOOD_TEXT))


def test_bundled_problems_match_registry():
    assert set(cli.bundled_problem_names()) == {n.lower() for n in bench.case_names()}
    for case in bench.registry(self_check_cases=False):
        p = cli.resolve_problem(case.name)
        assert expr.component_strs(p.system.f) == expr.component_strs(case.system.f)
        assert p.system.start_range == case.system.start_range
        assert p.system.time_interval == case.system.time_interval
        assert p.known_generator is not None


def test_resolve_problem_path_vs_name(tmp_path):
    path = tmp_path / "x.ode"
    path.write_text(GOOD_TEXT)
    assert cli.resolve_problem(str(path)).name == "demo"
    assert cli.resolve_problem("intro").name == "intro"
    assert cli.resolve_problem("ODE3.ode").name == "ODE3"
    with pytest.raises(cli.ProblemFileError, match="bundled"):
        cli.resolve_problem("missing.ode")


# ---------------------------------------------------------------------------
# discover


def test_discover_bundled_intro(capsys):
    code = cli.main(["discover", "intro", "--max-ops", "1"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "search_result")
    assert payload["generators"][0]["eta_star"] == ["y1", "y2"]


def test_discover_exhausted_is_exit_3(capsys):
    # depth-0 leaves cannot satisfy this system, so the search comes
    # back empty within the allowed size
    code = cli.main(["discover", "ode6", "--max-ops", "0"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_EMPTY
    assert payload["generators"] == []


def test_discover_malformed_file(tmp_path, capsys):
    path = tmp_path / "bad.ode"
    path.write_text(GOOD_TEXT.replace("f1 = -y2", "f1 = -y2 +"))
    code = cli.main(["discover", str(path)])
    captured = capsys.readouterr()
    assert code == cli.EXIT_INPUT
    assert captured.out == ""
    assert "position" in captured.err


def test_integration_failure_is_exit_2(tmp_path, capsys):
    # quadratic growth escapes to infinity well before t = 5
    path = tmp_path / "explode.ode"
    path.write_text(
        "name = explode\ndim = 2\nf1 = y1^2*y2*exp(y1^-1)\nf2 = t*exp(-y1^-1)\n"
        "start_lo = 1\nstart_hi = 2\nt0 = 0\nt1 = 5\n"
    )
    code = cli.main(["dataset", str(path)])
    captured = capsys.readouterr()
    assert code == cli.EXIT_NUMERIC
    assert "error" in captured.err


# ---------------------------------------------------------------------------
# verify


def test_verify_known_rotation_generator(capsys):
    code = cli.main(["verify", "intro", "--generator", "[cos(t), sin(t)]"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "verification_report")
    assert payload["numeric_loss"] < 1e-20
    assert payload["symbolic_zero"] == [True, True]
    assert "canonical_violations" not in payload


def test_verify_file_generator_with_transform(capsys):
    code = cli.main(["verify", "intro"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "verification_report")
    viol = payload["canonical_violations"]["max_violation"]
    assert set(viol) == {"r", "v", "s1"}
    assert all(v < 1e-10 for v in viol.values())


def test_verify_translation_fails_numerically(capsys):
    code = cli.main(["verify", "intro", "--generator", "1", "0"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_EMPTY
    assert payload["numeric_loss"] == pytest.approx(0.5, abs=1e-12)


def test_verify_generator_argument_errors(capsys):
    assert cli.main(["verify", "intro", "--generator", "y1"]) == cli.EXIT_INPUT
    assert (
        cli.main(["verify", "intro", "--generator", "[y1, y2"]) == cli.EXIT_INPUT
    )
    assert (
        cli.main(["verify", "intro", "--generator", "y1", "y++2"]) == cli.EXIT_INPUT
    )
    path_free = cli.main(["verify", "ode1", "--generator", "[y1, y2]"])
    assert path_free == cli.EXIT_OK
    capsys.readouterr()


def test_verify_without_any_generator(tmp_path, capsys):
    path = tmp_path / "nogen.ode"
    path.write_text(
        "name = nogen\ndim = 2\nf1 = -y2\nf2 = y1\n"
        "start_lo = 1\nstart_hi = 2\nt0 = 0\nt1 = 3\n"
    )
    code = cli.main(["verify", str(path)])
    captured = capsys.readouterr()
    assert code == cli.EXIT_INPUT
    assert "no generator given" in captured.err


# ---------------------------------------------------------------------------
# bench


def test_bench_requires_selection(capsys):
    assert cli.main(["bench"]) == cli.EXIT_INPUT
    capsys.readouterr()


def test_bench_unknown_case(capsys):
    code = cli.main(["bench", "--case", "nonexistent"])
    captured = capsys.readouterr()
    assert code == cli.EXIT_INPUT
    assert "unknown case" in captured.err


def test_bench_single_case_outputs(tmp_path, capsys):
    json_path = tmp_path / "rows.json"
    csv_path = tmp_path / "rows.csv"
    md_path = tmp_path / "rows.md"
    code = cli.main(
        [
            "bench", "--case", "intro", "--max-ops", "2", "--seed", "42",
            "--json", str(json_path), "--csv", str(csv_path),
            "--markdown", str(md_path),
        ]
    )
    capsys.readouterr()
    assert code == cli.EXIT_OK
    payload = json.loads(json_path.read_text())
    _check(payload, "bench_rows")
    assert payload["rows"][0]["status"] == "ok"
    assert "wall_time" not in payload["rows"][0]
    assert csv_path.read_text().startswith("name,")
    assert md_path.read_text().startswith("| Problem |")


def test_bench_timing_flag(capsys):
    code = cli.main(
        ["bench", "--case", "intro", "--max-ops", "1", "--timing"]
    )
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "bench_rows")
    assert payload["rows"][0]["wall_time"] > 0


def test_bench_repeat_mode(capsys):
    code = cli.main(
        ["bench", "--case", "intro", "--max-ops", "1", "--repeat", "2"]
    )
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "bench_timing")
    entry = payload["timing"][0]
    assert entry["name"] == "intro"
    assert entry["n_runs"] == 2


# ---------------------------------------------------------------------------
# dataset


def test_dataset_stdout_json(capsys):
    code = cli.main(["dataset", "intro", "--seed", "5"])
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    _check(payload, "dataset")
    assert payload["n_traj"] == 3
    assert payload["n_samples"] == 50


def test_dataset_file_exports(tmp_path, capsys):
    csv_path = tmp_path / "ds.csv"
    json_path = tmp_path / "ds.json"
    svg_path = tmp_path / "ds.svg"
    argv = [
        "dataset", "ode1", "--seed", "7",
        "--csv", str(csv_path), "--json", str(json_path), "--plot", str(svg_path),
    ]
    assert cli.main(argv) == cli.EXIT_OK
    assert capsys.readouterr().out == ""  # files requested, stdout quiet

    rows = csv_path.read_text().strip().splitlines()
    assert rows[0] == "traj_id,t,y1,y2"
    assert len(rows) == 1 + 3 * 50
    loaded = odeint.TrajectoryDataset.from_csv(csv_path)
    assert loaded.n_traj == 3 and loaded.n_samples == 50

    _check(json.loads(json_path.read_text()), "dataset")

    svg = svg_path.read_text()
    assert svg.startswith("<svg ")
    assert svg.count("<polyline") == 3  # state-space curve per trajectory


def test_dataset_determinism(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert cli.main(["dataset", "ode3", "--seed", "9", "--csv", str(a)]) == 0
    assert cli.main(["dataset", "ode3", "--seed", "9", "--csv", str(b)]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()


def test_dataset_flags_reach_builder(capsys):
    code = cli.main(
        ["dataset", "intro", "--n-traj", "4", "--n-samples", "10"]
    )
    payload = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    assert payload["n_traj"] == 4
    assert payload["n_samples"] == 10


def test_render_svg_time_series_layout():
    one_d = odeint.OdeSystem.from_strings("flat", ["-y1"], (1.0, 2.0), (0.0, 1.0))
    ds = odeint.build_dataset(one_d, n_traj=2, n_samples=8, seed=1)
    svg = cli.render_svg(ds)
    assert svg.count("<polyline") == 2  # one per trajectory, d=1
