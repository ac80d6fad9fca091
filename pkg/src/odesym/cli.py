"""Command-line driver: generator discovery, verification, dataset export,
and the benchmark table.

Problem files are flat ``key = value`` text (see :func:`parse_problem_file`);
the twelve built-in systems ship with the package and can be addressed by
bare name (``odesym discover intro``).  Machine-readable results go to
stdout, diagnostics to stderr.  Exit codes are a stable contract: 0 success,
1 input error, 2 numeric failure, 3 search or verification came up empty.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from . import bench, expr, odeint, search, symmetry
from .expr import Expression, ParseError
from .odeint import IntegrationError, OdeSystem, TrajectoryDataset

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_EMPTY = 3


class ProblemFileError(ValueError):
    """Malformed problem file (bad syntax, missing keys, parse failures)."""


@dataclass(frozen=True)
class ProblemFile:
    """A parsed problem definition."""

    name: str
    system: OdeSystem
    known_generator: Optional[Expression]
    transform: Optional[symmetry.CanonicalTransform]


_REQUIRED_KEYS = ("name", "dim", "start_lo", "start_hi", "t0", "t1")


def _parse_scalar(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ProblemFileError(f"{key}: not a number: {raw!r}") from None


def _parse_component(key: str, raw: str, d: int) -> Expression:
    try:
        return expr.parse(raw, d)
    except ParseError as err:
        raise ProblemFileError(f"{key}: {err}") from None


def parse_problem_text(text: str, origin: str = "<string>") -> ProblemFile:
    """Parse ``key = value`` problem text.

    Keys: ``name``, ``dim``, ``f1..fd``, ``start_lo``, ``start_hi``,
    ``t0``, ``t1``; optional ``gen1..gend`` (a known generator) and
    ``r``, ``v``, ``s1..s{d-1}`` (a canonical transform).  ``#`` starts
    a comment; blank lines are skipped.
    """
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ProblemFileError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ProblemFileError(f"{origin}:{lineno}: empty key or value")
        if key in pairs:
            raise ProblemFileError(f"{origin}:{lineno}: duplicate key {key!r}")
        pairs[key] = value

    for key in _REQUIRED_KEYS:
        if key not in pairs:
            raise ProblemFileError(f"{origin}: missing required key {key!r}")
    try:
        d = int(pairs["dim"])
    except ValueError:
        raise ProblemFileError(f"dim: not an integer: {pairs['dim']!r}") from None
    if d < 1:
        raise ProblemFileError("dim must be >= 1")

    f_parts = []
    for k in range(1, d + 1):
        key = f"f{k}"
        if key not in pairs:
            raise ProblemFileError(f"{origin}: missing required key {key!r}")
        f_parts.append(pairs[key])
    try:
        f = expr.parse_system(f_parts, d)
    except ParseError as err:
        raise ProblemFileError(f"f components: {err}") from None

    start = (_parse_scalar("start_lo", pairs["start_lo"]),
             _parse_scalar("start_hi", pairs["start_hi"]))
    interval = (_parse_scalar("t0", pairs["t0"]), _parse_scalar("t1", pairs["t1"]))
    system = OdeSystem(pairs["name"], f, start, interval)

    gen_keys = [f"gen{k}" for k in range(1, d + 1)]
    present = [k for k in gen_keys if k in pairs]
    known = None
    if present:
        if len(present) != d:
            raise ProblemFileError(
                f"{origin}: generator needs all of {gen_keys}, got {present}"
            )
        try:
            known = expr.parse_system([pairs[k] for k in gen_keys], d)
        except ParseError as err:
            raise ProblemFileError(f"generator: {err}") from None

    s_keys = [f"s{k}" for k in range(1, d)]
    t_keys = ["r", "v", *s_keys]
    t_present = [k for k in t_keys if k in pairs]
    transform = None
    if t_present:
        if len(t_present) != len(t_keys):
            raise ProblemFileError(
                f"{origin}: transform needs all of {t_keys}, got {t_present}"
            )
        parts = {k: _parse_component(k, pairs[k], d) for k in t_keys}
        transform = symmetry.CanonicalTransform(
            r=parts["r"], v=parts["v"], s=tuple(parts[k] for k in s_keys)
        )

    known_keys = {"name", "dim", "start_lo", "start_hi", "t0", "t1"}
    known_keys.update(f"f{k}" for k in range(1, d + 1))
    known_keys.update(gen_keys)
    known_keys.update(t_keys)
    stray = sorted(set(pairs) - known_keys)
    if stray:
        raise ProblemFileError(f"{origin}: unknown keys {stray}")

    return ProblemFile(pairs["name"], system, known, transform)


def parse_problem_file(path) -> ProblemFile:
    return parse_problem_text(Path(path).read_text(), origin=str(path))


def bundled_problem_names() -> list[str]:
    root = resources.files("odesym") / "problems"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ode"))


def resolve_problem(spec: str) -> ProblemFile:
    """Load a problem from a path, or by bundled name (``intro``,
    ``ode1``..``ode10``, ``indep``)."""
    path = Path(spec)
    if path.exists():
        return parse_problem_file(path)
    name = spec.lower().removesuffix(".ode")
    candidate = resources.files("odesym") / "problems" / f"{name}.ode"
    if candidate.is_file():
        return parse_problem_text(candidate.read_text(), origin=f"{name}.ode")
    raise ProblemFileError(
        f"no such file or bundled problem: {spec!r} "
        f"(bundled: {', '.join(bundled_problem_names())})"
    )


# ---------------------------------------------------------------------------
# shared flag plumbing


def _add_dataset_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="PRNG seed")
    p.add_argument("--n-traj", type=int, default=None,
                   help="trajectories to integrate (default d+1)")
    p.add_argument("--n-samples", type=int, default=50,
                   help="samples per trajectory")


def _add_search_flags(p: argparse.ArgumentParser):
    p.add_argument("--max-ops", type=int, default=7,
                   help="largest operator-node count searched")
    p.add_argument("--accept-loss", type=float, default=1e-10,
                   help="loss threshold for acceptance")
    p.add_argument("--eps", type=float, default=symmetry.TRIVIAL_EPS,
                   help="triviality threshold on median |eta*|")
    p.add_argument("--time-budget", type=float, default=600.0,
                   help="per-search wall-clock budget in seconds")
    p.add_argument("--max-generators", type=int, default=1,
                   help="stop after this many independent generators")


def _search_config(args) -> search.SearchConfig:
    return search.SearchConfig(
        max_operator_nodes=args.max_ops,
        accept_loss=args.accept_loss,
        trivial_eps=args.eps,
        time_budget=args.time_budget,
        max_generators=args.max_generators,
        seed=args.seed,
    )


def _build_dataset(system: OdeSystem, args) -> TrajectoryDataset:
    return odeint.build_dataset(
        system, n_traj=args.n_traj, n_samples=args.n_samples, seed=args.seed
    )


def _emit(payload: dict, stream=None):
    stream = stream or sys.stdout
    json.dump(payload, stream, indent=2, sort_keys=True)
    stream.write("\n")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# subcommands


def cmd_discover(args) -> int:
    try:
        problem = resolve_problem(args.problem)
    except ProblemFileError as err:
        return _fail(EXIT_INPUT, str(err))
    try:
        dataset = _build_dataset(problem.system, args)
    except IntegrationError as err:
        return _fail(EXIT_NUMERIC, str(err))
    try:
        result = search.discover(problem.system, dataset, _search_config(args))
    except ValueError as err:
        return _fail(EXIT_INPUT, str(err))
    _emit(result.to_json_obj())
    return EXIT_OK if result.generators else EXIT_EMPTY


def _generator_from_args(args, problem: ProblemFile) -> Expression:
    d = problem.system.d
    raw = args.generator
    if raw:
        if len(raw) == 1 and raw[0].lstrip().startswith("["):
            body = raw[0].strip()
            if not body.endswith("]"):
                raise ProblemFileError("generator: missing closing ']'")
            # the grammar has no commas, so top-level splitting is safe
            raw = [part.strip() for part in body[1:-1].split(",")]
        if len(raw) != d:
            raise ProblemFileError(
                f"generator needs {d} components, got {len(raw)}"
            )
        try:
            return expr.parse_system(raw, d)
        except ParseError as err:
            raise ProblemFileError(f"generator: {err}") from None
    if problem.known_generator is not None:
        return problem.known_generator
    raise ProblemFileError(
        "no generator given: pass --generator or add gen1..gend to the file"
    )


def cmd_verify(args) -> int:
    try:
        problem = resolve_problem(args.problem)
        eta_star = _generator_from_args(args, problem)
    except ProblemFileError as err:
        return _fail(EXIT_INPUT, str(err))
    try:
        dataset = _build_dataset(problem.system, args)
    except IntegrationError as err:
        return _fail(EXIT_NUMERIC, str(err))
    # the file transform straightens the file's own generator; it does not
    # apply to a generator passed on the command line
    transform = problem.transform if args.generator is None else None
    report = symmetry.verify_generator(
        problem.system, eta_star, dataset, transform=transform
    )
    _emit(report.to_json_obj())
    return EXIT_OK if report.numeric_loss < args.accept_loss else EXIT_EMPTY


def cmd_bench(args) -> int:
    if not args.all and not args.case:
        return _fail(EXIT_INPUT, "select cases with --all or --case NAME")
    try:
        if args.all:
            cases = bench.registry(self_check_cases=False)
        else:
            cases = [bench.get_case(name) for name in args.case]
    except KeyError as err:
        return _fail(EXIT_INPUT, str(err.args[0]))

    cfg = _search_config(args)

    if args.repeat is not None:
        if args.repeat < 1:
            return _fail(EXIT_INPUT, "--repeat must be >= 1")
        stats = [bench.timing_stats(c, cfg, repeat=args.repeat) for c in cases]
        payload = {
            "timing": [
                {"name": s.name, "n_runs": s.n_runs, "mean_s": s.mean,
                 "ci95_s": s.ci95}
                for s in stats
            ]
        }
        _emit(payload)
        return EXIT_OK

    rows = bench.run_benchmark(cases, cfg)
    if args.csv:
        Path(args.csv).write_text(bench.rows_to_csv(rows))
    if args.markdown:
        Path(args.markdown).write_text(bench.rows_to_markdown(rows))
    payload = bench.rows_to_json_obj(rows, include_timing=args.timing)
    if args.json:
        Path(args.json).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
    else:
        _emit(payload)
    for row in rows:
        if row.status == "error":
            print(f"error: {row.name}: {row.error}", file=sys.stderr)
    if any(row.status == "error" for row in rows):
        return EXIT_NUMERIC
    if any(row.status == "empty" for row in rows):
        return EXIT_EMPTY
    return EXIT_OK


def cmd_dataset(args) -> int:
    try:
        problem = resolve_problem(args.problem)
    except ProblemFileError as err:
        return _fail(EXIT_INPUT, str(err))
    try:
        dataset = _build_dataset(problem.system, args)
    except IntegrationError as err:
        return _fail(EXIT_NUMERIC, str(err))
    wrote = False
    if args.csv:
        dataset.to_csv(args.csv)
        wrote = True
    if args.json:
        dataset.to_json(args.json)
        wrote = True
    if args.plot:
        Path(args.plot).write_text(render_svg(dataset))
        wrote = True
    if not wrote:
        _emit(dataset.to_json_obj())
    return EXIT_OK


# ---------------------------------------------------------------------------
# SVG rendering (hand-rolled: deterministic bytes, no plotting dependency)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W = _H = 480
_MARGIN = 48


def _scale(lo: float, hi: float):
    span = hi - lo
    if span <= 0:
        lo, span = lo - 0.5, 1.0
    inner = _W - 2 * _MARGIN

    def to_px(v):
        return _MARGIN + (v - lo) / span * inner

    return to_px


def _polyline(xs, ys, to_x, to_y, color: str) -> str:
    pts = " ".join(
        f"{to_x(x):.2f},{_H - to_y(y):.2f}" for x, y in zip(xs, ys)
    )
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
        f'points="{pts}"/>'
    )


def render_svg(dataset: TrajectoryDataset) -> str:
    """Static SVG of the dataset: state space for 2-d systems, per-component
    time series otherwise."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    axis = (
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>'
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>'
    )
    label = '<text x="{x}" y="{y}" font-size="12" font-family="monospace">{s}</text>'

    if dataset.d == 2:
        x_all = dataset.ys[:, :, 0]
        y_all = dataset.ys[:, :, 1]
        to_x = _scale(float(x_all.min()), float(x_all.max()))
        to_y = _scale(float(y_all.min()), float(y_all.max()))
        parts.append(axis)
        for i in range(dataset.n_traj):
            color = _PALETTE[i % len(_PALETTE)]
            parts.append(_polyline(x_all[i], y_all[i], to_x, to_y, color))
        parts.append(label.format(x=_W // 2 - 8, y=_H - 14, s="y1"))
        parts.append(label.format(x=10, y=_H // 2, s="y2"))
    else:
        t_all = dataset.ts
        to_x = _scale(float(t_all.min()), float(t_all.max()))
        to_y = _scale(float(dataset.ys.min()), float(dataset.ys.max()))
        parts.append(axis)
        for i in range(dataset.n_traj):
            for k in range(dataset.d):
                color = _PALETTE[(i * dataset.d + k) % len(_PALETTE)]
                parts.append(
                    _polyline(t_all[i], dataset.ys[i, :, k], to_x, to_y, color)
                )
        parts.append(label.format(x=_W // 2 - 4, y=_H - 14, s="t"))
        parts.append(label.format(x=10, y=_H // 2, s="y"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odesym",
        description="Find and verify Lie point symmetry generators of "
        "first-order ODE systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="search for symmetry generators")
    p.add_argument("problem", help="problem file path or bundled name")
    _add_dataset_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("verify", help="verify a generator against a problem")
    p.add_argument("problem", help="problem file path or bundled name")
    p.add_argument("--generator", nargs="+", default=None,
                   help="generator components (d strings, or one '[a, b]')")
    p.add_argument("--accept-loss", type=float, default=1e-10,
                   help="numeric loss threshold for exit code 0")
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="run the benchmark table")
    p.add_argument("--all", action="store_true", help="run all 12 cases")
    p.add_argument("--case", action="append", default=[],
                   help="run one named case (repeatable)")
    p.add_argument("--repeat", type=int, default=None,
                   help="repeated-run timing stats instead of discovery rows")
    p.add_argument("--json", default=None, help="write JSON rows to a file")
    p.add_argument("--csv", default=None, help="write CSV rows to a file")
    p.add_argument("--markdown", default=None,
                   help="write a Markdown table to a file")
    p.add_argument("--timing", action="store_true",
                   help="include wall times in the JSON payload")
    _add_dataset_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dataset", help="integrate and export a dataset")
    p.add_argument("problem", help="problem file path or bundled name")
    p.add_argument("--csv", default=None, help="write trajectory CSV")
    p.add_argument("--json", default=None, help="write trajectory JSON")
    p.add_argument("--plot", default=None, help="write a static SVG plot")
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_dataset)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
