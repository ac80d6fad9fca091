"""Throughput comparison of the scoring-kernel backends.

Sweeps every skeleton up to a given operator count over one benchmark
system and times the compiled and pure-Python kernels on the identical
workload.  Both backends run the same staged scorer (probe fingerprints,
dedup, full-dataset loss), so the ratio isolates the compiled core.

Usage::

    python3 benchmarks/kernel_speed.py [--case intro] [--max-ops 2] [--repeat 3]
"""

import argparse
import time

import numpy as np

from odesym import _kernels, bench, expr, odeint, search


def build_workload(case_name: str, seed: int):
    case = bench.get_case(case_name)
    ds = odeint.build_dataset(case.system, seed=seed)
    T, Y = ds.flat_points()
    T = np.ascontiguousarray(T)
    Y = np.ascontiguousarray(Y)
    F, GF_full, err = expr.gradient_batch(case.system.f, T, Y)
    if err.any():
        raise RuntimeError("dataset contains points outside the domain of f")
    probes = search.draw_probes(ds, seed)
    return {
        "system": case.system,
        "T": T,
        "Y": Y,
        "F": np.ascontiguousarray(F),
        "GF": np.ascontiguousarray(GF_full[:, :, 1:]),
        "probes_t": np.ascontiguousarray(probes[:, 0]),
        "probes_y": np.ascontiguousarray(probes[:, 1:]),
    }


def sweep(workload, module, cfg, max_ops: int):
    """Score every labeling of every skeleton once; returns (labelings,
    accepted, seconds)."""
    table = module.DedupTable()
    deadline = time.monotonic() + 1e9
    choice_cache = {}
    out_bufs = (np.empty(4096, dtype=np.int64), np.empty(4096, dtype=np.float64))
    labelings = 0
    accepted = 0
    start = time.perf_counter()
    for n_ops in range(max_ops + 1):
        for sk in search.enumerate_skeletons(workload["system"].d, n_ops):
            tape = search._Tape(sk, cfg, choice_cache)
            ids, _, counters, exhausted = _kernels.run_scoring(
                tape.code, tape.a1, tape.a2, tape.cval, tape.slot_pos,
                tape.choices_flat, tape.choices_off, tape.roots,
                workload["probes_t"], workload["probes_y"],
                workload["T"], workload["Y"], workload["F"], workload["GF"],
                cfg.trivial_eps, cfg.accept_loss, table, deadline,
                module=module, out_bufs=out_bufs,
            )
            if exhausted:
                raise RuntimeError("sweep hit a kernel limit; raise capacities")
            labelings += counters[0] + counters[1]
            accepted += len(ids)
    return labelings, accepted, time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--case", default="intro",
                        help="benchmark system to sweep (default intro)")
    parser.add_argument("--max-ops", type=int, default=2,
                        help="largest operator-node count swept (default 2)")
    parser.add_argument("--repeat", type=int, default=3,
                        help="timed repetitions; the fastest is reported")
    parser.add_argument("--seed", type=int, default=7, help="dataset seed")
    args = parser.parse_args()

    workload = build_workload(args.case, args.seed)
    cfg = search.SearchConfig(accept_loss=1e-8)

    print(f"case={args.case}  max_ops={args.max_ops}  repeat={args.repeat}")
    print(f"{'backend':<10} {'labelings':>10} {'accepted':>9} "
          f"{'best (s)':>9} {'rate (1/s)':>12}")
    rates = {}
    for name, module in _kernels.available_backends().items():
        best = None
        for _ in range(args.repeat):
            labelings, accepted, dt = sweep(workload, module, cfg, args.max_ops)
            if best is None or dt < best[2]:
                best = (labelings, accepted, dt)
        labelings, accepted, dt = best
        rates[name] = labelings / dt
        print(f"{name:<10} {labelings:>10} {accepted:>9} {dt:>9.3f} "
              f"{rates[name]:>12.0f}")
    if {"compiled", "fallback"} <= rates.keys():
        print(f"speedup: compiled is {rates['compiled'] / rates['fallback']:.1f}x "
              f"the fallback rate")


if __name__ == "__main__":
    main()
