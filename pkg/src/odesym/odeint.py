"""ODE systems, adaptive Runge-Kutta integration, trajectory datasets.

The integrator is a Dormand-Prince 5(4) pair with a quartic dense-output
interpolant, written out explicitly so fixed-step convergence order and
bitwise run-to-run determinism are under this package's control.  Sampled
trajectories feed the symmetry loss, so integration tolerances default to
several orders below the candidate acceptance threshold.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction as F

import numpy as np

from . import expr as ex
from ._rng import SplitMix64


class IntegrationError(RuntimeError):
    """Integration could not be completed (step underflow, domain exit,
    or step budget exhausted)."""


@dataclass(frozen=True)
class OdeSystem:
    """Autonomous-in-form first-order system y' = f(t, y).

    ``f`` is a multi-output expression (one root per component).
    ``start_range`` bounds each initial-condition component; ``time_interval``
    is the default integration window.
    """

    name: str
    f: ex.Expression
    start_range: tuple
    time_interval: tuple

    def __post_init__(self):
        if self.f.n_outputs < 1:
            raise ValueError("system must have at least one component")
        if self.f.max_variable() > self.f.n_outputs:
            raise ValueError("f references a variable beyond the system dimension")
        lo, hi = self.start_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError("start_range must be a finite (lo, hi) with lo < hi")
        t0, t1 = self.time_interval
        if not (math.isfinite(t0) and math.isfinite(t1) and t0 < t1):
            raise ValueError("time_interval must be a finite (t0, t1) with t0 < t1")

    @property
    def d(self) -> int:
        return self.f.n_outputs

    @classmethod
    def from_strings(cls, name, components, start_range, time_interval):
        f = ex.parse_system(components, len(components))
        return cls(name, f, tuple(start_range), tuple(time_interval))


# Dormand-Prince 5(4) tableau; the propagated solution is the fifth-order
# row, and E is the difference against the embedded fourth-order row.
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array(
    [
        [0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    ]
)
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = np.array(
    [71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
# dense-output polynomial: y(t0 + theta*h) = y0 + h * K^T (P @ [theta..theta^4])
_P = np.array(
    [
        [
            1,
            float(F(-8048581381, 2820520608)),
            float(F(8663915743, 2820520608)),
            float(F(-12715105075, 11282082432)),
        ],
        [0, 0, 0, 0],
        [
            0,
            float(F(131558114200, 32700410799)),
            float(F(-68118460800, 10900136933)),
            float(F(87487479700, 32700410799)),
        ],
        [
            0,
            float(F(-1754552775, 470086768)),
            float(F(14199869525, 1410260304)),
            float(F(-10690763975, 1880347072)),
        ],
        [
            0,
            float(F(127303824393, 49829197408)),
            float(F(-318862633887, 49829197408)),
            float(F(701980252875, 199316789632)),
        ],
        [
            0,
            float(F(-282668133, 205662961)),
            float(F(2019193451, 616988883)),
            float(F(-1453857185, 822651844)),
        ],
        [
            0,
            float(F(40617522, 29380423)),
            float(F(-110615467, 29380423)),
            float(F(69997945, 29380423)),
        ],
    ]
)


def _scalar_evaluator(e: ex.Expression):
    """Fast list-based tape evaluator for the right-hand side.

    Returns eval(t, y) -> list of component values; raises
    :class:`~odesym.expr.DomainError` outside the domain.
    """
    tape = ex.compile_tape(e)
    prog = list(
        zip(tape.code.tolist(), tape.a1.tolist(), tape.a2.tolist(), tape.cval.tolist())
    )
    roots = tape.roots.tolist()
    guard = ex.DIV_GUARD

    def evaluate(t, y):
        vals = []
        append = vals.append
        for code, a1, a2, cv in prog:
            if code == ex.OP_VAR:
                v = t if a1 == 0 else y[a1 - 1]
            elif code == ex.OP_CONST:
                v = cv
            elif code == ex.OP_ADD:
                v = vals[a1] + vals[a2]
            elif code == ex.OP_SUB:
                v = vals[a1] - vals[a2]
            elif code == ex.OP_MUL:
                v = vals[a1] * vals[a2]
            elif code == ex.OP_DIV:
                den = vals[a2]
                if abs(den) < guard:
                    raise ex.DomainError("division by ~0")
                v = vals[a1] / den
            elif code == ex.OP_POW:
                v = ex._eval_pow(vals[a1], cv)
            else:
                v = ex._eval_unary(ex.UNARY_OPS[code - ex.OP_NEG], vals[a1])
            if not math.isfinite(v):
                raise ex.DomainError("non-finite intermediate value")
            append(v)
        return [vals[r] for r in roots]

    return evaluate


def integrate(
    system: OdeSystem,
    y0,
    t0: float = None,
    t1: float = None,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    n_samples: int = 50,
    fixed_step: float = None,
    max_steps: int = 500_000,
):
    """Integrate from ``y0`` over [t0, t1] and return dense samples.

    Returns ``(ts, ys)`` with ``ts`` the ``n_samples`` equally spaced times
    (endpoints included) and ``ys`` of shape (n_samples, d), interpolated
    from the integrator's quartic dense output.  With ``fixed_step`` the
    step size is held constant (for convergence-order measurements) and the
    error estimate is ignored.

    Raises :class:`IntegrationError` when the solution leaves the domain of
    ``f``, the step size underflows (finite-time blow-up), or ``max_steps``
    is exceeded.
    """
    if t0 is None:
        t0 = system.time_interval[0]
    if t1 is None:
        t1 = system.time_interval[1]
    if not t1 > t0:
        raise ValueError("require t1 > t0")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    d = system.d
    y = np.asarray(y0, dtype=float)
    if y.shape != (d,):
        raise ValueError(f"y0 must have shape ({d},)")

    f = _scalar_evaluator(system.f)

    def f_vec(t, yv):
        return np.array(f(t, yv.tolist()), dtype=float)

    ts_out = np.linspace(t0, t1, n_samples)
    ys_out = np.empty((n_samples, d))
    ys_out[0] = y
    next_out = 1

    t = t0
    try:
        k1 = f_vec(t, y)
    except ex.DomainError as err:
        raise IntegrationError(f"initial point outside domain: {err}") from None

    if fixed_step is not None:
        if not 0 < fixed_step <= t1 - t0:
            raise ValueError("fixed_step must lie in (0, t1 - t0]")
        h = float(fixed_step)
    else:
        # conservative first step from the initial slope
        scale = atol + rtol * np.abs(y)
        d0 = math.sqrt(float(np.mean((y / scale) ** 2)))
        d1 = math.sqrt(float(np.mean((k1 / scale) ** 2)))
        h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
        h = min(h, (t1 - t0) / 10.0)

    K = np.empty((7, d))
    steps = 0
    while t < t1:
        if steps >= max_steps:
            raise IntegrationError(f"exceeded {max_steps} steps at t={t!r}")
        steps += 1
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError(f"step size underflow at t={t!r}")
        final = h >= t1 - t
        if final:
            h = t1 - t

        K[0] = k1
        try:
            for i in range(1, 6):
                yi = y + h * (K[:i].T @ _A[i, :i])
                K[i] = f_vec(t + _C[i] * h, yi)
            y_new = y + h * (K[:6].T @ _B[:6])
            K[6] = f_vec(t + h, y_new)
        except ex.DomainError:
            if fixed_step is not None:
                raise IntegrationError(
                    f"trajectory left the domain of f near t={t!r}"
                ) from None
            h *= 0.5
            continue

        if fixed_step is None:
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(float(np.mean(((K.T @ _E) * h / scale) ** 2)))
            if err > 1.0:
                h *= max(0.2, 0.9 * err**-0.2)
                continue
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err**-0.2))
        else:
            factor = 1.0

        # emit dense samples covered by this accepted step; t + h can round
        # below t1 on the last step, so finalize t exactly
        t_new = t1 if final else t + h
        while next_out < n_samples and ts_out[next_out] <= t_new + 1e-14 * max(
            1.0, abs(t_new)
        ):
            theta = (ts_out[next_out] - t) / h
            theta = min(max(theta, 0.0), 1.0)
            if theta == 1.0:
                ys_out[next_out] = y_new
            else:
                powers = np.array([theta, theta**2, theta**3, theta**4])
                ys_out[next_out] = y + h * (K.T @ (_P @ powers))
            next_out += 1

        t = t_new
        y = y_new
        k1 = K[6]  # first-same-as-last
        h *= factor

    if next_out < n_samples:  # end hit exactly by the last step
        ys_out[next_out:] = y
        next_out = n_samples
    if not np.all(np.isfinite(ys_out)):
        raise IntegrationError("non-finite values in sampled trajectory")
    return ts_out, ys_out


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class TrajectoryDataset:
    """Dense samples of several trajectories of one system.

    ``ts`` has shape (n_traj, n_samples) and is strictly increasing along
    each row; ``ys`` has shape (n_traj, n_samples, d).  At least d + 1
    trajectories are required: fewer cannot pin down a generator component
    that varies across trajectories (identifiability).
    """

    system_name: str
    ts: np.ndarray
    ys: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ts, ys = np.asarray(self.ts, float), np.asarray(self.ys, float)
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "ys", ys)
        if ts.ndim != 2 or ys.ndim != 3 or ys.shape[:2] != ts.shape:
            raise ValueError("ts must be (n_traj, n_samples), ys (n_traj, n_samples, d)")
        if not (np.isfinite(ts).all() and np.isfinite(ys).all()):
            raise ValueError("dataset contains non-finite values")
        if not (np.diff(ts, axis=1) > 0).all():
            raise ValueError("t must be strictly increasing within each trajectory")
        if self.n_traj < self.d + 1:
            raise ValueError(
                f"need at least d+1 = {self.d + 1} trajectories, got {self.n_traj}"
            )

    @property
    def n_traj(self) -> int:
        return self.ts.shape[0]

    @property
    def n_samples(self) -> int:
        return self.ts.shape[1]

    @property
    def d(self) -> int:
        return self.ys.shape[2]

    @property
    def n_points(self) -> int:
        return self.n_traj * self.n_samples

    def flat_points(self):
        """All samples as flat arrays: (T (n,), Y (n, d))."""
        return self.ts.reshape(-1), self.ys.reshape(-1, self.ys.shape[2])

    def bounding_box(self):
        """(lows, highs) over (t, y1..yd) across all samples."""
        T, Y = self.flat_points()
        pts = np.column_stack([T, Y])
        return pts.min(axis=0), pts.max(axis=0)

    # -- serialization ------------------------------------------------------

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["traj_id", "t"] + [f"y{k + 1}" for k in range(self.d)])
            for i in range(self.n_traj):
                for j in range(self.n_samples):
                    row = [i, repr(float(self.ts[i, j]))]
                    row += [repr(float(v)) for v in self.ys[i, j]]
                    writer.writerow(row)

    @classmethod
    def from_csv(cls, path, system_name="", metadata=None):
        rows: dict = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["traj_id", "t"]:
                raise ValueError("expected header starting with traj_id,t")
            for rec in reader:
                rows.setdefault(int(rec[0]), []).append([float(v) for v in rec[1:]])
        if not rows:
            raise ValueError("empty dataset file")
        data = [rows[k] for k in sorted(rows)]
        arr = np.array(data, dtype=float)
        return cls(system_name, arr[:, :, 0], arr[:, :, 1:], metadata or {})

    def to_json_obj(self) -> dict:
        return {
            "system": self.system_name,
            "d": self.d,
            "n_traj": self.n_traj,
            "n_samples": self.n_samples,
            "metadata": self.metadata,
            "trajectories": [
                {
                    "t": [float(v) for v in self.ts[i]],
                    "y": [[float(v) for v in row] for row in self.ys[i]],
                }
                for i in range(self.n_traj)
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        ts = np.array([traj["t"] for traj in obj["trajectories"]], dtype=float)
        ys = np.array([traj["y"] for traj in obj["trajectories"]], dtype=float)
        return cls(obj["system"], ts, ys, obj.get("metadata", {}))


def build_dataset(
    system: OdeSystem,
    n_traj: int = None,
    n_samples: int = 50,
    seed: int = 0,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    max_retries: int = 25,
) -> TrajectoryDataset:
    """Integrate ``n_traj`` trajectories from seeded uniform random starts.

    Initial conditions are drawn component-wise from ``system.start_range``
    with a splitmix64 stream, so datasets are bit-reproducible for a given
    seed.  Trajectories whose integration fails (blow-up, domain exit) are
    redrawn, up to ``max_retries`` extra draws across the whole dataset.
    """
    d = system.d
    if n_traj is None:
        n_traj = d + 1
    if n_traj < d + 1:
        raise ValueError(f"n_traj must be at least d+1 = {d + 1}")
    rng = SplitMix64(seed)
    lo, hi = system.start_range
    t0, t1 = system.time_interval
    ts = np.empty((n_traj, n_samples))
    ys = np.empty((n_traj, n_samples, d))
    retries = 0
    i = 0
    while i < n_traj:
        y0 = [rng.uniform(lo, hi) for _ in range(d)]
        try:
            ts[i], ys[i] = integrate(
                system, y0, t0, t1, rtol=rtol, atol=atol, n_samples=n_samples
            )
        except IntegrationError as err:
            retries += 1
            if retries > max_retries:
                raise IntegrationError(
                    f"gave up on {system.name!r} after {max_retries} redraws: {err}"
                ) from None
            continue
        i += 1
    metadata = {
        "seed": seed,
        "rtol": rtol,
        "atol": atol,
        "start_range": [lo, hi],
        "time_interval": [t0, t1],
        "redraws": retries,
    }
    return TrajectoryDataset(system.name, ts, ys, metadata)
