"""Symmetry conditions for first-order ODE systems.

A point symmetry generator X = xi d/dt + sum_k eta_k d/dy_k maps solutions
of y' = f(t, y) to solutions.  Subtracting the flow's own generator
(xi = 1, eta = f) leaves the non-trivial part eta* = eta - xi*f, which
satisfies the reduced linear identity, one component per k:

    S_k(t, y) = d(eta*_k)/dt + sum_j d(eta*_k)/dy_j f_j
              - sum_j d(f_k)/dy_j eta*_j  =  0      for all (t, y)

This module evaluates that residual numerically (pointwise and as a
dataset-averaged squared loss), certifies it symbolically through the
rational normal form, and provides the surrounding operations: triviality
and independence tests, the full (xi, eta) condition, order reduction and
prolongation for higher-order scalar equations, and numeric verification
of canonical coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import expr as ex
from .odeint import OdeSystem, TrajectoryDataset

TRIVIAL_EPS = 0.01
RANK_TOL = 1e-8


@dataclass(frozen=True)
class Provenance:
    """Where a candidate came from in the search space."""

    skeleton_id: int
    labeling_id: int


@dataclass(frozen=True)
class GeneratorCandidate:
    """A non-trivial generator part eta* with its dataset loss."""

    eta_star: ex.Expression
    loss: float
    provenance: Optional[Provenance] = None


@dataclass(frozen=True)
class FullGenerator:
    """A full point generator (xi, eta); xi has one output, eta has d."""

    xi: ex.Expression
    eta: ex.Expression

    def __post_init__(self):
        if self.xi.n_outputs != 1:
            raise ValueError("xi must have exactly one output")


@dataclass(frozen=True)
class CanonicalTransform:
    """Coordinates (r, v, s_1..s_{d-1}) straightening a generator:
    X r = 0, X v = 1, X s_i = 0."""

    r: ex.Expression
    v: ex.Expression
    s: tuple

    def __post_init__(self):
        for part in (self.r, self.v, *self.s):
            if part.n_outputs != 1:
                raise ValueError("transform components must be single-output")


# ---------------------------------------------------------------------------
# the reduced symmetry condition


def residual(system: OdeSystem, eta_star: ex.Expression, point: ex.EvalPoint):
    """Reduced-condition residual S(t, y), one value per component.

    Raises :class:`~odesym.expr.DomainError` if f or eta* is undefined at
    the point.
    """
    f_val = ex.evaluate(system.f, point)
    grad_f = ex.gradient(system.f, point)
    eta_val = ex.evaluate(eta_star, point)
    grad_eta = ex.gradient(eta_star, point)
    flow = np.concatenate([[1.0], f_val])
    return grad_eta @ flow - grad_f[:, 1:] @ eta_val


def loss(system: OdeSystem, eta_star: ex.Expression, dataset: TrajectoryDataset):
    """Mean squared residual over all dataset points and components.

    Returns ``float('inf')`` if any point falls outside the domain of
    either f or eta*: a candidate must be defined on the whole dataset.
    """
    if eta_star.n_outputs != system.d:
        raise ValueError("eta* must have one component per system dimension")
    T, Y = dataset.flat_points()
    f_val, f_grad, f_err = ex.gradient_batch(system.f, T, Y)
    e_val, e_grad, e_err = ex.gradient_batch(eta_star, T, Y)
    if f_err.any() or e_err.any():
        return float("inf")
    s = (
        e_grad[:, :, 0]
        + np.einsum("nkj,nj->nk", e_grad[:, :, 1:], f_val)
        - np.einsum("nkj,nj->nk", f_grad[:, :, 1:], e_val)
    )
    return float(np.sum(s * s) / s.size)


def full_condition_residual(
    system: OdeSystem, gen: FullGenerator, point: ex.EvalPoint
):
    """Residual of the unreduced point-symmetry condition at one point.

    With y' replaced by f(t, y), component k reads::

        d(eta_k)/dt + sum_j d(eta_k)/dy_j f_j
        - (d(xi)/dt + sum_j d(xi)/dy_j f_j) f_k
        - xi d(f_k)/dt - sum_j d(f_k)/dy_j eta_j
    """
    f_val = ex.evaluate(system.f, point)
    grad_f = ex.gradient(system.f, point)
    xi_val = ex.evaluate(gen.xi, point)[0]
    grad_xi = ex.gradient(gen.xi, point)[0]
    eta_val = ex.evaluate(gen.eta, point)
    grad_eta = ex.gradient(gen.eta, point)
    flow = np.concatenate([[1.0], f_val])
    xi_total = grad_xi @ flow
    return (
        grad_eta @ flow
        - xi_total * f_val
        - xi_val * grad_f[:, 0]
        - grad_f[:, 1:] @ eta_val
    )


def remove_hamiltonian(system: OdeSystem, gen: FullGenerator) -> ex.Expression:
    """Non-trivial part eta* = eta - xi*f of a full generator."""
    if gen.eta.n_outputs != system.d:
        raise ValueError("eta must have one component per system dimension")
    b = ex.DagBuilder()
    eta_roots = b.import_roots(gen.eta)
    xi_root = b.import_roots(gen.xi)[0]
    f_roots = b.import_roots(system.f)
    return b.build(
        [b.sub(ek, b.mul(xi_root, fk)) for ek, fk in zip(eta_roots, f_roots)]
    )


# ---------------------------------------------------------------------------
# candidate filters


def is_trivial(
    eta_star: ex.Expression, dataset: TrajectoryDataset, eps: float = TRIVIAL_EPS
) -> bool:
    """True when eta* is numerically negligible on the dataset.

    The median of |eta*| over all points and components must reach ``eps``;
    a candidate that hits domain errors anywhere is trivial by definition
    (it cannot be a generator on this data).
    """
    T, Y = dataset.flat_points()
    vals, err = ex.evaluate_batch(eta_star, T, Y)
    if err.any():
        return True
    return float(np.median(np.abs(vals))) < eps


def independence_rank(
    generators: Sequence[ex.Expression],
    dataset: TrajectoryDataset,
    tol: float = RANK_TOL,
):
    """Numeric rank of the stacked generator value matrix.

    Each generator contributes one row of its eta* values over all usable
    dataset points (columns are point x component).  Points where any
    generator is undefined are excluded.  Returns ``(rank, excluded)``;
    the rank counts singular values above ``tol * sigma_max``.
    """
    if not generators:
        return 0, 0
    T, Y = dataset.flat_points()
    rows = []
    bad = np.zeros(len(T), dtype=bool)
    for g in generators:
        vals, err = ex.evaluate_batch(g, T, Y)
        bad |= err
        rows.append(vals)
    keep = ~bad
    excluded = int(bad.sum())
    if not keep.any():
        return 0, excluded
    matrix = np.stack([r[keep].reshape(-1) for r in rows])
    sigma = np.linalg.svd(matrix, compute_uv=False)
    if sigma[0] == 0.0:
        return 0, excluded
    return int(np.sum(sigma > tol * sigma[0])), excluded


# ---------------------------------------------------------------------------
# symbolic certification


def residual_normal_forms(system: OdeSystem, eta_star: ex.Expression):
    """Normal form of each residual component (internal building block)."""
    d = system.d
    if eta_star.n_outputs != d:
        raise ValueError("eta* must have one component per system dimension")
    nf_f = ex.normal_forms(system.f)
    nf_eta = ex.normal_forms(eta_star)
    d_eta = [ex.normal_forms(ex.diff_symbolic(eta_star, v)) for v in range(d + 1)]
    d_f = [ex.normal_forms(ex.diff_symbolic(system.f, v)) for v in range(1, d + 1)]
    out = []
    for k in range(d):
        acc = d_eta[0][k]
        for j in range(d):
            acc = ex.nf_add(acc, ex.nf_mul(d_eta[j + 1][k], nf_f[j]))
            acc = ex.nf_add(acc, ex.nf_scale(ex.nf_mul(d_f[j][k], nf_eta[j]), -1))
        out.append(acc)
    return out


def symbolic_zero(system: OdeSystem, eta_star: ex.Expression):
    """Per-component certificate that the reduced residual is identically
    zero, via exact rational normal forms.  A False entry means the normal
    form did not fold to zero, not that the residual is provably nonzero."""
    return [ex.nf_is_zero(nf) for nf in residual_normal_forms(system, eta_star)]


def residual_symbolic(system: OdeSystem, eta_star: ex.Expression) -> ex.Expression:
    """The reduced residual as a simplified expression (one root per
    component); useful for inspecting near-miss candidates."""
    b = ex.DagBuilder()
    return b.build(
        [ex.nf_build(b, nf) for nf in residual_normal_forms(system, eta_star)]
    )


# ---------------------------------------------------------------------------
# higher-order scalar equations


def to_first_order(g: ex.Expression, order: int) -> ex.Expression:
    """Rewrite y^(m) = g(t, y, y', ..., y^(m-1)) as a first-order system.

    Variables encode jets: y1 = y, y2 = y', ..., ym = y^(m-1).  The result
    has components (y2, y3, ..., ym, g).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if g.n_outputs != 1:
        raise ValueError("g must be a single expression")
    if g.max_variable() > order:
        raise ValueError(f"g may only use t, y1..y{order}")
    b = ex.DagBuilder()
    g_root = b.import_roots(g)[0]
    roots = [b.var(k) for k in range(2, order + 1)] + [g_root]
    return b.build(roots)


def _total_derivative(b: ex.DagBuilder, e: ex.Expression, order: int) -> int:
    """D_t e inside builder ``b``, with y_{j}' = y_{j+1} for j < order."""
    acc = b.import_roots(ex.diff_symbolic(e, 0))[0]
    for j in range(1, order):
        dj = b.import_roots(ex.diff_symbolic(e, j))[0]
        acc = b.add(acc, b.mul(dj, b.var(j + 1)))
    return acc


def prolong(xi: ex.Expression, eta: ex.Expression, order: int) -> ex.Expression:
    """Prolong a point generator (xi(t,y1), eta(t,y1)) of a scalar equation
    to the jet variables of its order-``order`` first-order system.

    Components follow eta^(j) = D_t eta^(j-1) - y^(j) D_t xi, so the result
    pairs with :func:`to_first_order`: X = xi d/dt + sum_j eta^(j-1) d/dy_j.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if xi.n_outputs != 1 or eta.n_outputs != 1:
        raise ValueError("xi and eta must be single expressions")
    if max(xi.max_variable(), eta.max_variable()) > 1:
        raise ValueError("point generators may only use t and y1")
    b = ex.DagBuilder()
    components = [b.import_roots(eta)[0]]
    for j in range(1, order):
        prev = b.build([components[-1]])
        d_prev = _total_derivative(b, prev, order)
        d_xi = _total_derivative(b, xi, order)
        components.append(b.sub(d_prev, b.mul(b.var(j + 1), d_xi)))
    return b.build(components)


# ---------------------------------------------------------------------------
# canonical coordinates


def verify_canonical(
    gen: FullGenerator,
    transform: CanonicalTransform,
    dataset: TrajectoryDataset,
):
    """Numerically check X r = 0, X v = 1, X s_i = 0 on the dataset.

    Returns ``(violations, excluded)``: the max absolute violation per
    condition (ordered r, v, s_1, ...) and the number of points excluded
    for domain errors in any participating expression.
    """
    T, Y = dataset.flat_points()
    xi_val, xi_err = ex.evaluate_batch(gen.xi, T, Y)
    eta_val, eta_err = ex.evaluate_batch(gen.eta, T, Y)
    bad = xi_err | eta_err

    applied = []
    for part, target in [(transform.r, 0.0), (transform.v, 1.0)] + [
        (s, 0.0) for s in transform.s
    ]:
        vals, grads, err = ex.gradient_batch(part, T, Y)
        bad = bad | err
        x_part = xi_val[:, 0] * grads[:, 0, 0] + np.einsum(
            "nj,nj->n", eta_val, grads[:, 0, 1:]
        )
        applied.append(np.abs(x_part - target))
    keep = ~bad
    excluded = int(bad.sum())
    if not keep.any():
        return [math.inf] * len(applied), excluded
    return [float(np.max(a[keep])) for a in applied], excluded


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class VerificationReport:
    """Verdict for one generator on one dataset."""

    numeric_loss: float
    symbolic_zero: tuple
    rank: int
    excluded_points: int
    canonical_violations: Optional[dict] = None

    def to_json_obj(self) -> dict:
        obj = {
            "numeric_loss": self.numeric_loss,
            "symbolic_zero": list(self.symbolic_zero),
            "rank": self.rank,
            "excluded_points": self.excluded_points,
        }
        if self.canonical_violations is not None:
            obj["canonical_violations"] = self.canonical_violations
        return obj


def verify_generator(
    system: OdeSystem,
    eta_star: ex.Expression,
    dataset: TrajectoryDataset,
    transform: CanonicalTransform = None,
) -> VerificationReport:
    """Full verification of a non-trivial generator part.

    Combines the numeric loss, the per-component symbolic certificate, the
    rank of the single-generator value matrix, and (when a transform is
    supplied) canonical-coordinate violations for the generator read as
    X = sum_k eta*_k d/dy_k.
    """
    numeric = loss(system, eta_star, dataset)
    symbolic = tuple(symbolic_zero(system, eta_star))
    rank, excluded = independence_rank([eta_star], dataset)
    canonical = None
    if transform is not None:
        b = ex.DagBuilder()
        zero = b.build([b.const(0)])
        gen = FullGenerator(zero, eta_star)
        violations, canon_excluded = verify_canonical(gen, transform, dataset)
        labels = ["r", "v"] + [f"s{i + 1}" for i in range(len(transform.s))]
        canonical = {
            "max_violation": dict(zip(labels, violations)),
            "excluded_points": canon_excluded,
        }
    return VerificationReport(numeric, symbolic, rank, excluded, canonical)
