"""Exhaustive search for symmetry generators over expression DAGs.

The search runs in two nested layers, smallest candidates first:

  1. skeletons: expression DAGs with concrete leaves and unlabeled
     operator slots, enumerated exhaustively per operator count
     (iterative deepening), one canonical representative per wiring
     isomorphism class, with subgraphs shared across outputs,
  2. labelings: every assignment of operator symbols to the slots,
     swept by the scoring kernel (fingerprint dedup, triviality filter,
     loss) in a fixed mixed-radix order.

Kernel survivors are re-verified independently (scalar loss, symbolic
residual) and accepted greedily while they increase the independence
rank of the returned set.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, expr, symmetry
from ._rng import SplitMix64
from .expr import ALLOWED_EXPONENTS, BINARY_OPS, DagBuilder, DomainError, Expression, UNARY_OPS
from .odeint import OdeSystem, TrajectoryDataset
from .symmetry import GeneratorCandidate, Provenance

DEFAULT_OPERATORS = (
    "neg", "inv", "exp", "log", "sin", "cos", "tan", "sqrt", "square",
    "add", "sub", "mul", "div",
)

N_PROBES = 16
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
ERROR_WORD = 0x7FF8000000000001
_U64 = (1 << 64) - 1


def leaf_alphabet(d: int) -> tuple[str, ...]:
    """Leaf symbols available to skeletons for a d-dimensional system."""
    return ("t",) + tuple(f"y{k + 1}" for k in range(d)) + ("1", "2")


@dataclass(frozen=True)
class Skeleton:
    """An expression DAG with concrete leaves and unlabeled operator slots.

    Node references: ``ref < n_leaves`` denotes leaf ``ref`` of the
    alphabet for dimension ``d``; ``ref >= n_leaves`` denotes operator
    slot ``ref - n_leaves``.  Slots are stored in discovery order
    (children only reference leaves or earlier-completed slots), and
    every slot is reachable from some root.
    """

    d: int
    ops: tuple[tuple[int, int, int], ...]  # (arity, child1, child2); -1 pads unary
    roots: tuple[int, ...]

    @property
    def n_leaves(self) -> int:
        return self.d + 3

    @property
    def n_ops(self) -> int:
        return len(self.ops)

    def __post_init__(self):
        if len(self.roots) != self.d:
            raise ValueError("one root per output dimension required")
        n_leaves = self.n_leaves
        used = set()
        for i, (arity, c1, c2) in enumerate(self.ops):
            if arity not in (1, 2):
                raise ValueError("slot arity must be 1 or 2")
            children = (c1,) if arity == 1 else (c1, c2)
            for c in children:
                if not 0 <= c < n_leaves + i:
                    raise ValueError("children must reference leaves or earlier slots")
                if c >= n_leaves:
                    used.add(c - n_leaves)
        for r in self.roots:
            if not 0 <= r < n_leaves + len(self.ops):
                raise ValueError("root out of range")
        reach = set()
        stack = [r - n_leaves for r in self.roots if r >= n_leaves]
        while stack:
            i = stack.pop()
            if i in reach:
                continue
            reach.add(i)
            arity, c1, c2 = self.ops[i]
            for c in (c1, c2)[:arity]:
                if c >= n_leaves:
                    stack.append(c - n_leaves)
        if len(reach) != len(self.ops):
            raise ValueError("every operator slot must be reachable from a root")


def _to_postorder(d, ops, roots):
    """Renumber slots children-first (the construction discovers parents
    first); a deterministic function of the abstract DAG, so one
    construction trace still maps to exactly one Skeleton."""
    n_leaves = d + 3
    order: list[int] = []
    seen: set = set()

    def visit(ref):
        if ref < n_leaves:
            return
        i = ref - n_leaves
        if i in seen:
            return
        seen.add(i)
        arity, c1, c2 = ops[i]
        visit(c1)
        if arity == 2:
            visit(c2)
        order.append(i)

    for r in roots:
        visit(r)
    remap = {old: new for new, old in enumerate(order)}

    def m(ref):
        return ref if ref < n_leaves else n_leaves + remap[ref - n_leaves]

    new_ops = tuple(
        (arity, m(c1), m(c2) if arity == 2 else -1)
        for arity, c1, c2 in (ops[old] for old in order)
    )
    new_roots = tuple(m(r) for r in roots)
    return Skeleton(d, new_ops, new_roots)


def enumerate_skeletons(d: int, n_ops: int):
    """Yield every skeleton with exactly ``n_ops`` operator slots.

    Exhaustive and duplicate-free up to wiring isomorphism: slots are
    created in DFS discovery order from the roots, which gives each
    isomorphism class exactly one construction trace.  Demands (root or
    child positions) resolve, in fixed order, to a leaf, an already
    completed slot (sharing), or a fresh slot whose children become the
    next demands.  Ancestors of the current demand are banned as
    reference targets, which keeps the graph acyclic.
    """
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    n_leaves = d + 3
    ops: list[tuple[int, int, int]] = []
    roots: list[int] = []

    def fulfill(demands):
        if not demands:
            if len(ops) == n_ops:
                yield _to_postorder(d, ops, roots)
            return
        (owner, slot, banned) = demands[0]
        rest = demands[1:]

        def assign(ref):
            if owner is None:
                roots.append(ref)
            else:
                arity, c1, c2 = ops[owner]
                ops[owner] = (arity, ref, c2) if slot == 0 else (arity, c1, ref)

        def unassign():
            if owner is None:
                roots.pop()
            else:
                arity, c1, c2 = ops[owner]
                ops[owner] = (arity, -1, c2) if slot == 0 else (arity, c1, -1)

        for ref in range(n_leaves):
            assign(ref)
            yield from fulfill(rest)
            unassign()
        for i in range(len(ops)):
            if i not in banned:
                assign(n_leaves + i)
                yield from fulfill(rest)
                unassign()
        if len(ops) < n_ops:
            i = len(ops)
            nb = banned | {i}
            for arity in (1, 2):
                ops.append((arity, -1, -1))
                assign(n_leaves + i)
                child_demands = [(i, s, nb) for s in range(arity)]
                yield from fulfill(child_demands + rest)
                unassign()
                ops.pop()

    yield from fulfill([(None, k, frozenset()) for k in range(d)])


@dataclass(frozen=True)
class SearchConfig:
    max_operator_nodes: int = 7
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    trivial_eps: float = symmetry.TRIVIAL_EPS
    accept_loss: float = 1e-10
    time_budget: float = 600.0
    max_generators: int = 1
    seed: int = 0
    require_symbolic: bool = True

    def __post_init__(self):
        if self.max_operator_nodes < 0:
            raise ValueError("max_operator_nodes must be >= 0")
        for name in self.operators:
            if name not in UNARY_OPS and name not in BINARY_OPS:
                raise ValueError(f"unknown operator {name!r}")
        if len(set(self.operators)) != len(self.operators):
            raise ValueError("duplicate operator in operator set")
        if not self.trivial_eps > 0:
            raise ValueError("trivial_eps must be positive")
        if not self.accept_loss > 0:
            raise ValueError("accept_loss must be positive")
        if not self.time_budget > 0:
            raise ValueError("time_budget must be positive")
        if self.max_generators < 1:
            raise ValueError("max_generators must be >= 1")

    @property
    def unary_operators(self) -> tuple[str, ...]:
        return tuple(o for o in self.operators if o in UNARY_OPS)

    @property
    def binary_operators(self) -> tuple[str, ...]:
        return tuple(o for o in self.operators if o in BINARY_OPS)


@dataclass(frozen=True)
class SearchResult:
    generators: tuple[GeneratorCandidate, ...]
    skeletons_enumerated: int
    candidates_scored: int
    candidates_deduplicated: int
    wall_time: float

    def to_json_obj(self) -> dict:
        return {
            "generators": [
                {
                    "eta_star": list(expr.component_strs(g.eta_star)),
                    "loss": g.loss,
                    "provenance": None
                    if g.provenance is None
                    else {
                        "skeleton_id": g.provenance.skeleton_id,
                        "labeling_id": g.provenance.labeling_id,
                    },
                }
                for g in self.generators
            ],
            "skeletons_enumerated": self.skeletons_enumerated,
            "candidates_scored": self.candidates_scored,
            "candidates_deduplicated": self.candidates_deduplicated,
            "wall_time": self.wall_time,
        }


class _Tape:
    """A skeleton compiled for the scoring kernel: leaf and slot nodes in
    topological order, plus per-slot operator choices."""

    def __init__(self, sk: Skeleton, config: SearchConfig, choice_cache: dict | None = None):
        n_leaves = sk.n_leaves
        used = sorted(
            {r for r in sk.roots if r < n_leaves}
            | {c for (arity, c1, c2) in sk.ops for c in (c1, c2)[:arity] if c < n_leaves}
        )
        index = {ref: i for i, ref in enumerate(used)}
        for i in range(sk.n_ops):
            index[n_leaves + i] = len(used) + i

        n_nodes = len(used) + sk.n_ops
        self.code = np.full(n_nodes, -1, dtype=np.int32)
        self.a1 = np.full(n_nodes, -1, dtype=np.int32)
        self.a2 = np.full(n_nodes, -1, dtype=np.int32)
        self.cval = np.zeros(n_nodes, dtype=np.float64)
        self.leaf_refs = used
        for i, ref in enumerate(used):
            if ref <= sk.d:
                self.code[i] = expr.OP_VAR
                self.a1[i] = ref
            else:
                self.code[i] = expr.OP_CONST
                self.cval[i] = 1.0 if ref == sk.d + 1 else 2.0
        for s, (arity, c1, c2) in enumerate(sk.ops):
            pos = len(used) + s
            self.a1[pos] = index[c1]
            if arity == 2:
                self.a2[pos] = index[c2]
        self.slot_pos = np.arange(len(used), n_nodes, dtype=np.int32)
        self.roots = np.array([index[r] for r in sk.roots], dtype=np.int32)

        # slots with the same arity pattern share choice tables, worth
        # caching across the many skeletons of one search
        sig = tuple(
            (arity, arity == 2 and self._pow_legal(sk, c2))
            for arity, c1, c2 in sk.ops
        )
        cached = None if choice_cache is None else choice_cache.get(sig)
        if cached is None:
            choices: list[list[str]] = []
            for arity, pow_ok in sig:
                if arity == 1:
                    names = list(config.unary_operators)
                else:
                    names = [o for o in config.binary_operators if o != "pow"]
                    if pow_ok and "pow" in config.binary_operators:
                        names.append("pow")
                choices.append(names)
            flat = [expr.OPCODES[name] for names in choices for name in names]
            choices_flat = np.array(flat, dtype=np.int32)
            off = [0]
            for names in choices:
                off.append(off[-1] + len(names))
            choices_off = np.array(off, dtype=np.int64)
            n_labelings = 1
            for names in choices:
                n_labelings *= len(names)
            cached = (choices, choices_flat, choices_off, n_labelings)
            if choice_cache is not None:
                choice_cache[sig] = cached
        self.choice_names, self.choices_flat, self.choices_off, self.n_labelings = cached

    @staticmethod
    def _pow_legal(sk: Skeleton, right_ref: int) -> bool:
        # pow needs a constant exponent leaf with an allowed value
        if right_ref >= sk.n_leaves or right_ref <= sk.d:
            return False
        value = 1 if right_ref == sk.d + 1 else 2
        return value in {int(q) for q in ALLOWED_EXPONENTS if q == int(q)}

    def digits(self, labeling_id: int) -> list[int]:
        out = []
        for names in reversed(self.choice_names):
            out.append(labeling_id % len(names))
            labeling_id //= len(names)
        return out[::-1]

    def build(self, sk: Skeleton, labeling_id: int) -> Expression:
        if not 0 <= labeling_id < self.n_labelings:
            raise ValueError("labeling id out of range")
        digits = self.digits(labeling_id)
        b = DagBuilder()
        nodes: list = []
        for i in range(len(self.code)):
            c = int(self.code[i])
            if c == expr.OP_VAR:
                nodes.append(b.var(int(self.a1[i])))
            elif c == expr.OP_CONST:
                nodes.append(b.const(int(self.cval[i])))
            else:
                s = i - len(self.leaf_refs)
                name = self.choice_names[s][digits[s]]
                if name in UNARY_OPS:
                    nodes.append(b.unary(name, nodes[self.a1[i]]))
                else:
                    nodes.append(b.binary(name, nodes[self.a1[i]], nodes[self.a2[i]]))
        return b.build([nodes[r] for r in self.roots])


def label_skeleton(sk: Skeleton, config: SearchConfig | None = None):
    """Yield every labeled Expression of a skeleton in canonical order
    (slot 0 is the most significant digit of the labeling index)."""
    cfg = config or SearchConfig()
    tape = _Tape(sk, cfg)
    for lab in range(tape.n_labelings):
        yield tape.build(sk, lab)


def _word(v: float) -> int:
    scaled = float(np.rint(v * 1e9)) + 0.0
    return struct.unpack("<Q", struct.pack("<d", scaled))[0]


def fingerprint(e: Expression, probes) -> int:
    """64-bit semantic hash: values at the probe points rounded to 1e-9,
    with domain-error patterns folded in.  Expressions equal as functions
    on the probes collide; mirrors the scoring kernel's stage A."""
    n_outputs = e.n_outputs
    words = np.empty((n_outputs, len(probes)), dtype=np.uint64)
    for p, row in enumerate(np.asarray(probes, dtype=float)):
        point = expr.EvalPoint(float(row[0]), tuple(float(v) for v in row[1:]))
        try:
            vals = expr.evaluate(e, point)
        except DomainError:
            words[:, p] = ERROR_WORD
            continue
        for r in range(n_outputs):
            words[r, p] = _word(vals[r])
    fp = FNV_OFFSET
    for r in range(n_outputs):
        for p in range(len(probes)):
            fp = ((fp ^ int(words[r, p])) * FNV_PRIME) & _U64
    return fp


def draw_probes(dataset: TrajectoryDataset, seed: int, n_probes: int = N_PROBES):
    """Probe points drawn uniformly from the dataset bounding box."""
    lows, highs = dataset.bounding_box()
    rng = SplitMix64(seed)
    pts = np.empty((n_probes, len(lows)))
    for p in range(n_probes):
        for c in range(len(lows)):
            pts[p, c] = rng.uniform(float(lows[c]), float(highs[c]))
    return pts


def discover(
    system: OdeSystem, dataset: TrajectoryDataset, config: SearchConfig | None = None
) -> SearchResult:
    """Search for symmetry generators of ``system`` against ``dataset``.

    Iterative deepening over operator count; per candidate the pipeline
    is fingerprint dedup, triviality filter, numeric loss, symbolic
    residual check, then greedy acceptance while the independence rank
    of the accepted set grows.  Deterministic for fixed inputs; budget
    exhaustion returns whatever was found (with counters), it does not
    raise.
    """
    cfg = config or SearchConfig()
    d = system.d
    if dataset.d != d:
        raise ValueError("dataset dimension does not match the system")

    t0 = time.monotonic()
    deadline = t0 + cfg.time_budget

    T, Y = dataset.flat_points()
    T = np.ascontiguousarray(T, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    F, GF_full, f_err = expr.gradient_batch(system.f, T, Y)
    if f_err.any():
        raise ValueError("dataset contains points outside the domain of f")
    F = np.ascontiguousarray(F)
    GF = np.ascontiguousarray(GF_full[:, :, 1:])

    probe_pts = draw_probes(dataset, cfg.seed)
    probes_t = np.ascontiguousarray(probe_pts[:, 0])
    probes_y = np.ascontiguousarray(probe_pts[:, 1:])

    table = _kernels.DedupTable()
    accepted: list[GeneratorCandidate] = []
    accepted_exprs: list[Expression] = []
    skeletons = scored = dedup = 0
    skeleton_id = -1
    stop = False
    choice_cache: dict = {}
    out_bufs = (np.empty(4096, dtype=np.int64), np.empty(4096, dtype=np.float64))

    for n_ops in range(cfg.max_operator_nodes + 1):
        if stop:
            break
        for sk in enumerate_skeletons(d, n_ops):
            skeleton_id += 1
            skeletons += 1
            tape = _Tape(sk, cfg, choice_cache)
            if tape.n_labelings == 0:
                continue
            ids, losses, counters, exhausted = _kernels.run_scoring(
                tape.code, tape.a1, tape.a2, tape.cval,
                tape.slot_pos, tape.choices_flat, tape.choices_off, tape.roots,
                probes_t, probes_y, T, Y, F, GF,
                cfg.trivial_eps, cfg.accept_loss, table, deadline,
                out_bufs=out_bufs,
            )
            scored += counters[0]
            dedup += counters[1]
            for lab_id in ids:
                e = tape.build(sk, lab_id)
                loss_val = symmetry.loss(system, e, dataset)
                if not loss_val < cfg.accept_loss:
                    continue
                if symmetry.is_trivial(e, dataset, cfg.trivial_eps):
                    continue
                if cfg.require_symbolic and not all(symmetry.symbolic_zero(system, e)):
                    continue
                stacked = accepted_exprs + [e]
                rank, _ = symmetry.independence_rank(stacked, dataset)
                if rank != len(stacked):
                    continue
                accepted_exprs.append(e)
                accepted.append(
                    GeneratorCandidate(
                        eta_star=e,
                        loss=loss_val,
                        provenance=Provenance(skeleton_id, int(lab_id)),
                    )
                )
                if len(accepted) >= cfg.max_generators:
                    stop = True
                    break
            if stop or exhausted:
                stop = True
                break

    accepted.sort(key=lambda g: g.loss)
    return SearchResult(
        generators=tuple(accepted),
        skeletons_enumerated=skeletons,
        candidates_scored=scored,
        candidates_deduplicated=dedup,
        wall_time=time.monotonic() - t0,
    )
