"""Independent oracles shared by the search and acceptance suites."""

import itertools


def canon_key(n_leaves, ops, root):
    """Canonical nested-tuple form of one rooted DAG, invariant under slot
    renumbering.  First visit of a shared node inlines it, later visits
    emit a back reference by discovery index."""
    order = {}

    def visit(ref):
        if ref < n_leaves:
            return ("leaf", ref)
        i = ref - n_leaves
        if i in order:
            return ("ref", order[i])
        order[i] = len(order)
        my = order[i]
        arity, c1, c2 = ops[i]
        children = tuple(visit(c) for c in ((c1,) if arity == 1 else (c1, c2)))
        return ("op", my, arity, children)

    return visit(root)


def multi_canon_key(n_leaves, ops, roots):
    """Canonical form of a multi-rooted DAG: roots share one discovery
    numbering, so sharing across roots is part of the key."""
    order = {}

    def visit(ref):
        if ref < n_leaves:
            return ("leaf", ref)
        i = ref - n_leaves
        if i in order:
            return ("ref", order[i])
        order[i] = len(order)
        my = order[i]
        arity, c1, c2 = ops[i]
        children = tuple(visit(c) for c in ((c1,) if arity == 1 else (c1, c2)))
        return ("op", my, arity, children)

    return tuple(visit(r) for r in roots)


def brute_force_skeletons(d, n_ops):
    """Every wiring-isomorphism class with exactly ``n_ops`` slots, found
    the slow way: enumerate all arity and child assignments over numbered
    slots, keep the acyclic fully-reachable ones, canonicalize into a set.
    """
    n_leaves = d + 3
    keys = set()
    for arities in itertools.product((1, 2), repeat=n_ops):
        # children of slot i may reference any leaf or any slot; cycles
        # are filtered below rather than excluded by construction
        child_ranges = []
        for i in range(n_ops):
            refs = range(n_leaves + n_ops)
            if arities[i] == 1:
                child_ranges.append([(c, -1) for c in refs])
            else:
                child_ranges.append(list(itertools.product(refs, refs)))
        for wiring in itertools.product(*child_ranges):
            ops = [(arities[i], wiring[i][0], wiring[i][1]) for i in range(n_ops)]
            if _cyclic(n_leaves, ops):
                continue
            for roots in itertools.product(range(n_leaves + n_ops), repeat=d):
                if _covers(n_leaves, ops, roots):
                    keys.add(multi_canon_key(n_leaves, ops, roots))
    return keys


def _cyclic(n_leaves, ops):
    state = [0] * len(ops)  # 0 new, 1 active, 2 done

    def visit(i):
        if state[i] == 1:
            return True
        if state[i] == 2:
            return False
        state[i] = 1
        arity, c1, c2 = ops[i]
        for c in (c1, c2)[:arity]:
            if c >= n_leaves and visit(c - n_leaves):
                return True
        state[i] = 2
        return False

    return any(visit(i) for i in range(len(ops)))


def _covers(n_leaves, ops, roots):
    seen = set()
    stack = [r - n_leaves for r in roots if r >= n_leaves]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        arity, c1, c2 = ops[i]
        for c in (c1, c2)[:arity]:
            if c >= n_leaves:
                stack.append(c - n_leaves)
    return len(seen) == len(ops)
