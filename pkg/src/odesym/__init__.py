"""Discovery of Lie point symmetry generators of first-order ODE systems.

The package searches expression space exhaustively for generator
components whose symmetry-condition residual vanishes on sampled
trajectories, then certifies candidates symbolically.
"""

__version__ = "0.1.0"

from .expr import (  # noqa: F401
    DagBuilder,
    DomainError,
    EvalPoint,
    Expression,
    ExprError,
    ParseError,
    parse,
    parse_system,
    simplify,
    to_str,
)
