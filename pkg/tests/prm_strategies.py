"""Hypothesis strategies and small builders shared by the tests."""

from __future__ import annotations

import math

from hypothesis import strategies as st

from prmrl.core import (
    And,
    Edge,
    FlowSpec,
    Guard,
    Interval,
    Mode,
    Not,
    Or,
    PrmDefinition,
    Prop,
    PropositionSet,
    Terminal,
    TrueF,
)

NUMBERS = st.one_of(
    st.sampled_from([0.0, 1.0, -1.0, 0.5, 2.0, 3.3e-4, 98.0, 1e-12, 12345.678]),
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False),
)


def formulas(props: tuple[str, ...], depth: int = 3):
    leaves = st.sampled_from([Prop(p) for p in props] + [TrueF()])
    if depth == 0:
        return leaves
    sub = formulas(props, depth - 1)
    return st.one_of(
        leaves,
        sub.map(Not),
        st.tuples(sub, sub).map(lambda t: And(*t)),
        st.tuples(sub, sub).map(lambda t: Or(*t)),
    )


@st.composite
def intervals(draw, n_vars: int, allow_k: bool = True):
    coeffs = tuple(draw(st.lists(NUMBERS, min_size=n_vars, max_size=n_vars)))
    k_coeff = draw(NUMBERS) if allow_k and draw(st.booleans()) else 0.0
    offset = draw(NUMBERS)
    lo, hi = sorted((draw(NUMBERS), draw(NUMBERS)))
    return Interval(coeffs, k_coeff, offset, lo, hi, draw(st.booleans()), draw(st.booleans()))


@st.composite
def random_machines(draw):
    """Deterministic, total machines of random shape.

    Every mode splits the labels with a random formula ``f`` and ``!f``;
    the ``!f`` side may be split again by a threshold on an affine
    expression, ``(-inf, t)`` against ``[t, inf]``, so guards stay total
    and mutually exclusive.
    """
    n_props = draw(st.integers(1, 4))
    props = tuple(f"p{i}" for i in range(n_props))
    n_vars = draw(st.integers(0, 3))
    var_names = tuple(f"x{i}" for i in range(n_vars))
    bounds = []
    for _ in range(n_vars):
        lo = draw(st.integers(-50, 50))
        bounds.append((float(lo), float(lo + draw(st.integers(1, 100)))))
    init = tuple(lo for lo, _ in bounds)
    n_modes = draw(st.integers(1, 5))
    init_mode = draw(st.integers(0, n_modes - 1))
    modes = []
    for i in range(n_modes):
        matrix = tuple(
            tuple(draw(NUMBERS) if draw(st.booleans()) else 0.0 for _ in range(n_vars)) for _ in range(n_vars)
        )
        flow = FlowSpec(matrix, tuple(draw(NUMBERS) for _ in range(n_vars)))
        f = draw(formulas(props))
        target = st.integers(0, n_modes - 1)
        edges = [Edge(Guard(f), draw(target), draw(NUMBERS))]
        if n_vars and draw(st.booleans()):
            base = draw(intervals(n_vars))
            t = draw(NUMBERS)
            below = Interval(base.coeffs, base.k_coeff, base.offset, -math.inf, t, True, False)
            above = Interval(base.coeffs, base.k_coeff, base.offset, t, math.inf, True, True)
            edges.append(Edge(Guard(Not(f), (below,)), draw(target), draw(NUMBERS)))
            edges.append(Edge(Guard(Not(f), (above,)), draw(target), draw(NUMBERS)))
        else:
            edges.append(Edge(Guard(Not(f)), draw(target), draw(NUMBERS)))
        modes.append(Mode(f"m{i}", flow, tuple(edges)))
    terminals = []
    for i in range(n_modes):
        if i != init_mode and draw(st.booleans()):
            preds = (draw(intervals(n_vars, allow_k=False)),) if n_vars and draw(st.booleans()) else ()
            terminals.append(Terminal(i, preds))
    params = tuple((f"c{j}", draw(NUMBERS)) for j in range(draw(st.integers(0, 2))))
    return PrmDefinition(
        name="rand",
        props=PropositionSet(props),
        var_names=var_names,
        psi_init=init,
        psi_bounds=tuple(bounds),
        modes=tuple(modes),
        initial_mode=init_mode,
        terminals=tuple(terminals),
        params=params,
        tau=draw(st.sampled_from([0.5, 1.0, 2.0])),
    )


TWO_STATE = """
machine two
alphabet { b }
mode q0 init {
  on b -> q1 reward 1
  on !b -> q0 reward 0
}
mode q1 {
  on true -> q1 reward 0
}
terminal q1
"""

CHAIN = """
machine chain
alphabet { b }
mode q0 init {
  on b -> q1 reward 0
  on !b -> q0 reward 0
}
mode q1 {
  on b -> q2 reward 1
  on !b -> q1 reward 0
}
mode q2 {
  on true -> q2 reward 0
}
terminal q2
"""

ZERO = """
machine zero
alphabet { b }
mode q0 init {
  on b -> q1 reward 0
  on !b -> q0 reward 0
}
mode q1 {
  on true -> q1 reward 0
}
terminal q1
"""

# Five non-terminal modes that all loop back, plus one terminal sink.
FIVE = """
machine five
alphabet { a, b }
""" + "\n".join(
    f"""mode q{i}{' init' if i == 0 else ''} {{
  on a -> q5 reward 0
  on !a & b -> q{(i + 1) % 5} reward {1 if i == 4 else 0}
  on !a & !b -> q{i} reward 0
}}"""
    for i in range(5)
) + """
mode q5 {
  on true -> q5 reward 0
}
terminal q5
"""
