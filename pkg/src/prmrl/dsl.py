"""Text format for reward machines (``.prm`` files).

Example::

    machine toggle
    alphabet { b }
    var t : real init 0 bounds [0, 10]
    mode q0 init {
      flow { t' = 1; }
      on b -> q1 reward 1
      on !b when t in [0, 5) -> q0 reward 0
      on !b when t in [5, 10] -> q1 reward 0
    }
    mode q1 { flow { t' = 0; } on true -> q1 reward 0 }
    terminal q1

Statements: ``machine``, ``alphabet``, ``param <name> = <number>``,
``var <name> : real init <number> bounds [lo, hi]``, ``tau <number>``,
``mode <name> [init] { ... }`` and ``terminal <mode> [when <pred> and ...]``.
Guards combine ``!``, ``&``, ``|`` and parentheses over alphabet symbols
(``true`` is always satisfied), optionally followed by ``when`` and a
conjunction of interval predicates ``<affine-expr> in [lo, hi]``; either
bracket may be open.  Predicates may use the step counter ``k``.  Param names
may appear wherever a number is expected.  ``#`` starts a comment.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    And,
    DefinitionError,
    Edge,
    FlowSpec,
    Formula,
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
    is_terminal,
)

FIXTURE_DIR = Path(__file__).parent / "fixtures"


@dataclass(frozen=True)
class SourceDocument:
    text: str
    origin: str = "<inline>"


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    line: int
    column: int

    def __str__(self):
        return f"{self.line}:{self.column}: {self.severity}: {self.message}"


class PrmSyntaxError(Exception):
    """Raised by :func:`parse_prm`; carries every collected diagnostic."""

    def __init__(self, diagnostics: list[Diagnostic], origin: str = "<inline>"):
        self.diagnostics = diagnostics
        self.origin = origin
        super().__init__("\n".join(f"{origin}:{d}" for d in diagnostics))


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<arrow>->)
  | (?P<sym>[{}\[\](),;:=&|!+\-*/'])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | sym | eof
    text: str
    line: int
    column: int


class _Fail(Exception):
    def __init__(self, message, tok):
        super().__init__(message)
        self.message = message
        self.tok = tok


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise _Fail(f"unexpected character {text[pos]!r}", Token("sym", text[pos], line, pos - line_start + 1))
        kind = m.lastgroup
        s = m.group()
        if kind == "arrow":
            kind = "sym"
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, s, line, pos - line_start + 1))
        nl = s.count("\n")
        if nl:
            line += nl
            line_start = pos + s.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Linear:
    """Affine form over named symbols: ``sum coef[name] * name + const``."""

    __slots__ = ("coef", "const")

    def __init__(self, coef=None, const=0.0):
        self.coef = dict(coef or {})
        self.const = const

    def is_const(self):
        return all(v == 0 for v in self.coef.values())

    def add(self, other, sign=1.0):
        coef = dict(self.coef)
        for k, v in other.coef.items():
            coef[k] = coef.get(k, 0.0) + sign * v
        return _Linear(coef, self.const + sign * other.const)

    def scale(self, s):
        return _Linear({k: v * s for k, v in self.coef.items()}, self.const * s)


class _Parser:
    def __init__(self, doc: SourceDocument):
        self.doc = doc
        self.tokens = tokenize(doc.text)
        self.i = 0
        self.diags: list[Diagnostic] = []
        self.name = None
        self.alphabet = None
        self.params: dict[str, float] = {}
        self.vars: list[tuple[str, float, float, float, Token]] = []
        self.tau = 1.0
        self.modes = []  # (name, is_init, flow_rows, edges, tok)
        self.terminals = []  # (mode name, preds, tok)

    # token helpers
    def peek(self, offset=0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self):
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def at(self, text):
        tok = self.peek()
        return tok.kind in ("sym", "ident") and tok.text == text

    def expect(self, text):
        tok = self.next()
        if tok.text != text or tok.kind not in ("sym", "ident"):
            raise _Fail(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def ident(self, what="identifier"):
        tok = self.next()
        if tok.kind != "ident":
            raise _Fail(f"expected {what}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def error(self, message, tok):
        self.diags.append(Diagnostic("error", message, tok.line, tok.column))

    # grammar
    def parse(self):
        while self.peek().kind != "eof":
            tok = self.ident("statement keyword")
            kw = tok.text
            if kw == "machine":
                self.name = self.ident("machine name").text
            elif kw == "alphabet":
                self.parse_alphabet(tok)
            elif kw == "param":
                name = self.ident("parameter name")
                self.expect("=")
                value = self.number()
                if name.text in self.params:
                    self.error(f"parameter {name.text} declared twice", name)
                self.params[name.text] = value
            elif kw == "var":
                name = self.ident("variable name")
                self.expect(":")
                self.expect("real")
                self.expect("init")
                init = self.number()
                self.expect("bounds")
                lo, hi, lo_c, hi_c = self.interval()
                if any(v[0] == name.text for v in self.vars):
                    self.error(f"variable {name.text} declared twice", name)
                if lo > hi:
                    self.error(f"variable {name.text} has empty bounds", name)
                self.vars.append((name.text, init, lo, hi, name))
            elif kw == "tau":
                self.tau = self.number()
            elif kw == "mode":
                self.parse_mode()
            elif kw == "terminal":
                mode = self.ident("mode name")
                preds = []
                if self.at("when"):
                    self.next()
                    preds = self.predicates(allow_k=True)
                self.terminals.append((mode.text, preds, mode))
            else:
                raise _Fail(f"unknown statement {kw!r}", tok)

    def parse_alphabet(self, tok):
        self.expect("{")
        names = []
        if not self.at("}"):
            while True:
                t = self.ident("proposition name")
                if t.text in names:
                    self.error(f"proposition {t.text} listed twice", t)
                elif t.text in ("true", "k", "in", "when"):
                    self.error(f"{t.text!r} is reserved", t)
                else:
                    names.append(t.text)
                if self.at(","):
                    self.next()
                    continue
                break
        self.expect("}")
        self.alphabet = names

    def parse_mode(self):
        name = self.ident("mode name")
        is_init = False
        if self.at("init"):
            self.next()
            is_init = True
        self.expect("{")
        flow = None
        edges = []
        while not self.at("}"):
            tok = self.peek()
            if self.at("flow"):
                self.next()
                if flow is not None:
                    self.error(f"mode {name.text} has two flow blocks", tok)
                flow = self.parse_flow()
            elif self.at("on"):
                self.next()
                formula = self.formula()
                preds = []
                if self.at("when"):
                    self.next()
                    preds = self.predicates(allow_k=True)
                self.expect("->")
                target = self.ident("target mode")
                self.expect("reward")
                reward = self.number()
                edges.append((formula, preds, target, reward, tok))
            else:
                raise _Fail(f"expected 'flow', 'on' or '}}', found {tok.text or 'end of input'!r}", tok)
        self.expect("}")
        self.modes.append((name.text, is_init, flow, edges, name))

    def parse_flow(self):
        self.expect("{")
        rows = []
        while not self.at("}"):
            var = self.ident("variable name")
            self.expect("'")
            self.expect("=")
            expr = self.affine(allow_k=False)
            rows.append((var, expr))
            if self.at(";"):
                self.next()
            elif not self.at("}"):
                raise _Fail("expected ';' or '}'", self.peek())
        self.expect("}")
        return rows

    # numbers: literals, params, inf, with an optional sign
    def number(self):
        sign = 1.0
        while self.at("-") or self.at("+"):
            if self.next().text == "-":
                sign = -sign
        tok = self.next()
        if tok.kind == "number":
            return sign * float(tok.text)
        if tok.kind == "ident":
            if tok.text == "inf":
                return sign * math.inf
            if tok.text in self.params:
                return sign * self.params[tok.text]
            self.error(f"unknown parameter {tok.text}", tok)
            return 0.0
        raise _Fail(f"expected a number, found {tok.text or 'end of input'!r}", tok)

    def interval(self):
        open_tok = self.next()
        if open_tok.text not in ("[", "("):
            raise _Fail("expected '[' or '('", open_tok)
        lo = self.number()
        self.expect(",")
        hi = self.number()
        close = self.next()
        if close.text not in ("]", ")"):
            raise _Fail("expected ']' or ')'", close)
        return lo, hi, open_tok.text == "[", close.text == "]"

    def predicates(self, allow_k):
        preds = [self.predicate(allow_k)]
        while self.at("and"):
            self.next()
            preds.append(self.predicate(allow_k))
        return preds

    def predicate(self, allow_k):
        tok = self.peek()
        expr = self.affine(allow_k)
        self.expect("in")
        lo, hi, lo_c, hi_c = self.interval()
        return (expr, lo, hi, lo_c, hi_c, tok)

    # affine expressions
    def affine(self, allow_k):
        expr = self.term(allow_k)
        while self.at("+") or self.at("-"):
            sign = 1.0 if self.next().text == "+" else -1.0
            expr = expr.add(self.term(allow_k), sign)
        return expr

    def term(self, allow_k):
        expr = self.unary(allow_k)
        while self.at("*") or self.at("/"):
            op = self.next()
            rhs = self.unary(allow_k)
            if op.text == "*":
                if expr.is_const():
                    expr = rhs.scale(expr.const)
                elif rhs.is_const():
                    expr = expr.scale(rhs.const)
                else:
                    raise _Fail("product of two non-constant terms is not affine", op)
            else:
                if not rhs.is_const():
                    raise _Fail("division by a non-constant term is not affine", op)
                if rhs.const == 0:
                    raise _Fail("division by zero", op)
                expr = expr.scale(1.0 / rhs.const)
        return expr

    def unary(self, allow_k):
        if self.at("-"):
            self.next()
            return self.unary(allow_k).scale(-1.0)
        if self.at("+"):
            self.next()
            return self.unary(allow_k)
        tok = self.next()
        if tok.kind == "number":
            return _Linear(const=float(tok.text))
        if tok.text == "(":
            expr = self.affine(allow_k)
            self.expect(")")
            return expr
        if tok.kind == "ident":
            if tok.text == "inf":
                return _Linear(const=math.inf)
            if tok.text == "k":
                if not allow_k:
                    raise _Fail("the step counter k cannot appear in a flow", tok)
                return _Linear({"k": 1.0})
            if tok.text in self.params:
                return _Linear(const=self.params[tok.text])
            if any(v[0] == tok.text for v in self.vars):
                return _Linear({tok.text: 1.0})
            self.error(f"unknown variable or parameter {tok.text}", tok)
            return _Linear()
        raise _Fail(f"expected an expression, found {tok.text or 'end of input'!r}", tok)

    # boolean formulas: ! binds tighter than &, & tighter than |
    def formula(self):
        f = self.conj()
        while self.at("|"):
            self.next()
            f = Or(f, self.conj())
        return f

    def conj(self):
        f = self.neg()
        while self.at("&"):
            self.next()
            f = And(f, self.neg())
        return f

    def neg(self):
        if self.at("!"):
            self.next()
            return Not(self.neg())
        tok = self.next()
        if tok.text == "(":
            f = self.formula()
            self.expect(")")
            return f
        if tok.kind == "ident":
            if tok.text == "true":
                return TrueF()
            if self.alphabet is not None and tok.text not in self.alphabet:
                self.error(f"unknown proposition {tok.text}", tok)
            return Prop(tok.text)
        raise _Fail(f"expected a proposition, found {tok.text or 'end of input'!r}", tok)

    # assembly
    def build(self) -> PrmDefinition:
        var_names = [v[0] for v in self.vars]
        n = len(var_names)
        mode_names = [m[0] for m in self.modes]
        first = self.tokens[0]
        if self.name is None:
            self.error("missing 'machine <name>' statement", first)
        if self.alphabet is None:
            self.error("missing 'alphabet { ... }' statement", first)
        if not self.modes:
            self.error("machine declares no modes", first)
        seen = set()
        for name, _, _, _, tok in self.modes:
            if name in seen:
                self.error(f"mode {name} declared twice", tok)
            seen.add(name)
        inits = [m for m in self.modes if m[1]]
        if self.modes and len(inits) != 1:
            self.error(f"exactly one mode must be marked init, found {len(inits)}", (inits[1] if len(inits) > 1 else self.modes[0])[4])

        def vec(expr):
            return tuple(float(expr.coef.get(v, 0.0)) for v in var_names)

        def interval(pred):
            expr, lo, hi, lo_c, hi_c, _ = pred
            return Interval(vec(expr), float(expr.coef.get("k", 0.0)), float(expr.const), lo, hi, lo_c, hi_c)

        modes = []
        for name, _, flow_rows, edge_specs, tok in self.modes:
            matrix = [[0.0] * n for _ in range(n)]
            offset = [0.0] * n
            if flow_rows is None:
                if n:
                    self.error(f"mode {name} has no flow block but declares {n} variables", tok)
            else:
                defined = set()
                for var, expr in flow_rows:
                    if var.text not in var_names:
                        self.error(f"flow of mode {name} names undeclared variable {var.text}", var)
                        continue
                    if var.text in defined:
                        self.error(f"flow of mode {name} defines {var.text} twice", var)
                    defined.add(var.text)
                    i = var_names.index(var.text)
                    matrix[i] = list(vec(expr))
                    offset[i] = float(expr.const)
                missing = [v for v in var_names if v not in defined]
                if missing:
                    self.error(
                        f"flow of mode {name} has {len(defined)} entries for {n} variables (missing {', '.join(missing)})",
                        tok,
                    )
            edges = []
            for formula, preds, target, reward, etok in edge_specs:
                if target.text not in mode_names:
                    self.error(f"undefined mode {target.text}", target)
                    continue
                if not math.isfinite(reward):
                    self.error("edge reward must be finite", etok)
                edges.append(
                    Edge(
                        Guard(formula, tuple(interval(p) for p in preds)),
                        mode_names.index(target.text),
                        reward,
                        line=etok.line,
                    )
                )
            flow = FlowSpec(tuple(tuple(r) for r in matrix), tuple(offset))
            modes.append(Mode(name, flow, tuple(edges), line=tok.line))

        terminals = []
        for mode, preds, tok in self.terminals:
            if mode not in mode_names:
                self.error(f"undefined mode {mode}", tok)
                continue
            terminals.append(Terminal(mode_names.index(mode), tuple(interval(p) for p in preds)))

        if self.diags:
            raise PrmSyntaxError(self.diags, self.doc.origin)
        try:
            return PrmDefinition(
                name=self.name,
                props=PropositionSet(tuple(self.alphabet)),
                var_names=tuple(var_names),
                psi_init=tuple(float(v[1]) for v in self.vars),
                psi_bounds=tuple((float(v[2]), float(v[3])) for v in self.vars),
                modes=tuple(modes),
                initial_mode=mode_names.index(inits[0][0]),
                terminals=tuple(terminals),
                params=tuple(self.params.items()),
                tau=float(self.tau),
            )
        except DefinitionError as exc:
            raise PrmSyntaxError([Diagnostic("error", str(exc), first.line, first.column)], self.doc.origin)


def parse_prm(doc: SourceDocument | str, origin: str = "<inline>") -> PrmDefinition:
    """Parse machine source; raises :class:`PrmSyntaxError` with diagnostics on failure."""
    if isinstance(doc, str):
        doc = SourceDocument(doc, origin)
    try:
        p = _Parser(doc)
        p.parse()
    except _Fail as exc:
        raise PrmSyntaxError([Diagnostic("error", exc.message, exc.tok.line, exc.tok.column)], doc.origin)
    try:
        return p.build()
    except _Fail as exc:
        raise PrmSyntaxError([Diagnostic("error", exc.message, exc.tok.line, exc.tok.column)], doc.origin)


def load_prm(path) -> PrmDefinition:
    """Load a ``.prm`` file; bare fixture names (``a_r2``) resolve to shipped fixtures."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = FIXTURE_DIR / f"{path}.prm"
    return parse_prm(SourceDocument(p.read_text(encoding="utf-8"), str(p)))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _sample_axis(lo, hi, n):
    if math.isfinite(lo) and math.isfinite(hi):
        return np.linspace(lo, hi, n)
    centre = 0.0 if not math.isfinite(lo) and not math.isfinite(hi) else (lo if math.isfinite(lo) else hi)
    return np.linspace(centre - 100.0, centre + 100.0, n)


def _formula_text(f: Formula, top=True) -> str:
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, Prop):
        return f.name
    if isinstance(f, Not):
        inner = _formula_text(f.arg, top=False)
        return "!" + (f"({inner})" if isinstance(f.arg, (And, Or)) else inner)
    op = " & " if isinstance(f, And) else " | "
    text = _formula_text(f.left, top=False) + op + _formula_text(f.right, top=False)
    return text if top else f"({text})"


def validate_prm(
    prm: PrmDefinition,
    samples: int = 8,
    steps: Sequence[int] | None = None,
) -> list[Diagnostic]:
    """Check determinism and totality of every mode over all labels and a psi grid.

    The psi grid has ``samples`` points per dimension spanning ``psi_bounds``
    (endpoints included).  Guards that read ``k`` are also checked at each of
    ``steps`` (default 0, 1, 5, 10, 50, 100, 1000).  Grid sampling is a
    practical check, not a proof of totality over the continuum.
    """
    diags = []
    if steps is None:
        steps = (0, 1, 5, 10, 50, 100, 1000) if prm.uses_step else (0,)
    axes = [_sample_axis(lo, hi, samples) for lo, hi in prm.psi_bounds]
    grid = (
        np.array(np.meshgrid(*axes, indexing="ij")).reshape(prm.psi_dim, -1).T
        if prm.psi_dim
        else np.zeros((1, 0))
    )
    labels = prm.props.all_labels()
    for mi, mode in enumerate(prm.modes):
        term_preds = [t.predicates for t in prm.terminals if t.mode == mi]
        for k in steps:
            live = np.ones(len(grid), dtype=bool)
            for preds in term_preds:
                hit = np.ones(len(grid), dtype=bool)
                for p in preds:
                    hit &= p.holds_many(grid, k)
                live &= ~hit
            if not live.any():
                continue
            count = np.zeros((len(labels), len(grid)), dtype=int)
            for e in mode.edges:
                lab_ok = np.array([e.guard.formula.holds(lab) for lab in labels])
                pt_ok = np.ones(len(grid), dtype=bool)
                for p in e.guard.predicates:
                    pt_ok &= p.holds_many(grid, k)
                count += np.outer(lab_ok, pt_ok)
            count[:, ~live] = 1
            for kind, bad in (("totality", count == 0), ("determinism", count > 1)):
                if bad.any():
                    li, pi = np.argwhere(bad)[0]
                    psi = tuple(float(v) for v in grid[pi])
                    what = "no edge is" if kind == "totality" else f"{count[li, pi]} edges are"
                    diags.append(
                        Diagnostic(
                            "error",
                            f"{kind} error in mode {mode.name}: {what} enabled for label "
                            f"{{{', '.join(sorted(labels[li]))}}} at psi={psi}, k={k}",
                            max(mode.line, 1),
                            1,
                        )
                    )
            if any(d.message.startswith(("totality error in mode " + mode.name, "determinism error in mode " + mode.name)) for d in diags):
                break
    if is_terminal(prm, prm.initial_state()):
        diags.append(Diagnostic("error", "initial state is terminal", max(prm.modes[prm.initial_mode].line, 1), 1))
    for (lo, hi), v, name in zip(prm.psi_bounds, prm.psi_init, prm.var_names):
        if not lo <= v <= hi:
            diags.append(Diagnostic("error", f"initial value of {name} lies outside its bounds", 1, 1))
    for mode in prm.modes:
        for e in mode.edges:
            if not math.isfinite(e.reward):
                diags.append(Diagnostic("error", f"non-finite reward in mode {mode.name}", max(e.line, 1), 1))
    return diags


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v))


def _affine_text(coeffs: Sequence[float], names: Sequence[str], const: float) -> str:
    parts = []
    for c, name in zip(coeffs, names):
        if c != 0:
            parts.append((c, name if abs(c) == 1.0 else f"{_num(abs(c))} * {name}"))
    if const != 0 or not parts:
        parts.append((const, _num(abs(const))))
    text = ""
    for i, (c, body) in enumerate(parts):
        neg = math.copysign(1.0, c) < 0
        if i == 0:
            text = ("-" if neg else "") + body
        else:
            text += (" - " if neg else " + ") + body
    return text


def _interval_text(p: Interval, names: Sequence[str]) -> str:
    expr = _affine_text(tuple(p.coeffs) + (p.k_coeff,), tuple(names) + ("k",), p.offset)
    lb = "[" if p.lo_closed else "("
    rb = "]" if p.hi_closed else ")"
    return f"{expr} in {lb}{_num(p.lo)}, {_num(p.hi)}{rb}"


def serialize_prm(prm: PrmDefinition) -> SourceDocument:
    """Canonical source text; ``parse_prm(serialize_prm(p)) == p``."""
    names = prm.var_names
    out = [f"machine {prm.name}", f"alphabet {{ {', '.join(prm.props.symbols)} }}", f"tau {_num(prm.tau)}"]
    for name, value in prm.params:
        out.append(f"param {name} = {_num(value)}")
    for name, init, (lo, hi) in zip(names, prm.psi_init, prm.psi_bounds):
        out.append(f"var {name} : real init {_num(init)} bounds [{_num(lo)}, {_num(hi)}]")
    for i, mode in enumerate(prm.modes):
        out.append("")
        out.append(f"mode {mode.name}{' init' if i == prm.initial_mode else ''} {{")
        if names:
            rows = [
                f"{name}' = {_affine_text(mode.flow.matrix[j], names, mode.flow.offset[j])};"
                for j, name in enumerate(names)
            ]
            out.append(f"  flow {{ {' '.join(rows)} }}")
        for e in mode.edges:
            guard = _formula_text(e.guard.formula)
            if e.guard.predicates:
                guard += " when " + " and ".join(_interval_text(p, names) for p in e.guard.predicates)
            out.append(f"  on {guard} -> {prm.modes[e.target].name} reward {_num(e.reward)}")
        out.append("}")
    if prm.terminals:
        out.append("")
    for t in prm.terminals:
        line = f"terminal {prm.modes[t.mode].name}"
        if t.predicates:
            line += " when " + " and ".join(_interval_text(p, names) for p in t.predicates)
        out.append(line)
    return SourceDocument("\n".join(out) + "\n", f"<serialized {prm.name}>")
