"""Tiny arithmetic expression language for coefficient documents.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | 't' | 'x' | FUNC '(' expr ')' | '(' expr ')'
    FUNC   := sin | cos | exp | tanh

Expressions compile to vectorised numpy callables ``f(t, x)``.
"""

from __future__ import annotations

import re

import numpy as np

FUNCS = ("sin", "cos", "exp", "tanh")
_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")


class ExpressionError(ValueError):
    """Parse failure with the 0-based character position of the problem."""

    def __init__(self, message, position, source):
        super().__init__(f"{message} at position {position} in {source!r}")
        self.position = position
        self.source = source


def _tokenize(src):
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            break
        start = m.start(m.lastindex) if m.lastindex else m.end()
        if m.group(1) is not None:
            toks.append(("num", m.group(1), start))
        elif m.group(2) is not None:
            toks.append(("name", m.group(2), start))
        elif m.group(3) is not None:
            if m.group(3).isspace():
                pos = m.end()
                continue
            toks.append(("op", m.group(3), start))
        pos = m.end()
    toks.append(("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, msg, tok=None):
        tok = tok or self.peek()
        raise ExpressionError(msg, tok[2], self.src)

    def parse(self):
        if self.peek()[0] == "end":
            self.fail("empty expression")
        out = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected {self.peek()[1]!r}")
        return out

    def expr(self):
        left = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            left = f"({left} {op} {self.term()})"
        return left

    def term(self):
        left = self.unary()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            left = f"({left} {op} {self.unary()})"
        return left

    def unary(self):
        if self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            return f"({op}{self.unary()})"
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return f"({base} ** {self.unary()})"
        return base

    def atom(self):
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return repr(float(text))
        if kind == "name":
            if text in ("t", "x"):
                return text
            if text in FUNCS:
                if self.peek()[:2] != ("op", "("):
                    self.fail(f"expected '(' after {text}")
                self.take()
                arg = self.expr()
                if self.peek()[:2] != ("op", ")"):
                    self.fail("expected ')'")
                self.take()
                return f"_np.{text}({arg})"
            self.fail(f"unknown identifier {text!r}", tok)
        if (kind, text) == ("op", "("):
            inner = self.expr()
            if self.peek()[:2] != ("op", ")"):
                self.fail("expected ')'")
            self.take()
            return inner
        if kind == "end":
            self.fail("unexpected end of expression", tok)
        self.fail(f"unexpected {text!r}", tok)


def compile_expression(src):
    """Compile ``src`` into a broadcasting callable ``f(t, x) -> ndarray``."""
    if not isinstance(src, str):
        raise ExpressionError("expression must be a string", 0, str(src))
    body = _Parser(src).parse()
    code = f"lambda t, x: _bc({body}, t, x)"
    fn = eval(code, {"_np": np, "_bc": _broadcast, "__builtins__": {}})
    fn.source = src
    return fn


def _broadcast(value, t, x):
    shape = np.broadcast_shapes(np.shape(t), np.shape(x))
    value = np.asarray(value, dtype=float)
    if value.shape != shape:
        value = np.broadcast_to(value, shape).copy()
    return value
