"""Expression language for user-defined constitutive responses.

A model source is UTF-8 text with ``#`` comments and three statement forms::

    param <name> = <number>
    let <name> = <expression>
    response = <expression>

Expressions know three kinds: ``scalar``, ``vector`` (length 3) and
``matrix`` (3 x 3).  The built-in identifiers are ``X1 X2 X3`` (scalars),
``X`` (vector), ``F`` (matrix) and ``I`` (matrix).  Kinds are checked
statically at parse time; evaluation failures such as division by zero are
reported as evaluation errors, never parse errors.  ``if(cond, a, b)`` is
lazy in the unselected branch.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ModelParseError

__all__ = [
    "ModelDef",
    "parse_source",
    "parse_expression",
    "pretty_source",
    "pretty_expr",
    "evaluate_model_def",
    "MAX_SOURCE_BYTES",
    "SCALAR",
    "VECTOR",
    "MATRIX",
]

MAX_SOURCE_BYTES = 64 * 1024

SCALAR = "scalar"
VECTOR = "vector3"
MATRIX = "matrix3"

_BASE_KINDS = {"X1": SCALAR, "X2": SCALAR, "X3": SCALAR, "X": VECTOR, "F": MATRIX, "I": MATRIX}

_RELOPS = ("<=", ">=", "==", "<", ">")

# function name -> list of (argument kinds, result kind)
_FUNCTIONS = {
    "det": [((MATRIX,), SCALAR)],
    "tr": [((MATRIX,), SCALAR)],
    "inv": [((MATRIX,), MATRIX)],
    "exp": [((SCALAR,), SCALAR)],
    "log": [((SCALAR,), SCALAR)],
    "sqrt": [((SCALAR,), SCALAR)],
    "abs": [((SCALAR,), SCALAR)],
    "norm2": [((VECTOR,), SCALAR)],
    "dot": [((VECTOR, VECTOR), SCALAR)],
    "cross": [((VECTOR, VECTOR), VECTOR)],
    "outer": [((VECTOR, VECTOR), MATRIX)],
}


# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class _Token:
    type: str  # num, ident, op, end
    text: str
    line: int
    col: int


_OPS = ("<=", ">=", "==", "+", "-", "*", "/", "^", "(", ")", ",", "'", "<", ">", "=")


def _tokenize(text):
    tokens = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == "\n":
            tokens.append(_Token("newline", "\n", line, col))
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            word = text[i:j]
            try:
                float(word)
            except ValueError:
                raise ModelParseError(f"bad number literal {word!r}", line, col) from None
            tokens.append(_Token("num", word, line, col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        for op in _OPS:
            if text.startswith(op, i):
                tokens.append(_Token("op", op, line, col))
                i += len(op)
                col += len(op)
                break
        else:
            raise ModelParseError(f"unexpected character {c!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float
    kind: str = SCALAR
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Name:
    name: str
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Neg:
    arg: object
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Power:
    base: object
    exponent: int
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Transpose:
    arg: object
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class IfExpr:
    relop: str
    lhs: object
    rhs: object
    then: object
    other: object
    kind: str
    pos: tuple = field(default=(0, 0), compare=False)


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens, env_kinds):
        self.tokens = tokens
        self.i = 0
        self.env = env_kinds

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        tok = self.next()
        if tok.text != text:
            raise ModelParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        raise ModelParseError(message, tok.line, tok.col)

    # expr := term (("+"|"-") term)*
    def expr(self):
        node = self.term()
        while self.peek().text in ("+", "-") and self.peek().type == "op":
            tok = self.next()
            rhs = self.term()
            if node.kind != rhs.kind:
                self.error(f"cannot apply {tok.text!r} to {node.kind} and {rhs.kind}", tok)
            node = BinOp(tok.text, node, rhs, node.kind, pos=(tok.line, tok.col))
        return node

    # term := factor (("*"|"/") factor)*
    def term(self):
        node = self.factor()
        while self.peek().text in ("*", "/") and self.peek().type == "op":
            tok = self.next()
            rhs = self.factor()
            node = self._combine(tok, node, rhs)
        return node

    def _combine(self, tok, lhs, rhs):
        if tok.text == "/":
            if rhs.kind != SCALAR:
                self.error(f"division by a {rhs.kind} is not defined", tok)
            return BinOp("/", lhs, rhs, lhs.kind, pos=(tok.line, tok.col))
        # "*": scalar scaling of anything, matrix*matrix, matrix*vector
        if lhs.kind == SCALAR:
            return BinOp("*", lhs, rhs, rhs.kind, pos=(tok.line, tok.col))
        if rhs.kind == SCALAR:
            return BinOp("*", lhs, rhs, lhs.kind, pos=(tok.line, tok.col))
        if lhs.kind == MATRIX and rhs.kind == MATRIX:
            return BinOp("*", lhs, rhs, MATRIX, pos=(tok.line, tok.col))
        if lhs.kind == MATRIX and rhs.kind == VECTOR:
            return BinOp("*", lhs, rhs, VECTOR, pos=(tok.line, tok.col))
        self.error(f"cannot multiply {lhs.kind} by {rhs.kind}", tok)

    # factor := unary ("^" integer)?
    def factor(self):
        node = self.unary()
        if self.peek().text == "^" and self.peek().type == "op":
            tok = self.next()
            sign = 1
            if self.peek().text == "-":
                self.next()
                sign = -1
            num = self.next()
            if num.type != "num" or not float(num.text).is_integer():
                self.error("exponent must be an integer", num)
            if node.kind != SCALAR:
                self.error(f"cannot raise a {node.kind} to a power", tok)
            node = Power(node, sign * int(float(num.text)), SCALAR, pos=(tok.line, tok.col))
        return node

    # unary := "-" unary | atom
    def unary(self):
        if self.peek().text == "-" and self.peek().type == "op":
            tok = self.next()
            arg = self.unary()
            return Neg(arg, arg.kind, pos=(tok.line, tok.col))
        return self.postfix()

    def postfix(self):
        node = self.atom()
        while self.peek().text == "'" and self.peek().type == "op":
            tok = self.next()
            if node.kind != MATRIX:
                self.error(f"transpose applies to a matrix, not a {node.kind}", tok)
            node = Transpose(node, MATRIX, pos=(tok.line, tok.col))
        return node

    # atom := number | ident | call | "(" expr ")"
    def atom(self):
        tok = self.peek()
        if tok.text == "(":
            self.next()
            node = self.expr()
            self.expect(")")
            return node
        if tok.type == "num":
            self.next()
            return Num(float(tok.text), pos=(tok.line, tok.col))
        if tok.type == "ident":
            self.next()
            if self.peek().text == "(":
                return self.call(tok)
            kind = self.env.get(tok.text)
            if kind is None:
                self.error(f"unknown identifier {tok.text!r}", tok)
            return Name(tok.text, kind, pos=(tok.line, tok.col))
        self.error(f"unexpected {tok.text or 'end of input'!r}", tok)

    def call(self, name_tok):
        name = name_tok.text
        self.expect("(")
        if name == "if":
            lhs = self.expr()
            op_tok = self.next()
            if op_tok.text not in _RELOPS:
                self.error("expected a comparison operator in if(...)", op_tok)
            rhs = self.expr()
            if lhs.kind != SCALAR or rhs.kind != SCALAR:
                self.error("comparison sides must be scalars", op_tok)
            self.expect(",")
            then = self.expr()
            self.expect(",")
            other = self.expr()
            self.expect(")")
            if then.kind != other.kind:
                self.error(
                    f"if(...) branches must agree in kind ({then.kind} vs {other.kind})",
                    name_tok,
                )
            return IfExpr(op_tok.text, lhs, rhs, then, other, then.kind, pos=(name_tok.line, name_tok.col))
        sigs = _FUNCTIONS.get(name)
        if sigs is None:
            self.error(f"unknown function {name!r}", name_tok)
        args = [self.expr()]
        while self.peek().text == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")
        got = tuple(a.kind for a in args)
        for want, result in sigs:
            if want == got:
                return Call(name, tuple(args), result, pos=(name_tok.line, name_tok.col))
        self.error(f"{name}() does not accept argument kinds {got}", name_tok)


def parse_expression(text, extra_kinds=None):
    """Parse a single expression; returns the kind-annotated tree."""
    env = dict(_BASE_KINDS)
    if extra_kinds:
        env.update(extra_kinds)
    tokens = [t for t in _tokenize(text) if t.type != "newline"]
    parser = _Parser(tokens, env)
    node = parser.expr()
    tail = parser.peek()
    if tail.type != "end":
        parser.error(f"unexpected trailing input {tail.text!r}", tail)
    return node


# ---------------------------------------------------------------------------
# file-level parsing


@dataclass(frozen=True)
class ModelDef:
    """Parsed model source: parameters, let-bindings and the response tree."""

    params: tuple  # of (name, float)
    lets: tuple  # of (name, node)
    response: object
    kind: str

    @property
    def dim(self):
        return {SCALAR: 1, VECTOR: 3, MATRIX: 9}[self.kind]


def parse_source(text):
    """Parse full model-source text into a :class:`ModelDef`."""
    if len(text.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise ModelParseError(f"model source exceeds {MAX_SOURCE_BYTES} bytes")
    tokens = _tokenize(text)
    # split into statements on newlines
    lines, current = [], []
    for tok in tokens:
        if tok.type in ("newline", "end"):
            if current:
                lines.append(current)
            current = []
        else:
            current.append(tok)

    env = dict(_BASE_KINDS)
    params = []
    lets = []
    response = None
    for line in lines:
        head = line[0]
        if head.type != "ident":
            raise ModelParseError(f"statement must start with param/let/response, found {head.text!r}",
                                  head.line, head.col)
        if head.text == "param":
            if len(line) < 4 or line[1].type != "ident" or line[2].text != "=":
                raise ModelParseError("expected: param <name> = <number>", head.line, head.col)
            name = line[1].text
            _check_fresh_name(name, env, line[1])
            rest = line[3:]
            sign = 1.0
            if rest and rest[0].text == "-":
                sign = -1.0
                rest = rest[1:]
            if len(rest) != 1 or rest[0].type != "num":
                raise ModelParseError("param value must be a number", head.line, head.col)
            params.append((name, sign * float(rest[0].text)))
            env[name] = SCALAR
        elif head.text == "let":
            if len(line) < 4 or line[1].type != "ident" or line[2].text != "=":
                raise ModelParseError("expected: let <name> = <expression>", head.line, head.col)
            name = line[1].text
            _check_fresh_name(name, env, line[1])
            node = _parse_statement_expr(line[3:], env)
            lets.append((name, node))
            env[name] = node.kind
        elif head.text == "response":
            if len(line) < 3 or line[1].text != "=":
                raise ModelParseError("expected: response = <expression>", head.line, head.col)
            if response is not None:
                raise ModelParseError("more than one response statement", head.line, head.col)
            response = _parse_statement_expr(line[2:], env)
        else:
            raise ModelParseError(f"unknown statement {head.text!r}", head.line, head.col)
    if response is None:
        raise ModelParseError("model source has no response statement")
    return ModelDef(tuple(params), tuple(lets), response, response.kind)


def _check_fresh_name(name, env, tok):
    if name in _BASE_KINDS or name in _FUNCTIONS or name == "if":
        raise ModelParseError(f"{name!r} is reserved", tok.line, tok.col)
    if name in env:
        raise ModelParseError(f"{name!r} is already defined", tok.line, tok.col)


def _parse_statement_expr(tokens, env):
    parser = _Parser(list(tokens) + [_Token("end", "", 0, 0)], env)
    node = parser.expr()
    tail = parser.peek()
    if tail.type != "end":
        parser.error(f"unexpected trailing input {tail.text!r}", tail)
    return node


# ---------------------------------------------------------------------------
# evaluation


def _ev(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        return env[node.name]
    if isinstance(node, Neg):
        return -_ev(node.arg, env)
    if isinstance(node, BinOp):
        a = _ev(node.left, env)
        b = _ev(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            if node.left.kind == SCALAR or node.right.kind == SCALAR:
                return a * b
            return a @ b
        # division; the divisor kind-checks as a scalar
        if float(b) == 0.0:
            raise EvaluationError(f"division by zero at line {node.pos[0]}, column {node.pos[1]}")
        return a / b
    if isinstance(node, Power):
        base = _ev(node.base, env)
        if node.exponent < 0 and float(base) == 0.0:
            raise EvaluationError(f"zero raised to a negative power at line {node.pos[0]}, column {node.pos[1]}")
        return float(base) ** node.exponent
    if isinstance(node, Transpose):
        return _ev(node.arg, env).T
    if isinstance(node, IfExpr):
        a = float(_ev(node.lhs, env))
        b = float(_ev(node.rhs, env))
        take = {
            "<=": a <= b,
            "<": a < b,
            ">=": a >= b,
            ">": a > b,
            "==": a == b,
        }[node.relop]
        return _ev(node.then if take else node.other, env)
    if isinstance(node, Call):
        args = [_ev(a, env) for a in node.args]
        return _call(node, args)
    raise TypeError(f"unknown node {node!r}")


def _call(node, args):
    name = node.func
    try:
        if name == "det":
            return float(np.linalg.det(args[0]))
        if name == "tr":
            return float(np.trace(args[0]))
        if name == "inv":
            try:
                return np.linalg.inv(args[0])
            except np.linalg.LinAlgError:
                raise EvaluationError(
                    f"singular matrix in inv() at line {node.pos[0]}, column {node.pos[1]}"
                ) from None
        if name == "exp":
            return float(np.exp(args[0]))
        if name == "log":
            if args[0] <= 0.0:
                raise EvaluationError(f"log of non-positive value at line {node.pos[0]}, column {node.pos[1]}")
            return float(np.log(args[0]))
        if name == "sqrt":
            if args[0] < 0.0:
                raise EvaluationError(f"sqrt of negative value at line {node.pos[0]}, column {node.pos[1]}")
            return float(np.sqrt(args[0]))
        if name == "abs":
            return abs(float(args[0]))
        if name == "norm2":
            return float(np.linalg.norm(args[0]))
        if name == "dot":
            return float(np.dot(args[0], args[1]))
        if name == "cross":
            return np.cross(args[0], args[1])
        if name == "outer":
            return np.outer(args[0], args[1])
    except EvaluationError:
        raise
    raise TypeError(f"unknown function {name!r}")


def evaluate_model_def(mdef, X, F, param_values=None):
    """Evaluate a parsed model at body point ``X`` and gradient ``F``.

    Returns the response flattened row-major to a vector of length
    ``mdef.dim``.
    """
    X = np.asarray(X, dtype=float)
    env = {
        "X1": float(X[0]),
        "X2": float(X[1]),
        "X3": float(X[2]),
        "X": X,
        "F": np.asarray(F, dtype=float),
        "I": np.eye(3),
    }
    for name, value in mdef.params:
        env[name] = float(value)
    if param_values:
        for name, value in param_values.items():
            if name not in env:
                raise EvaluationError(f"model has no parameter {name!r}")
            env[name] = float(value)
    for name, node in mdef.lets:
        env[name] = _ev(node, env)
    out = _ev(mdef.response, env)
    return np.atleast_1d(np.asarray(out, dtype=float)).ravel()


# ---------------------------------------------------------------------------
# pretty printing

_PREC_ADD = 1
_PREC_MUL = 2
_PREC_NEG = 3
_PREC_POW = 4
_PREC_POSTFIX = 5
_PREC_ATOM = 6


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC_ADD if node.op in "+-" else _PREC_MUL
    if isinstance(node, Neg):
        return _PREC_NEG
    if isinstance(node, Power):
        return _PREC_POW
    if isinstance(node, Transpose):
        return _PREC_POSTFIX
    return _PREC_ATOM


def _wrap(text, need):
    return f"({text})" if need else text


def pretty_expr(node):
    """Canonical text for an expression tree; reparsing reproduces the tree."""
    if isinstance(node, Num):
        return _fmt_number(node.value)
    if isinstance(node, Name):
        return node.name
    if isinstance(node, Neg):
        # a negation argument must reparse as a complete unary: another
        # negation or a postfix/atom, never a power or a binary op
        inner = pretty_expr(node.arg)
        need = not (_prec(node.arg) == _PREC_NEG or _prec(node.arg) >= _PREC_POSTFIX)
        return "-" + _wrap(inner, need)
    if isinstance(node, BinOp):
        p = _prec(node)
        left = _wrap(pretty_expr(node.left), _prec(node.left) < p)
        right = _wrap(pretty_expr(node.right), _prec(node.right) <= p)
        return f"{left} {node.op} {right}"
    if isinstance(node, Power):
        need = not (_prec(node.base) == _PREC_NEG or _prec(node.base) >= _PREC_POSTFIX)
        base = _wrap(pretty_expr(node.base), need)
        return f"{base}^{node.exponent}"
    if isinstance(node, Transpose):
        arg = _wrap(pretty_expr(node.arg), _prec(node.arg) < _PREC_POSTFIX)
        return arg + "'"
    if isinstance(node, IfExpr):
        return (
            f"if({pretty_expr(node.lhs)} {node.relop} {pretty_expr(node.rhs)}, "
            f"{pretty_expr(node.then)}, {pretty_expr(node.other)})"
        )
    if isinstance(node, Call):
        return f"{node.func}({', '.join(pretty_expr(a) for a in node.args)})"
    raise TypeError(f"unknown node {node!r}")


def _fmt_number(value):
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def pretty_source(mdef):
    """Canonical source text for a parsed model."""
    lines = []
    for name, value in mdef.params:
        lines.append(f"param {name} = {_fmt_number(value)}")
    for name, node in mdef.lets:
        lines.append(f"let {name} = {pretty_expr(node)}")
    lines.append(f"response = {pretty_expr(mdef.response)}")
    return "\n".join(lines) + "\n"
