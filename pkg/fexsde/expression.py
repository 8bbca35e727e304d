import json
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy
from pydantic import ValidationError
from sympy.printing.str import StrPrinter

from .errors import ConfigurationError, ExpressionParseError
from .models import ExpressionPayload, ReadoutPayload

EXPRESSION_FORMAT_VERSION = 1


class Arity(str, Enum):
    UNARY = "unary"
    BINARY = "binary"


class OperatorId:
    """Оператор дерева: значение, производная и символьная форма"""

    def __init__(self, symbol: str, kind: Arity, fn: Callable, grad: Callable,
                 sym: Callable):
        self.symbol = symbol
        self.kind = kind
        self.fn = fn
        self.grad = grad
        self.sym = sym

    def __repr__(self) -> str:
        return f"OperatorId({self.symbol!r}, {self.kind.value})"


UNARY_OPERATORS: Dict[str, OperatorId] = {}
BINARY_OPERATORS: Dict[str, OperatorId] = {}


def register_operator(op: OperatorId):
    target = UNARY_OPERATORS if op.kind == Arity.UNARY else BINARY_OPERATORS
    other = BINARY_OPERATORS if op.kind == Arity.UNARY else UNARY_OPERATORS
    if op.symbol in other:
        raise ConfigurationError(f"Operator {op.symbol} already registered as {other[op.symbol].kind.value}")
    target[op.symbol] = op


def get_operator(symbol: str) -> OperatorId:
    if symbol in UNARY_OPERATORS:
        return UNARY_OPERATORS[symbol]
    if symbol in BINARY_OPERATORS:
        return BINARY_OPERATORS[symbol]
    raise ConfigurationError(f"Unknown operator: {symbol}")


# Унарные: grad(s) = d fn / ds
for _op in [
    OperatorId("sin", Arity.UNARY, np.sin, np.cos, sympy.sin),
    OperatorId("cos", Arity.UNARY, np.cos, lambda s: -np.sin(s), sympy.cos),
    OperatorId("exp", Arity.UNARY, np.exp, np.exp, sympy.exp),
    OperatorId("zero", Arity.UNARY, np.zeros_like, np.zeros_like, lambda s: sympy.Integer(0)),
    OperatorId("Id", Arity.UNARY, lambda s: s, np.ones_like, lambda s: s),
    OperatorId("square", Arity.UNARY, lambda s: s * s, lambda s: 2.0 * s, lambda s: s ** 2),
    OperatorId("cube", Arity.UNARY, lambda s: s ** 3, lambda s: 3.0 * s * s, lambda s: s ** 3),
    OperatorId("fourth", Arity.UNARY, lambda s: s ** 4, lambda s: 4.0 * s ** 3, lambda s: s ** 4),
    # Бинарные: grad(l, r, upstream) -> (d_left, d_right)
    OperatorId("add", Arity.BINARY, np.add, lambda l, r, g: (g, g), lambda l, r: l + r),
    OperatorId("sub", Arity.BINARY, np.subtract, lambda l, r, g: (g, -g), lambda l, r: l - r),
    OperatorId("mul", Arity.BINARY, np.multiply, lambda l, r, g: (g * r, g * l), lambda l, r: l * r),
]:
    register_operator(_op)


class TemplateNode:
    def __init__(self, kind: Arity, children: Tuple["TemplateNode", ...] = ()):
        self.kind = kind
        self.children = children
        self.slot = -1
        self.index = -1

    def signature(self) -> str:
        tag = "u" if self.kind == Arity.UNARY else "b"
        if not self.children:
            return tag
        return f"{tag}({','.join(c.signature() for c in self.children)})"


class TreeTemplate:
    """Шаблон дерева фиксированной глубины.

    Слоты нумеруются так: сначала унарные узлы в post-order, затем бинарные.
    """

    def __init__(self, root: TemplateNode, depth: int):
        self.root = root
        self.depth = depth
        self.nodes: List[TemplateNode] = []
        self._collect(root)

        unary = [n for n in self.nodes if n.kind == Arity.UNARY]
        binary = [n for n in self.nodes if n.kind == Arity.BINARY]
        for slot, node in enumerate(unary + binary):
            node.slot = slot
        self.slot_kinds: List[Arity] = [n.kind for n in unary + binary]
        self.n_unary = len(unary)
        self.n_binary = len(binary)

    def _collect(self, node: TemplateNode):
        for child in node.children:
            self._collect(child)
        node.index = len(self.nodes)
        self.nodes.append(node)

    @property
    def n_slots(self) -> int:
        return len(self.slot_kinds)

    @property
    def signature(self) -> str:
        return self.root.signature()

    def n_params(self, dim: int) -> int:
        return 3 * self.n_unary + dim + 1

    def __eq__(self, other) -> bool:
        return isinstance(other, TreeTemplate) and self.signature == other.signature

    def __repr__(self) -> str:
        return f"TreeTemplate({self.signature})"


def build_template(depth: int) -> TreeTemplate:
    if depth == 1:
        root = TemplateNode(Arity.UNARY)
    elif depth == 2:
        root = TemplateNode(Arity.BINARY, (TemplateNode(Arity.UNARY), TemplateNode(Arity.UNARY)))
    elif depth == 3:
        inner = TemplateNode(Arity.BINARY, (TemplateNode(Arity.UNARY), TemplateNode(Arity.UNARY)))
        root = TemplateNode(Arity.UNARY, (inner,))
    else:
        raise ConfigurationError(f"Unsupported tree depth: {depth} (expected 1, 2 or 3)")
    return TreeTemplate(root, depth)


TEMPLATE_SIGNATURES = {build_template(d).signature: d for d in (1, 2, 3)}


class OperatorSequence:
    def __init__(self, template: TreeTemplate, ops: Sequence[Union[str, OperatorId]]):
        resolved = [get_operator(op) if isinstance(op, str) else op for op in ops]
        if len(resolved) != template.n_slots:
            raise ConfigurationError(
                f"Sequence length {len(resolved)} does not match {template.n_slots} template slots"
            )
        for slot, (op, kind) in enumerate(zip(resolved, template.slot_kinds)):
            if op.kind != kind:
                raise ConfigurationError(f"Slot {slot} expects a {kind.value} operator, got {op.symbol}")
        self.template = template
        self.ops: Tuple[OperatorId, ...] = tuple(resolved)

    @property
    def key(self) -> Tuple[str, ...]:
        return tuple(op.symbol for op in self.ops)

    def __eq__(self, other) -> bool:
        return isinstance(other, OperatorSequence) and self.key == other.key and self.template == other.template

    def __hash__(self) -> int:
        return hash((self.template.signature, self.key))

    def __repr__(self) -> str:
        return f"OperatorSequence({list(self.key)})"


class UnaryRecord:
    __slots__ = ("z", "s", "fs", "out")

    def __init__(self, z, s, fs, out):
        self.z = z
        self.s = s
        self.fs = fs
        self.out = out


class BinaryRecord:
    __slots__ = ("left", "right", "out")

    def __init__(self, left, right, out):
        self.left = left
        self.right = right
        self.out = out


class EvalTrace:
    """Промежуточные значения прямого прохода по узлам (в post-order)"""

    def __init__(self, x: np.ndarray, records: List[Union[UnaryRecord, BinaryRecord]],
                 root: np.ndarray, value: np.ndarray):
        self.x = x
        self.records = records
        self.root = root
        self.value = value

    def __len__(self) -> int:
        return len(self.records)

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))


class ExpressionInstance:
    """u(x, T, e, θ₁): шаблон + последовательность операторов + параметры.

    Параметры: (α, β, γ) на каждый унарный слот, затем readout w ∈ ℝ^d и b.
    Унарный узел считает α·u(β·z + γ) поэлементно.
    """

    def __init__(self, sequence: OperatorSequence, params: Sequence[float], input_dim: int):
        params = np.array(params, dtype=np.float64)
        expected = sequence.template.n_params(input_dim)
        if params.shape != (expected,):
            raise ConfigurationError(f"Expected {expected} parameters, got {params.shape}")
        params.setflags(write=False)
        self.sequence = sequence
        self.params = params
        self.input_dim = input_dim

    @property
    def template(self) -> TreeTemplate:
        return self.sequence.template

    @classmethod
    def initial(cls, sequence: OperatorSequence, input_dim: int,
                rng: Optional[np.random.Generator] = None, jitter: float = 0.1) -> "ExpressionInstance":
        n_unary = sequence.template.n_unary
        base = np.concatenate([
            np.tile([1.0, 1.0, 0.0], n_unary),
            np.full(input_dim, 1.0 / input_dim),
            [0.0],
        ])
        if rng is not None and jitter > 0:
            base = base + rng.uniform(-jitter, jitter, size=base.shape)
        return cls(sequence, base, input_dim)

    def with_params(self, params: Sequence[float]) -> "ExpressionInstance":
        return ExpressionInstance(self.sequence, params, self.input_dim)

    def unary_params(self, slot: int) -> Tuple[float, float, float]:
        a, b, g = self.params[3 * slot:3 * slot + 3]
        return float(a), float(b), float(g)

    @property
    def readout_w(self) -> np.ndarray:
        start = 3 * self.template.n_unary
        return self.params[start:start + self.input_dim]

    @property
    def readout_b(self) -> float:
        return float(self.params[-1])

    def predict(self, x: np.ndarray) -> np.ndarray:
        value, _ = evaluate(self, np.atleast_2d(x))
        return value

    def __repr__(self) -> str:
        return f"ExpressionInstance({list(self.sequence.key)}, dim={self.input_dim})"


def _forward_node(node: TemplateNode, expr: ExpressionInstance, x: np.ndarray,
                  records: List) -> np.ndarray:
    op = expr.sequence.ops[node.slot]
    if node.kind == Arity.UNARY:
        z = _forward_node(node.children[0], expr, x, records) if node.children else x
        a, b, g = expr.unary_params(node.slot)
        s = b * z + g
        fs = op.fn(s)
        out = a * fs
        records[node.index] = UnaryRecord(z, s, fs, out)
        return out
    left = _forward_node(node.children[0], expr, x, records)
    right = _forward_node(node.children[1], expr, x, records)
    out = op.fn(left, right)
    records[node.index] = BinaryRecord(left, right, out)
    return out


def evaluate(expr: ExpressionInstance, x: np.ndarray):
    """Значение выражения и трасса.

    x размерности (d,) даёт скаляр, x размерности (N, d) - вектор из N значений.
    Переполнение не бросает исключений: результат просто нефинитный.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    if batch.shape[1] != expr.input_dim:
        raise ConfigurationError(f"Input dimension {batch.shape[1]} != expression dimension {expr.input_dim}")

    records: List = [None] * len(expr.template.nodes)
    with np.errstate(over="ignore", invalid="ignore"):
        root = _forward_node(expr.template.root, expr, batch, records)
        value = root @ expr.readout_w + expr.readout_b
    trace = EvalTrace(batch, records, root, value)
    if single:
        return float(value[0]), trace
    return value, trace


def _backward_node(node: TemplateNode, expr: ExpressionInstance, trace: EvalTrace,
                   upstream: np.ndarray, grad: np.ndarray):
    op = expr.sequence.ops[node.slot]
    record = trace.records[node.index]
    if node.kind == Arity.UNARY:
        a, b, _ = expr.unary_params(node.slot)
        k = 3 * node.slot
        ds = upstream * a * op.grad(record.s)
        grad[k] += np.sum(upstream * record.fs)
        grad[k + 1] += np.sum(ds * record.z)
        grad[k + 2] += np.sum(ds)
        if node.children:
            _backward_node(node.children[0], expr, trace, ds * b, grad)
        return
    d_left, d_right = op.grad(record.left, record.right, upstream)
    _backward_node(node.children[0], expr, trace, d_left, grad)
    _backward_node(node.children[1], expr, trace, d_right, grad)


def grad_params(expr: ExpressionInstance, x: np.ndarray, upstream=1.0,
                trace: Optional[EvalTrace] = None) -> np.ndarray:
    """∂(Σ upstream·value)/∂θ₁ обратным проходом по трассе"""
    if trace is None:
        _, trace = evaluate(expr, x)
    n = trace.x.shape[0]
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (n,))

    grad = np.zeros_like(expr.params)
    start = 3 * expr.template.n_unary
    with np.errstate(over="ignore", invalid="ignore"):
        grad[start:start + expr.input_dim] = up @ trace.root
        grad[-1] = np.sum(up)
        root_upstream = up[:, None] * expr.readout_w[None, :]
        _backward_node(expr.template.root, expr, trace, root_upstream, grad)
    return grad


def mse_loss_and_grad(expr: ExpressionInstance, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    value, trace = evaluate(expr, x)
    residual = value - y
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(residual * residual))
    if not np.isfinite(loss):
        return float("inf"), np.full_like(expr.params, np.nan)
    grad = grad_params(expr, x, 2.0 * residual / len(y), trace)
    return loss, grad


def mse_loss(expr: ExpressionInstance, x: np.ndarray, y: np.ndarray) -> float:
    value, _ = evaluate(expr, x)
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean((value - y) ** 2))
    return loss if np.isfinite(loss) else float("inf")


# --- символьное представление и печать ---

def state_symbols(dim: int) -> List[sympy.Symbol]:
    return list(sympy.symbols(f"x1:{dim + 1}"))


def _sym_node(node: TemplateNode, expr: ExpressionInstance, leaves: List) -> List:
    op = expr.sequence.ops[node.slot]
    if node.kind == Arity.UNARY:
        z = _sym_node(node.children[0], expr, leaves) if node.children else leaves
        a, b, g = (sympy.Float(v) for v in expr.unary_params(node.slot))
        return [a * op.sym(b * zi + g) for zi in z]
    left = _sym_node(node.children[0], expr, leaves)
    right = _sym_node(node.children[1], expr, leaves)
    return [op.sym(l, r) for l, r in zip(left, right)]


def to_sympy(expr: ExpressionInstance):
    xs = state_symbols(expr.input_dim)
    root = _sym_node(expr.template.root, expr, xs)
    out = sympy.Float(expr.readout_b)
    for wi, vi in zip(expr.readout_w, root):
        out = out + sympy.Float(float(wi)) * vi
    return out


def polynomial_terms(expr: ExpressionInstance) -> Optional[Dict[Tuple[int, ...], float]]:
    """Моном -> коэффициент после раскрытия скобок; None если не многочлен"""
    xs = state_symbols(expr.input_dim)
    symbolic = to_sympy(expr)
    if not symbolic.is_polynomial(*xs):
        return None
    poly = sympy.Poly(sympy.expand(symbolic), *xs)
    return {monom: float(coeff) for monom, coeff in poly.terms() if coeff != 0}


def trig_features(expr: ExpressionInstance) -> Optional[Dict[str, Any]]:
    """Частота и амплитуда единственного sin/cos слагаемого (для одномерных выражений)"""
    symbolic = sympy.expand(to_sympy(expr), trig=False)
    atoms = [a for a in symbolic.atoms(sympy.sin, sympy.cos) if a.free_symbols]
    if len(atoms) != 1:
        return None
    atom = atoms[0]
    x = state_symbols(expr.input_dim)[0]
    freq = sympy.diff(atom.args[0], x)
    amp = sympy.diff(symbolic, atom)
    if freq.free_symbols or amp.free_symbols:
        return None
    phase = float(atom.args[0].subs(x, 0))
    return {
        "function": "sin" if atom.func == sympy.sin else "cos",
        "frequency": float(freq),
        "phase": phase,
        "amplitude": float(amp),
    }


def _format_number(value: float, precision: int) -> str:
    text = f"{value:.{precision}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def _format_monomial(monom: Tuple[int, ...], names: Sequence[str]) -> str:
    parts = []
    for name, power in zip(names, monom):
        if power == 1:
            parts.append(name)
        elif power > 1:
            parts.append(f"{name}^{power}")
    return "*".join(parts)


def format_polynomial(terms: Dict[Tuple[int, ...], float], precision: int,
                      names: Optional[Sequence[str]] = None) -> str:
    if not terms:
        return f"{0.0:.{precision}f}"
    dim = len(next(iter(terms)))
    names = names or [f"x{i + 1}" for i in range(dim)]
    rounded = [(m, round(c, precision)) for m, c in terms.items()]
    rounded = [(m, c) for m, c in rounded if c != 0]
    if not rounded:
        return f"{0.0:.{precision}f}"

    rounded.sort(key=lambda mc: (-sum(mc[0]), tuple(-e for e in mc[0])))
    variables = {i for m, _ in rounded for i, e in enumerate(m) if e}
    max_degree = max(sum(m) for m, _ in rounded)
    has_constant = sum(rounded[-1][0]) == 0
    # Одномерная аффинная форма печатается как "b + a*x"
    if len(variables) == 1 and max_degree == 1 and has_constant:
        rounded = [rounded[-1]] + rounded[:-1]

    pieces = []
    for i, (monom, coeff) in enumerate(rounded):
        magnitude = _format_number(abs(coeff), precision)
        mono = _format_monomial(monom, names)
        if mono:
            body = mono if magnitude == "1" else f"{magnitude}*{mono}"
        else:
            body = magnitude
        if i == 0:
            pieces.append(f"-{body}" if coeff < 0 else body)
        else:
            pieces.append(f" - {body}" if coeff < 0 else f" + {body}")
    return "".join(pieces)


class _RoundedPrinter(StrPrinter):
    def __init__(self, precision: int):
        super().__init__()
        self.precision = precision

    def _print_Float(self, expr):
        return _format_number(float(expr), self.precision)


def pretty_print(expr: ExpressionInstance, precision: int = 4) -> str:
    terms = polynomial_terms(expr)
    if terms is not None:
        return format_polynomial(terms, precision)
    text = _RoundedPrinter(precision).doprint(to_sympy(expr))
    return text.replace("**", "^")


# --- сериализация ---

def serialize(expr: ExpressionInstance) -> bytes:
    n = 3 * expr.template.n_unary
    payload = ExpressionPayload(
        version=EXPRESSION_FORMAT_VERSION,
        dim=expr.input_dim,
        template=expr.template.signature,
        ops=list(expr.sequence.key),
        params=[float(v) for v in expr.params[:n]],
        readout=ReadoutPayload(w=[float(v) for v in expr.readout_w], b=expr.readout_b),
    )
    return json.dumps(payload.model_dump()).encode("utf-8")


def deserialize(data: Union[bytes, str]) -> ExpressionInstance:
    try:
        raw = json.loads(data)
        payload = ExpressionPayload.model_validate(raw)
    except (json.JSONDecodeError, UnicodeDecodeError, ValidationError, TypeError) as e:
        raise ExpressionParseError(f"Malformed expression payload: {e}") from e

    if payload.version != EXPRESSION_FORMAT_VERSION:
        raise ExpressionParseError(f"Unsupported expression format version: {payload.version}")
    if payload.template not in TEMPLATE_SIGNATURES:
        raise ExpressionParseError(f"Unknown template: {payload.template}")
    if len(payload.readout.w) != payload.dim:
        raise ExpressionParseError("Readout weight count does not match dim")

    template = build_template(TEMPLATE_SIGNATURES[payload.template])
    try:
        sequence = OperatorSequence(template, payload.ops)
        return ExpressionInstance(
            sequence,
            list(payload.params) + list(payload.readout.w) + [payload.readout.b],
            payload.dim,
        )
    except ConfigurationError as e:
        raise ExpressionParseError(str(e)) from e
