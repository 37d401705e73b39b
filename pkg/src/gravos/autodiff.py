"""Reverse-mode differentiation over scalar computational graphs.

Nodes are appended in construction order, which is already a topological
order, so forward and backward are single linear sweeps.

    g = DiffGraph()
    x = g.input("x")
    y = (x * x).tanh() + x
    g.set_output(y)
    g.bind({"x": 0.5})
    g.forward()
    grads = g.backward()
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

OPS = ("input", "constant", "add", "mul", "sub", "div", "neg", "exp", "log",
       "tanh", "relu", "square", "sqrt", "min2", "max2", "abs")
(INPUT, CONST, ADD, MUL, SUB, DIV, NEG, EXP, LOG,
 TANH, RELU, SQUARE, SQRT, MIN2, MAX2, ABS) = range(len(OPS))
_KINKED = (RELU, ABS, MIN2, MAX2)


class EvaluationError(ArithmeticError):
    def __init__(self, node_id, op, message):
        super().__init__(f"node {node_id} ({OPS[op]}): {message}")
        self.node_id = node_id
        self.op = op


class UnboundInputError(KeyError):
    pass


class Node:
    """Handle to a node inside a DiffGraph; supports arithmetic operators."""

    __slots__ = ("graph", "id")

    def __init__(self, graph, node_id):
        self.graph = graph
        self.id = node_id

    @property
    def value(self):
        return self.graph.values[self.id]

    @property
    def adjoint(self):
        return self.graph.adjoints[self.id]

    @property
    def op(self):
        return OPS[self.graph.ops[self.id]]

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.div(self._lift(other), self)

    def __neg__(self):
        return self.graph.neg(self)

    def exp(self):
        return self.graph.unary(EXP, self)

    def log(self):
        return self.graph.unary(LOG, self)

    def tanh(self):
        return self.graph.unary(TANH, self)

    def relu(self):
        return self.graph.unary(RELU, self)

    def square(self):
        return self.graph.unary(SQUARE, self)

    def sqrt(self):
        return self.graph.unary(SQRT, self)

    def abs(self):
        return self.graph.unary(ABS, self)

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class DiffGraph:
    def __init__(self):
        self.ops = []
        self.args = []
        self.consts = []
        self.values = []
        self.adjoints = []
        self.inputs = {}
        self._bound = {}
        self.output = None
        self.branches = None
        self.min_margin = math.inf

    def __len__(self):
        return len(self.ops)

    def _push(self, op, args=(), const=0.0):
        self.ops.append(op)
        self.args.append(args)
        self.consts.append(const)
        self.values.append(const if op == CONST else 0.0)
        self.adjoints.append(0.0)
        return Node(self, len(self.ops) - 1)

    # construction
    def input(self, key, value=None):
        if key in self.inputs:
            raise ValueError(f"duplicate input key {key!r}")
        node = self._push(INPUT)
        self.inputs[key] = node.id
        if value is not None:
            self._bound[key] = float(value)
        return node

    def constant(self, value):
        return self._push(CONST, (), float(value))

    def add(self, a, b):
        return self._push(ADD, (a.id, b.id))

    def sub(self, a, b):
        return self._push(SUB, (a.id, b.id))

    def mul(self, a, b):
        return self._push(MUL, (a.id, b.id))

    def div(self, a, b):
        return self._push(DIV, (a.id, b.id))

    def neg(self, a):
        return self._push(NEG, (a.id,))

    def min2(self, a, b):
        return self._push(MIN2, (a.id, b.id))

    def max2(self, a, b):
        return self._push(MAX2, (a.id, b.id))

    def unary(self, op, a):
        return self._push(op, (a.id,))

    def sum(self, nodes):
        nodes = list(nodes)
        if not nodes:
            return self.constant(0.0)
        acc = nodes[0]
        for n in nodes[1:]:
            acc = self.add(acc, n)
        return acc

    def dot(self, nodes, weights, bias=0.0):
        """bias + sum_i w_i * x_i with weights baked in as constants."""
        acc = self.constant(bias)
        for n, w in zip(nodes, weights):
            acc = self.add(acc, self.mul(n, self.constant(w)))
        return acc

    def set_output(self, node):
        self.output = node.id

    def bind(self, values):
        for key, v in values.items():
            if key not in self.inputs:
                raise KeyError(f"unknown input {key!r}")
            self._bound[key] = float(v)

    def bound_values(self):
        return dict(self._bound)

    # evaluation
    def forward(self, record_branches=False):
        if self.output is None:
            raise ValueError("graph has no designated output")
        vals = self.values
        for key, nid in self.inputs.items():
            if key not in self._bound:
                raise UnboundInputError(key)
            vals[nid] = self._bound[key]
        ops, args = self.ops, self.args
        branches = [] if record_branches else None
        margin = math.inf
        for i in range(len(ops)):
            op = ops[i]
            if op <= CONST:
                continue
            a = args[i]
            x = vals[a[0]]
            if op == ADD:
                vals[i] = x + vals[a[1]]
            elif op == MUL:
                vals[i] = x * vals[a[1]]
            elif op == SUB:
                vals[i] = x - vals[a[1]]
            elif op == TANH:
                vals[i] = math.tanh(x)
            elif op == DIV:
                y = vals[a[1]]
                if y == 0.0:
                    raise EvaluationError(i, op, "division by zero")
                vals[i] = x / y
            elif op == NEG:
                vals[i] = -x
            elif op == EXP:
                if x > 709.0:
                    raise EvaluationError(i, op, f"exp overflow at {x}")
                vals[i] = math.exp(x)
            elif op == LOG:
                if x <= 0.0:
                    raise EvaluationError(i, op, f"log of non-positive value {x}")
                vals[i] = math.log(x)
            elif op == SQUARE:
                vals[i] = x * x
            elif op == SQRT:
                if x < 0.0:
                    raise EvaluationError(i, op, f"sqrt of negative value {x}")
                vals[i] = math.sqrt(x)
            else:
                if op == RELU:
                    vals[i] = x if x > 0.0 else 0.0
                    d = x
                elif op == ABS:
                    vals[i] = x if x >= 0.0 else -x
                    d = x
                else:
                    y = vals[a[1]]
                    d = x - y
                    if op == MIN2:
                        vals[i] = x if x <= y else y
                    else:
                        vals[i] = x if x >= y else y
                if record_branches:
                    branches.append(d > 0.0 if op in (RELU, MAX2) else d >= 0.0)
                    margin = min(margin, abs(d))
            if not math.isfinite(vals[i]):
                raise EvaluationError(i, op, "non-finite value")
        if record_branches:
            self.branches = tuple(branches)
            self.min_margin = margin
        return vals[self.output]

    def backward(self):
        """Adjoints of the output w.r.t. every registered input, keyed by input key."""
        if self.output is None:
            raise ValueError("graph has no designated output")
        vals, ops, args = self.values, self.ops, self.args
        adj = [0.0] * len(ops)
        adj[self.output] = 1.0
        for i in range(self.output, -1, -1):
            g = adj[i]
            op = ops[i]
            if g == 0.0 or op <= CONST:
                continue
            a = args[i]
            if op == ADD:
                adj[a[0]] += g
                adj[a[1]] += g
            elif op == MUL:
                adj[a[0]] += g * vals[a[1]]
                adj[a[1]] += g * vals[a[0]]
            elif op == SUB:
                adj[a[0]] += g
                adj[a[1]] -= g
            elif op == TANH:
                t = vals[i]
                adj[a[0]] += g * (1.0 - t * t)
            elif op == DIV:
                y = vals[a[1]]
                adj[a[0]] += g / y
                adj[a[1]] -= g * vals[a[0]] / (y * y)
            elif op == NEG:
                adj[a[0]] -= g
            elif op == EXP:
                adj[a[0]] += g * vals[i]
            elif op == LOG:
                adj[a[0]] += g / vals[a[0]]
            elif op == SQUARE:
                adj[a[0]] += 2.0 * g * vals[a[0]]
            elif op == SQRT:
                if vals[i] == 0.0:
                    raise EvaluationError(i, op, "derivative of sqrt at 0")
                adj[a[0]] += g / (2.0 * vals[i])
            elif op == RELU:
                if vals[a[0]] > 0.0:
                    adj[a[0]] += g
            elif op == ABS:
                x = vals[a[0]]
                if x > 0.0:
                    adj[a[0]] += g
                elif x < 0.0:
                    adj[a[0]] -= g
            elif op == MIN2:
                adj[a[0] if vals[a[0]] <= vals[a[1]] else a[1]] += g
            elif op == MAX2:
                adj[a[0] if vals[a[0]] >= vals[a[1]] else a[1]] += g
        self.adjoints = adj
        return {key: adj[nid] for key, nid in self.inputs.items()}

    def to_dot(self):
        lines = ["digraph G {"]
        for i, (op, a) in enumerate(zip(self.ops, self.args)):
            label = OPS[op] if op != CONST else f"{self.consts[i]:.4g}"
            lines.append(f'  n{i} [label="{label}"];')
            lines.extend(f"  n{j} -> n{i};" for j in a)
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    near_kink: set = field(default_factory=set)
    excluded: set = field(default_factory=set)
    failures: list = field(default_factory=list)

    @property
    def max_error(self):
        vals = [e for k, e in self.errors.items() if k not in self.excluded]
        return max(vals, default=0.0)

    @property
    def ok(self):
        return not self.failures


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(graph, h=1e-5, tol=1e-4, kink_tol=1e-2, kink_margin=1e-6, floor=1e-8):
    """Compare backward() with central differences on every input.

    Inputs whose +h/-h evaluations take different branches of a kinked op
    (relu/abs/min2/max2) are checked at ``kink_tol``; if the base point lies
    within ``kink_margin`` of a kink they are excluded.
    """
    base = graph.bound_values()
    graph.forward(record_branches=True)
    base_margin = graph.min_margin
    analytic = graph.backward()
    report = GradCheckReport()
    for key in graph.inputs:
        x0 = base[key]
        graph.bind({key: x0 + h})
        fp = graph.forward(record_branches=True)
        bp = graph.branches
        graph.bind({key: x0 - h})
        fm = graph.forward(record_branches=True)
        bm = graph.branches
        graph.bind({key: x0})
        fd = (fp - fm) / (2.0 * h)
        err = relative_error(analytic[key], fd, floor)
        report.errors[key] = err
        limit = tol
        if bp != bm:
            if base_margin < kink_margin:
                report.excluded.add(key)
                continue
            report.near_kink.add(key)
            limit = kink_tol
        if err >= limit:
            report.failures.append((key, analytic[key], fd, err))
    graph.forward()
    graph.backward()
    return report
