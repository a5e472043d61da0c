"""Deferred expression graphs.

User-facing symbols build :class:`ExprNode` graphs instead of executing.
Nodes compare and hash by identity, never by structure; structural sharing
is introduced explicitly by :func:`cse`.
"""

import io

import numpy as np

from . import tensor as T
from .errors import (
    ArityMismatch,
    ExtraBinding,
    MissingBinding,
    NonPositiveInterval,
    NotAVariable,
    ShapeInferenceFailure,
)

# Node kinds.  Plain strings keep dump output and debugging friction-free.
VARIABLE = "Variable"
LITERAL = "Literal"
CONSTANT = "Constant"
TENSOR_TAG = "TensorTag"
ARITH = "Arith"
COMPARE = "Compare"
REDUCE = "Reduce"
SLICE = "Slice"
CONCAT = "Concat"
RESHAPE = "Reshape"
TRANSPOSE = "Transpose"
MATMUL = "MatMul"
DERIVATIVE = "Derivative"
MODEL_CALL = "ModelCall"
OP_CALL = "OperationCall"
TRACKER = "Tracker"
TRIAL = "TrialSymbol"
TEST = "TestSymbol"

ALL_KINDS = (
    VARIABLE, LITERAL, CONSTANT, TENSOR_TAG, ARITH, COMPARE, REDUCE, SLICE,
    CONCAT, RESHAPE, TRANSPOSE, MATMUL, DERIVATIVE, MODEL_CALL, OP_CALL,
    TRACKER, TRIAL, TEST,
)

LEAF_KINDS = (VARIABLE, LITERAL, CONSTANT, TENSOR_TAG, TRIAL, TEST)

_UNARY_ARITH = {"neg", "exp", "log", "sin", "cos", "tanh", "relu"}
_BINARY_ARITH = {"add", "sub", "mul", "div", "pow", "maximum", "minimum"}

_ARITY = {
    VARIABLE: 0,
    LITERAL: 0,
    CONSTANT: 0,
    TENSOR_TAG: 0,
    TRIAL: 0,
    TEST: 0,
    COMPARE: 2,
    REDUCE: 1,
    SLICE: 1,
    RESHAPE: 1,
    TRANSPOSE: 1,
    MATMUL: 2,
    DERIVATIVE: 2,
    TRACKER: 1,
}


class ExprNode:
    """One node of the deferred graph.

    Equality and hashing are identity-based (Python object identity), so
    nodes are safe keys in sets and dicts and two structurally equal nodes
    stay distinct until CSE canonicalizes them.
    """

    __slots__ = ("kind", "payload", "children", "name", "shape_hint")

    def __init__(self, kind, payload=None, children=(), name=None):
        self.kind = kind
        self.payload = payload
        self.children = tuple(children)
        self.name = name
        self.shape_hint = None
        _check_arity(self)

    # identity hashing/equality is object default; do not override __eq__

    def __repr__(self):
        label = f"{self.kind}"
        if self.payload is not None and self.kind not in (CONSTANT,):
            label += f"({self.payload})"
        if self.name:
            label += f" '{self.name}'"
        return f"<{label} @{id(self):#x}>"

    # -- arithmetic sugar --------------------------------------------------

    def __add__(self, other):
        return build(ARITH, "add", (self, as_node(other)))

    def __radd__(self, other):
        return build(ARITH, "add", (as_node(other), self))

    def __sub__(self, other):
        return build(ARITH, "sub", (self, as_node(other)))

    def __rsub__(self, other):
        return build(ARITH, "sub", (as_node(other), self))

    def __mul__(self, other):
        return build(ARITH, "mul", (self, as_node(other)))

    def __rmul__(self, other):
        return build(ARITH, "mul", (as_node(other), self))

    def __truediv__(self, other):
        return build(ARITH, "div", (self, as_node(other)))

    def __rtruediv__(self, other):
        return build(ARITH, "div", (as_node(other), self))

    def __pow__(self, other):
        return build(ARITH, "pow", (self, as_node(other)))

    def __neg__(self):
        return build(ARITH, "neg", (self,))

    # __eq__ stays identity; elementwise comparisons use the inequality
    # operators or the named forms below.
    def __lt__(self, other):
        return build(COMPARE, "lt", (self, as_node(other)))

    def __le__(self, other):
        return build(COMPARE, "le", (self, as_node(other)))

    def __gt__(self, other):
        return build(COMPARE, "gt", (self, as_node(other)))

    def __ge__(self, other):
        return build(COMPARE, "ge", (self, as_node(other)))

    def eq_elem(self, other):
        return build(COMPARE, "eq", (self, as_node(other)))

    def ne_elem(self, other):
        return build(COMPARE, "ne", (self, as_node(other)))

    def __getitem__(self, spec):
        if not isinstance(spec, tuple):
            spec = (spec,)
        return build(SLICE, _freeze_slice(spec), (self,))

    # -- reductions (properties, so `pde.mse` reads like the solver API) ---

    @property
    def mse(self):
        return build(REDUCE, ("mse", None), (self,))

    @property
    def mean(self):
        return build(REDUCE, ("mean", None), (self,))

    @property
    def sum(self):
        return build(REDUCE, ("sum", None), (self,))

    def reduce(self, op, axes=None):
        if op not in T.REDUCERS:
            raise ValueError(f"unknown reduction {op!r}")
        if axes is not None and not isinstance(axes, tuple):
            axes = (axes,)
        return build(REDUCE, (op, axes), (self,))

    # -- derivatives --------------------------------------------------------

    def d(self, wrt):
        return derivative(self, wrt, order=1)

    def dd(self, wrt):
        return derivative(self, wrt, order=2)

    # -- fem hook (set up by the fem module) --------------------------------

    def assemble(self, target, **options):
        from . import fem

        return fem.assemble(self, target=target, **options)


def _check_arity(node):
    want = _ARITY.get(node.kind)
    if node.kind == ARITH:
        op = node.payload
        if op in _UNARY_ARITH:
            want = 1
        elif op in _BINARY_ARITH:
            want = 2
        else:
            raise ArityMismatch(f"unknown arithmetic op {op!r}")
    elif node.kind == CONCAT:
        if len(node.children) < 1:
            raise ArityMismatch("Concat needs at least one child")
        return
    elif node.kind in (MODEL_CALL, OP_CALL):
        return  # any arity
    if want is not None and len(node.children) != want:
        raise ArityMismatch(
            f"{node.kind} expects {want} children, got {len(node.children)}"
        )


def _freeze_slice(spec):
    frozen = []
    for s in spec:
        if isinstance(s, slice):
            frozen.append(("slice", s.start, s.stop, s.step))
        elif isinstance(s, int):
            frozen.append(("index", s))
        else:
            raise ArityMismatch(f"unsupported slice element {s!r}")
    return tuple(frozen)


def thaw_slice(payload):
    out = []
    for s in payload:
        if s[0] == "slice":
            out.append(slice(s[1], s[2], s[3]))
        else:
            out.append(s[1])
    return tuple(out)


def build(kind, payload=None, children=(), name=None):
    """Construct a fresh node; no evaluation happens."""
    return ExprNode(kind, payload, children, name)


def as_node(value):
    if isinstance(value, ExprNode):
        return value
    if isinstance(value, (int, float)):
        return ExprNode(LITERAL, float(value))
    if isinstance(value, (np.ndarray, T.Tensor, list)):
        return constant(value)
    raise TypeError(f"cannot lift {type(value).__name__} into the trace")


def variable(name, shape=None):
    node = ExprNode(VARIABLE, None, (), name)
    node.shape_hint = tuple(shape) if shape is not None else None
    return node


def literal(value):
    return ExprNode(LITERAL, float(value))


def constant(value, name=None):
    t = value if isinstance(value, T.Tensor) else T.Tensor(value)
    return ExprNode(CONSTANT, t, (), name)


def tensor_tag(name, tensor):
    t = tensor if isinstance(tensor, T.Tensor) else T.Tensor(tensor)
    return ExprNode(TENSOR_TAG, t, (), name)


def derivative(expr, wrt, order=1, mode="default"):
    """Deferred d/d(wrt) of `expr`; `wrt` must be a Variable node."""
    if not isinstance(wrt, ExprNode) or wrt.kind != VARIABLE:
        raise NotAVariable(f"derivative target must be a Variable, got {wrt!r}")
    if order not in (1, 2):
        raise ArityMismatch("derivative order must be 1 or 2")
    return build(DERIVATIVE, (order, mode), (as_node(expr), wrt))


def d(expr, wrt):
    return derivative(expr, wrt, order=1)


def dd(expr, wrt):
    return derivative(expr, wrt, order=2)


# `grad` mirrors the listing-level spelling for first derivatives.
grad = d


def tracker(expr, interval):
    """Monitor `expr` every `interval` outer steps without touching the loss."""
    if int(interval) < 1:
        raise NonPositiveInterval(f"tracker interval must be >= 1, got {interval}")
    return build(TRACKER, int(interval), (as_node(expr),))


def model_call(model, args):
    return build(MODEL_CALL, model, tuple(as_node(a) for a in args))


def concat_nodes(parts, axis=-1):
    return build(CONCAT, int(axis), tuple(as_node(p) for p in parts))


def matmul_nodes(a, b):
    return build(MATMUL, None, (as_node(a), as_node(b)))


def reshape_node(a, shape):
    return build(RESHAPE, tuple(shape), (as_node(a),))


def transpose_node(a, axes=None):
    return build(TRANSPOSE, tuple(axes) if axes is not None else None, (as_node(a),))


# ---------------------------------------------------------------------------
# OperationDef / OperationCall
# ---------------------------------------------------------------------------

class OperationDef:
    """A reusable equation fragment: formal placeholder params plus a body."""

    def __init__(self, params, body, name=None):
        for p in params:
            if p.kind != VARIABLE:
                raise NotAVariable("operation parameters must be Variable nodes")
        self.params = tuple(params)
        self.body = body
        self.name = name or "op"

    def __call__(self, *args, **kwargs):
        bindings = dict(zip(self.params, args))
        if kwargs:
            by_name = {p.name: p for p in self.params}
            for k, v in kwargs.items():
                if k not in by_name:
                    raise ExtraBinding(f"no parameter named {k!r}")
                bindings[by_name[k]] = v
        return call_operation(self, bindings)


def define_operation(params, body, name=None):
    return OperationDef(params, body, name)


def call_operation(op_def, bindings):
    """Bind the formals of `op_def`; the body graph is shared, not copied."""
    missing = [p for p in op_def.params if p not in bindings]
    if missing:
        raise MissingBinding(
            f"missing bindings for {[p.name for p in missing]}"
        )
    extra = [k for k in bindings if k not in op_def.params]
    if extra:
        raise ExtraBinding(f"unexpected bindings {[getattr(k, 'name', k) for k in extra]}")
    ordered = tuple(as_node(bindings[p]) for p in op_def.params)
    return build(OP_CALL, op_def, ordered, name=op_def.name)


# ---------------------------------------------------------------------------
# Graph utilities
# ---------------------------------------------------------------------------

def walk(roots):
    """All reachable nodes in deterministic first-visit (DFS pre-) order."""
    if isinstance(roots, ExprNode):
        roots = [roots]
    seen = set()
    order = []
    stack = list(reversed(list(roots)))
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        order.append(node)
        for child in reversed(node.children):
            if child not in seen:
                stack.append(child)
    return order


def toposort(roots):
    """Children-before-parents order (Kahn's algorithm)."""
    if isinstance(roots, ExprNode):
        roots = [roots]
    nodes = walk(roots)
    consumers = {n: [] for n in nodes}
    pending = {}
    for n in nodes:
        pending[n] = len(set(n.children))
        for c in set(n.children):
            consumers[c].append(n)
    ready = [n for n in nodes if pending[n] == 0]
    order = []
    while ready:
        n = ready.pop()
        order.append(n)
        for parent in consumers[n]:
            pending[parent] -= 1
            if pending[parent] == 0:
                ready.append(parent)
    if len(order) != len(nodes):
        raise AssertionError("cycle detected in expression graph")
    return order


def count_nodes(roots):
    return len(walk(roots))


# ---------------------------------------------------------------------------
# Common sub-expression elimination
# ---------------------------------------------------------------------------

def _canonical_key(node, env, memo):
    """Structural key; identity for Variables/Constants/TensorTags/models,
    value for Literals, and operation calls keyed through their substituted
    bodies."""
    if node in env:
        return env[node]
    hit = memo.get(node)
    if hit is not None:
        return hit
    kind = node.kind
    if kind == VARIABLE or kind == CONSTANT or kind == TENSOR_TAG \
            or kind == TRIAL or kind == TEST:
        key = ("id", id(node))
    elif kind == LITERAL:
        key = ("lit", node.payload)
    elif kind == OP_CALL:
        op_def = node.payload
        inner_env = dict(env)
        for p, arg in zip(op_def.params, node.children):
            inner_env[p] = _canonical_key(arg, env, memo)
        key = _canonical_key(op_def.body, inner_env, {})
    elif kind == MODEL_CALL:
        key = ("model", id(node.payload)) + tuple(
            _canonical_key(c, env, memo) for c in node.children
        )
    elif kind == DERIVATIVE:
        key = ("deriv", node.payload) + tuple(
            _canonical_key(c, env, memo) for c in node.children
        )
    elif kind == TRACKER:
        # trackers are monitoring sinks; never merge two trackers
        key = ("id", id(node))
    else:
        key = (kind, node.payload) + tuple(
            _canonical_key(c, env, memo) for c in node.children
        )
    if not env:
        memo[node] = key
    return key


def cse(roots):
    """Canonicalize structurally identical subtrees to shared nodes.

    Returns (new_roots, stats) where stats carries nodes_before/nodes_after.
    Semantics are unchanged for every root.
    """
    single = isinstance(roots, ExprNode)
    root_list = [roots] if single else list(roots)
    before = count_nodes(root_list)

    memo = {}
    by_key = {}
    replacement = {}

    for node in toposort(root_list):
        new_children = tuple(replacement[c] for c in node.children)
        key = _canonical_key(node, {}, memo)
        rep = by_key.get(key)
        if rep is not None:
            replacement[node] = rep
            continue
        if new_children == node.children:
            rep = node
        else:
            rep = ExprNode(node.kind, node.payload, new_children, node.name)
            rep.shape_hint = node.shape_hint
        by_key[key] = rep
        replacement[node] = rep

    new_roots = [replacement[r] for r in root_list]
    after = count_nodes(new_roots)
    stats = {"nodes_before": before, "nodes_after": after}
    return (new_roots[0] if single else new_roots), stats


# ---------------------------------------------------------------------------
# Shape tracing
# ---------------------------------------------------------------------------

class ShapeReport:
    def __init__(self, shapes, order, roots):
        self.shapes = shapes  # node -> shape tuple
        self.order = order    # nodes in first-visit order
        self.roots = tuple(roots)

    def __getitem__(self, node):
        return self.shapes[node]


def _broadcast(node, *shapes):
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeInferenceFailure(
            node, f"{node.kind}: shapes {shapes} do not broadcast"
        ) from None


def _infer_shape(node, shapes, context_shapes):
    kind = node.kind
    if kind == VARIABLE:
        if node in context_shapes:
            return tuple(context_shapes[node])
        if node.shape_hint is not None:
            return tuple(node.shape_hint)
        raise ShapeInferenceFailure(node, f"no shape known for Variable {node.name!r}")
    if kind == LITERAL:
        return ()
    if kind in (CONSTANT, TENSOR_TAG):
        return node.payload.shape
    if kind in (TRIAL, TEST):
        raise ShapeInferenceFailure(
            node, f"{kind} is only meaningful inside weak-form assembly"
        )
    if kind == ARITH:
        child_shapes = [shapes[c] for c in node.children]
        return _broadcast(node, *child_shapes)
    if kind == COMPARE:
        return _broadcast(node, shapes[node.children[0]], shapes[node.children[1]])
    if kind == REDUCE:
        _, axes = node.payload
        s = shapes[node.children[0]]
        if axes is None or not s:
            return ()
        normalized = {ax % len(s) for ax in axes}
        return tuple(d for i, d in enumerate(s) if i not in normalized)
    if kind == SLICE:
        s = shapes[node.children[0]]
        spec = thaw_slice(node.payload)
        try:
            return np.empty(s).__getitem__(spec).shape
        except IndexError:
            raise ShapeInferenceFailure(node, f"slice {spec} invalid for {s}") from None
    if kind == CONCAT:
        child_shapes = [shapes[c] for c in node.children]
        ax = node.payload % len(child_shapes[0])
        base = list(child_shapes[0])
        for cs in child_shapes[1:]:
            if len(cs) != len(base) or any(
                i != ax and cs[i] != base[i] for i in range(len(base))
            ):
                raise ShapeInferenceFailure(
                    node, f"concat shapes incompatible: {child_shapes}"
                )
        base[ax] = sum(cs[ax] for cs in child_shapes)
        return tuple(base)
    if kind == RESHAPE:
        s = shapes[node.children[0]]
        try:
            return np.empty(s).reshape(node.payload).shape
        except ValueError:
            raise ShapeInferenceFailure(
                node, f"cannot reshape {s} to {node.payload}"
            ) from None
    if kind == TRANSPOSE:
        s = shapes[node.children[0]]
        axes = node.payload or tuple(reversed(range(len(s))))
        return tuple(s[a] for a in axes)
    if kind == MATMUL:
        sa, sb = shapes[node.children[0]], shapes[node.children[1]]
        if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
            raise ShapeInferenceFailure(node, f"matmul shapes {sa} @ {sb}")
        batch = _broadcast(node, sa[:-2], sb[:-2])
        return batch + (sa[-2], sb[-1])
    if kind == DERIVATIVE:
        return _broadcast(node, shapes[node.children[0]], shapes[node.children[1]])
    if kind == MODEL_CALL:
        model = node.payload
        return model.output_shape([shapes[c] for c in node.children])
    if kind == OP_CALL:
        op_def = node.payload
        inner = dict(context_shapes)
        for p, arg in zip(op_def.params, node.children):
            inner[p] = shapes[arg]
        report = trace_shapes(op_def.body, inner)
        return report[op_def.body]
    if kind == TRACKER:
        return shapes[node.children[0]]
    raise ShapeInferenceFailure(node, f"unhandled kind {kind}")


def trace_shapes(roots, context_shapes=None):
    """Infer a shape for every reachable node.

    `context_shapes` maps leaf Variable nodes to shapes; Variables created
    through a domain already carry hints.
    """
    single = isinstance(roots, ExprNode)
    root_list = [roots] if single else list(roots)
    context_shapes = context_shapes or {}
    shapes = {}
    order = walk(root_list)
    for node in toposort(root_list):
        shapes[node] = _infer_shape(node, shapes, context_shapes)
    return ShapeReport(shapes, order, root_list)


def print_shapes(report, sink=None):
    """Deterministic rendering of a ShapeReport; returns the text."""
    out = io.StringIO()
    index = {n: i for i, n in enumerate(report.order)}
    seen = set()

    def label(node):
        txt = node.kind
        if node.kind == ARITH or node.kind == COMPARE:
            txt += f"[{node.payload}]"
        elif node.kind == REDUCE:
            txt += f"[{node.payload[0]}]"
        elif node.kind == DERIVATIVE:
            txt += f"[order={node.payload[0]}]"
        elif node.kind == MODEL_CALL:
            txt += f"[{node.payload.name}]"
        elif node.kind == OP_CALL:
            txt += f"[{node.payload.name}]"
        if node.name:
            txt += f" {node.name!r}"
        return txt

    def render(node, depth):
        pad = "  " * depth
        n = index[node]
        if node in seen:
            out.write(f"{pad}#{n} ^\n")
            return
        seen.add(node)
        out.write(f"{pad}#{n} {label(node)} -> {report[node]}\n")
        for c in node.children:
            render(c, depth + 1)

    for i, root in enumerate(report.roots):
        out.write(f"root {i}:\n")
        render(root, 1)
    text = out.getvalue()
    if sink is not None:
        sink.write(text)
    return text


def dump_tree(root, sink=None):
    """Indented structural dump; shared nodes appear once, then by back-ref."""
    out = io.StringIO()
    index = {}
    counter = iter(range(10**9))

    def render(node, depth):
        pad = "  " * depth
        if node in index:
            out.write(f"{pad}^{index[node]}\n")
            return
        index[node] = next(counter)
        payload = ""
        if node.kind in (ARITH, COMPARE):
            payload = f"[{node.payload}]"
        elif node.kind == REDUCE:
            payload = f"[{node.payload[0]}]"
        elif node.kind == LITERAL:
            payload = f"[{node.payload}]"
        elif node.kind == DERIVATIVE:
            payload = f"[order={node.payload[0]}]"
        elif node.kind == TRACKER:
            payload = f"[every={node.payload}]"
        elif node.kind == MODEL_CALL:
            payload = f"[{node.payload.name}]"
        elif node.kind == OP_CALL:
            payload = f"[{node.payload.name}]"
        name = f" {node.name!r}" if node.name else ""
        out.write(
            f"{pad}{index[node]}: {node.kind}{payload}{name} "
            f"children={len(node.children)}\n"
        )
        for c in node.children:
            render(c, depth + 1)

    render(root, 0)
    text = out.getvalue()
    if sink is not None:
        sink.write(text)
    return text
