"""Graph evaluation against one batch context.

Node kinds dispatch through a handler table.  Derivative nodes resolve
either through reverse-mode AD (pointwise over the point axis, nested tapes
for second order) or through mesh-driven finite differences built from
moving-least-squares gradient reconstruction on vertex neighborhoods.
"""

import numpy as np

from . import tensor as T
from . import trace as tr
from .errors import (
    DegenerateNeighborhood,
    ModelNotInitialized,
    NaNDetected,
    NonDifferentiablePath,
    PointOutsideMesh,
    UnassembledSymbol,
    UnboundVariable,
)


class EvalContext:
    """Bindings, cache and derivative-mode for one evaluation pass.

    One context per thread; the cache is only valid for one batch, so build
    a fresh context (or call :meth:`reset_cache`) whenever bindings change.
    """

    def __init__(self, bindings=None, domain=None, derivative_mode="auto",
                 nan_check=False):
        self.bindings = {}
        for node, value in (bindings or {}).items():
            self.bindings[node] = value if isinstance(value, T.Tensor) \
                else T.Tensor(value)
        self.domain = domain
        self.derivative_mode = derivative_mode
        self.nan_check = nan_check
        self.cache = {}
        self.stats = {"evaluations": 0, "cache_hits": 0, "by_kind": {}}
        self._interp_cache = {}

    def reset_cache(self):
        self.cache = {}
        self._interp_cache = {}

    def child(self, extra_bindings):
        sub = EvalContext(domain=self.domain,
                          derivative_mode=self.derivative_mode,
                          nan_check=self.nan_check)
        sub.bindings = dict(self.bindings)
        for node, value in extra_bindings.items():
            sub.bindings[node] = value if isinstance(value, T.Tensor) \
                else T.Tensor(value)
        return sub

    def lookup(self, var):
        hit = self.bindings.get(var)
        if hit is not None:
            return hit
        if self.domain is not None:
            spec = self.domain.binding_spec(var)
            if spec is not None:
                val = T.Tensor(self.domain._resolve(spec, None))
                self.bindings[var] = val
                return val
        raise UnboundVariable(f"no binding for Variable {var.name!r}")


def evaluate(root, ctx):
    """Value of `root` under `ctx`; shared nodes evaluate once per context."""
    hit = ctx.cache.get(root)
    if hit is not None:
        ctx.stats["cache_hits"] += 1
        return hit
    handler = HANDLERS.get(root.kind)
    if handler is None:
        raise UnassembledSymbol(f"no handler for node kind {root.kind}")
    value = handler(root, ctx)
    ctx.stats["evaluations"] += 1
    ctx.stats["by_kind"][root.kind] = ctx.stats["by_kind"].get(root.kind, 0) + 1
    if ctx.nan_check and T.has_nan(value):
        raise NaNDetected(root, f"non-finite value at {root!r}")
    ctx.cache[root] = value
    return value


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def _eval_variable(node, ctx):
    return ctx.lookup(node)


def _eval_literal(node, ctx):
    return T.Tensor(node.payload)


def _eval_constant(node, ctx):
    return node.payload


def _eval_arith(node, ctx):
    op = node.payload
    args = [evaluate(c, ctx) for c in node.children]
    if op == "pow":
        return T.power(*args)
    return T.ELEMENTWISE[op](*args)


def _eval_compare(node, ctx):
    a = evaluate(node.children[0], ctx)
    b = evaluate(node.children[1], ctx)
    return T.compare(node.payload, a, b)


def _eval_reduce(node, ctx):
    op, axes = node.payload
    return T.REDUCERS[op](evaluate(node.children[0], ctx), axes=axes)


def _eval_slice(node, ctx):
    return T.take_slice(evaluate(node.children[0], ctx),
                        tr.thaw_slice(node.payload))


def _eval_concat(node, ctx):
    return T.concat([evaluate(c, ctx) for c in node.children],
                    axis=node.payload)


def _eval_reshape(node, ctx):
    return T.reshape(evaluate(node.children[0], ctx), node.payload)


def _eval_transpose(node, ctx):
    return T.transpose(evaluate(node.children[0], ctx), node.payload)


def _eval_matmul(node, ctx):
    return T.matmul(evaluate(node.children[0], ctx),
                    evaluate(node.children[1], ctx))


def _eval_model_call(node, ctx):
    model = node.payload
    if not model.params:
        raise ModelNotInitialized(
            f"model {model.name!r} has no parameters; call initialize()"
        )
    args = [evaluate(c, ctx) for c in node.children]
    return model.forward(args)


def _eval_op_call(node, ctx):
    op_def = node.payload
    values = {p: evaluate(arg, ctx)
              for p, arg in zip(op_def.params, node.children)}
    sub = ctx.child(values)
    return evaluate(op_def.body, sub)


def _eval_tracker(node, ctx):
    return evaluate(node.children[0], ctx)


def _eval_symbol(node, ctx):
    raise UnassembledSymbol(
        f"{node.kind} outside weak-form assembly; route through assemble()"
    )


def _eval_derivative(node, ctx):
    order, hint = node.payload
    mode = ctx.derivative_mode if hint == "default" else hint
    if mode == "finite-difference":
        return _derivative_fd(node, ctx, order)
    return _derivative_ad(node, ctx, order)


HANDLERS = {
    tr.VARIABLE: _eval_variable,
    tr.LITERAL: _eval_literal,
    tr.CONSTANT: _eval_constant,
    tr.TENSOR_TAG: _eval_constant,
    tr.ARITH: _eval_arith,
    tr.COMPARE: _eval_compare,
    tr.REDUCE: _eval_reduce,
    tr.SLICE: _eval_slice,
    tr.CONCAT: _eval_concat,
    tr.RESHAPE: _eval_reshape,
    tr.TRANSPOSE: _eval_transpose,
    tr.MATMUL: _eval_matmul,
    tr.DERIVATIVE: _eval_derivative,
    tr.MODEL_CALL: _eval_model_call,
    tr.OP_CALL: _eval_op_call,
    tr.TRACKER: _eval_tracker,
    tr.TRIAL: _eval_symbol,
    tr.TEST: _eval_symbol,
}


def assert_handler_totality():
    missing = [k for k in tr.ALL_KINDS if k not in HANDLERS]
    if missing:
        raise AssertionError(f"node kinds without handlers: {missing}")


assert_handler_totality()


# ---------------------------------------------------------------------------
# AD derivatives
#
# Residual expressions depend on a coordinate pointwise (each output point
# sees only its own input point), so the derivative is the diagonal of the
# Jacobian over the point axis: grad of sum(u) w.r.t. a broadcast-expanded
# copy of the coordinate binding.
# ---------------------------------------------------------------------------

def _derivative_ad(node, ctx, order):
    expr, wrt = node.children
    x0 = ctx.lookup(wrt)
    base = evaluate(expr, ctx)
    try:
        target = np.broadcast_shapes(x0.shape, base.shape)
    except ValueError:
        raise NonDifferentiablePath(
            f"derivative target shape {x0.shape} does not broadcast with "
            f"expression shape {base.shape}"
        ) from None
    xs = T.Tensor(np.broadcast_to(x0.data, target).copy())
    sub = ctx.child({wrt: xs})

    if order == 1:
        with T.Tape() as t:
            t.watch(xs)
            u = evaluate(expr, sub)
            total = T.reduce_sum(u)
        return t.gradient(total, [xs])[xs.uid]

    with T.Tape() as outer:
        outer.watch(xs)
        with T.Tape() as inner:
            inner.watch(xs)
            u = evaluate(expr, sub)
            total = T.reduce_sum(u)
        g = inner.gradient(total, [xs])[xs.uid]
        g_total = T.reduce_sum(g)
    return outer.gradient(g_total, [xs])[xs.uid]


# ---------------------------------------------------------------------------
# Mesh-driven finite differences
#
# First derivatives come from a least-squares affine fit over each vertex's
# 1-ring (exact on affine fields); second derivatives iterate the same
# reconstruction.  Vertex values map to the sampled context points by
# barycentric interpolation inside the containing element.
# ---------------------------------------------------------------------------

def mls_gradient_operators(mesh, connectivity):
    """One (V, V) matrix per space dimension; row i holds the reconstruction
    weights of vertex i's neighborhood."""
    V, D = mesh.num_vertices, mesh.dim
    ops = [np.zeros((V, V)) for _ in range(D)]
    verts = mesh.vertices
    for i in range(V):
        ring = connectivity.neighbors[i]
        support = np.concatenate([[i], ring])
        offsets = verts[support] - verts[i]
        M = np.concatenate([np.ones((len(support), 1)), offsets], axis=1)
        if len(support) < D + 1:
            raise DegenerateNeighborhood(
                f"vertex {i} has only {len(support) - 1} neighbors"
            )
        pinv, *_ = np.linalg.lstsq(M, np.eye(len(support)), rcond=None)
        if np.linalg.matrix_rank(M) < D + 1:
            raise DegenerateNeighborhood(
                f"vertex {i}: neighborhood is affinely degenerate"
            )
        for d in range(D):
            ops[d][i, support] = pinv[d + 1]
    return ops


def _locate_barycentric(mesh, points):
    """(N, V) interpolation matrix: rows are barycentric weights inside the
    containing element."""
    V = mesh.num_vertices
    pts = np.asarray(points, dtype=np.float64)
    P = np.zeros((len(pts), V))
    elems = mesh.elements
    verts = mesh.vertices
    tol = 1e-9
    if mesh.kind == "LINE2":
        x0 = verts[elems[:, 0], 0]
        x1 = verts[elems[:, 1], 0]
        for n, p in enumerate(pts):
            x = p[0]
            inside = np.nonzero(
                (x >= np.minimum(x0, x1) - tol) & (x <= np.maximum(x0, x1) + tol)
            )[0]
            if len(inside) == 0:
                raise PointOutsideMesh(f"point {p} outside mesh")
            e = int(inside[0])
            denom = x1[e] - x0[e]
            s = (x - x0[e]) / denom
            P[n, elems[e, 0]] = 1 - s
            P[n, elems[e, 1]] = s
        return P
    if mesh.kind != "TRI3":
        raise PointOutsideMesh(f"interpolation unsupported for {mesh.kind}")
    p0 = verts[elems[:, 0]]
    p1 = verts[elems[:, 1]]
    p2 = verts[elems[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    for n, p in enumerate(pts):
        r = p[None, :2] - p0
        l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
        l0 = 1.0 - l1 - l2
        inside = np.nonzero((l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol))[0]
        if len(inside) == 0:
            raise PointOutsideMesh(f"point {p} outside mesh")
        e = int(inside[0])
        P[n, elems[e, 0]] = l0[e]
        P[n, elems[e, 1]] = l1[e]
        P[n, elems[e, 2]] = l2[e]
    return P


def _fd_operators(ctx):
    domain = ctx.domain
    cached = getattr(domain, "_fd_ops", None)
    if cached is None:
        cached = mls_gradient_operators(domain.mesh, domain.connectivity)
        domain._fd_ops = cached
    return cached


def _derivative_fd(node, ctx, order):
    expr, wrt = node.children
    domain = ctx.domain
    if domain is None:
        raise NonDifferentiablePath(
            "finite-difference derivatives need a domain in the context"
        )
    spec = domain.binding_spec(wrt)
    if spec is None:
        raise UnboundVariable(f"no binding for Variable {wrt.name!r}")
    if spec[0] == "time":
        raise NonDifferentiablePath(
            "temporal derivatives are only supported in AD mode"
        )
    if spec[0] != "coord":
        raise NonDifferentiablePath(
            f"finite differences need a coordinate variable, got {spec[0]!r}"
        )
    _, tag, direction = spec

    # evaluate the expression on all mesh vertices
    verts = domain.mesh.vertices
    Vn = len(verts)
    Tn = domain.num_times
    B = domain.batch
    overlay = {}
    for var, vspec in domain._vars.items():
        if vspec[0] == "coord" and vspec[1] == tag:
            col = verts[:, vspec[2]].reshape(1, 1, Vn, 1)
            overlay[var] = T.Tensor(
                np.broadcast_to(col, (B, Tn, Vn, 1)).copy()
            )
        elif vspec[0] == "full" and vspec[1] == tag:
            full = verts.reshape(1, 1, Vn, -1)
            overlay[var] = T.Tensor(
                np.broadcast_to(full, (B, Tn) + verts.shape).copy()
            )
    sub = ctx.child(overlay)
    u_vertex = evaluate(expr, sub)
    if u_vertex.ndim < 2 or u_vertex.shape[-2] != Vn:
        # constants need explicit expansion before the operator applies
        u_vertex = T.broadcast_to(u_vertex, (B, Tn, Vn, 1))

    ops = _fd_operators(ctx)
    G = T.Tensor(ops[direction])
    g = T.matmul(G, u_vertex)
    if order == 2:
        g = T.matmul(G, g)

    # map vertex values onto the sampled context points of this tag
    key = (tag, id(domain.context[tag]))
    P = ctx._interp_cache.get(key)
    if P is None:
        points = domain.context[tag][0, 0]
        P = T.Tensor(_locate_barycentric(domain.mesh, points))
        ctx._interp_cache[key] = P
    return T.matmul(P, g)
