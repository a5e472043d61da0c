"""Weak-form lowering on P1 elements (TRI3, LINE2 in 1D).

Symbolic weak forms written with trial/test symbols are grouped into
volume and tagged-boundary terms, then dispatched to one of four targets:

* ``vpinn``         -> traced residual against the nodal hat test set
* ``fem_system``    -> linear system (A, b) with Dirichlet elimination
* ``fem_residual``  -> residual operator R(u) with Jacobian callable J(u)
* ``fem_time``      -> semi-discrete block M u' + A u = b(t) (or its
                       nonlinear counterpart) for implicit stepping
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import evaluator as ev
from . import tensor as T
from . import trace as tr
from .errors import (
    MultipleTemporalTerms,
    NewtonDivergence,
    NoTemporalTerm,
    NonlinearTerm,
    SingularMass,
    SingularStepMatrix,
    TargetMismatch,
    TrialSymbolRemaining,
    UnassembledSymbol,
    UnknownBcTag,
    UnsupportedElement,
)

GAUSS_VOLUME = "fem_gauss"

# Reference-triangle rules, (points in (xi, eta), weights summing to 1/2).
_TRI_RULES = {
    1: (np.array([[1 / 3, 1 / 3]]), np.array([0.5])),
    2: (
        np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]]),
        np.array([1 / 6, 1 / 6, 1 / 6]),
    ),
    3: (
        np.array([[1 / 3, 1 / 3], [1 / 5, 1 / 5], [3 / 5, 1 / 5],
                  [1 / 5, 3 / 5]]),
        np.array([-27 / 96, 25 / 96, 25 / 96, 25 / 96]),
    ),
}


def _tri_rule(degree):
    if degree not in _TRI_RULES:
        raise UnsupportedElement(
            f"TRI3 quadrature degree {degree} unsupported (have 1..3)"
        )
    return _TRI_RULES[degree]


def _gauss_legendre_01(degree):
    npts = max(1, (int(degree) + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(npts)
    return (x + 1.0) / 2.0, w / 2.0


class Dirichlet:
    def __init__(self, tags, value):
        self.tags = [tags] if isinstance(tags, str) else list(tags)
        self.value = value


class Neumann:
    def __init__(self, tags):
        self.tags = [tags] if isinstance(tags, str) else list(tags)


class FemSetup:
    """Quadrature data, cached shape functions, bc metadata and the dof map."""

    def __init__(self, domain, element_type, quad_degree, bcs):
        mesh = domain.mesh
        if element_type not in ("TRI3", "LINE2"):
            raise UnsupportedElement(f"element type {element_type!r}")
        if mesh.kind != element_type:
            raise UnsupportedElement(
                f"mesh carries {mesh.kind} elements, requested {element_type}"
            )
        self.domain = domain
        self.element_type = element_type
        self.quad_degree = int(quad_degree)
        self.trial = tr.build(tr.TRIAL, self, (), name="u")
        self.test = tr.build(tr.TEST, self, (), name="phi")

        verts = mesh.vertices
        elems = mesh.elements
        E = len(elems)
        D = mesh.dim

        if element_type == "TRI3":
            ref_pts, ref_w = _tri_rule(self.quad_degree)
            nq = len(ref_w)
            # P1 shape functions at reference points
            self.shape_values = np.stack(
                [1 - ref_pts[:, 0] - ref_pts[:, 1], ref_pts[:, 0],
                 ref_pts[:, 1]], axis=1,
            )  # (nq, 3)
            ref_grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            p0 = verts[elems[:, 0]]
            d1 = verts[elems[:, 1]] - p0
            d2 = verts[elems[:, 2]] - p0
            J = np.stack([d1, d2], axis=1)              # (E, 2, 2) rows d1,d2
            detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            inv = np.empty_like(J)
            inv[:, 0, 0] = J[:, 1, 1]
            inv[:, 0, 1] = -J[:, 0, 1]
            inv[:, 1, 0] = -J[:, 1, 0]
            inv[:, 1, 1] = J[:, 0, 0]
            inv /= detJ[:, None, None]
            # dN/dx_d = ref_grads @ inv  per element
            self.shape_grads = np.einsum("ar,erd->ead", ref_grads, inv)
            self.qp_weights = np.abs(detJ)[:, None] * ref_w[None, :] * 2.0
            # reference weights sum to 1/2; element area = |detJ|/2
            self.qp_coords = (
                p0[:, None, :]
                + ref_pts[None, :, 0, None] * d1[:, None, :]
                + ref_pts[None, :, 1, None] * d2[:, None, :]
            )
        else:  # LINE2
            ref_x, ref_w = _gauss_legendre_01(self.quad_degree)
            nq = len(ref_w)
            self.shape_values = np.stack([1 - ref_x, ref_x], axis=1)
            x0 = verts[elems[:, 0], 0]
            x1 = verts[elems[:, 1], 0]
            length = x1 - x0
            self.shape_grads = np.stack(
                [-1.0 / length, 1.0 / length], axis=1
            )[:, :, None]
            self.qp_weights = np.abs(length)[:, None] * ref_w[None, :]
            self.qp_coords = (x0[:, None] + ref_x[None, :] * length[:, None])[
                :, :, None
            ]

        self.nq = nq
        self.num_elements = E

        # tagged boundary quadrature
        self.boundary = {}
        conn = domain.connectivity
        boundary_vertices = set(conn.boundary_vertices.tolist())
        facets = sorted(conn.boundary_facets)
        for tag, members in mesh.tags.items():
            mset = set(members.tolist())
            if not mset or not mset.issubset(boundary_vertices):
                continue
            tagged = [f for f in facets if all(v in mset for v in f)]
            if not tagged:
                continue
            self.boundary[tag] = self._edge_quadrature(tagged)

        # Dirichlet constraints
        self.dirichlet_values = {}
        for bc in bcs:
            if isinstance(bc, Dirichlet):
                for tag in bc.tags:
                    if tag not in mesh.tags:
                        raise UnknownBcTag(f"unknown Dirichlet tag {tag!r}")
                    for v in mesh.tags[tag]:
                        x = verts[int(v)]
                        val = bc.value(*x) if callable(bc.value) \
                            else float(bc.value)
                        self.dirichlet_values[int(v)] = val
            elif isinstance(bc, Neumann):
                for tag in bc.tags:
                    if tag not in self.boundary:
                        raise UnknownBcTag(
                            f"Neumann tag {tag!r} owns no boundary facets"
                        )
            else:
                raise UnknownBcTag(f"unsupported bc record {bc!r}")

        V = mesh.num_vertices
        constrained = sorted(self.dirichlet_values)
        self.constrained = np.asarray(constrained, dtype=np.int64)
        mask = np.ones(V, dtype=bool)
        mask[self.constrained] = False
        self.free = np.nonzero(mask)[0]
        self.num_vertices = V

    def _edge_quadrature(self, facets):
        mesh = self.domain.mesh
        verts = mesh.vertices
        if mesh.kind == "LINE2":
            # 0-d facets: point evaluation with unit weight
            vids = np.asarray([f[0] for f in facets], dtype=np.int64)
            return {
                "vertices": vids[:, None],
                "coords": verts[vids][:, None, :],
                "weights": np.ones((len(vids), 1)),
                "values": np.ones((1, 1)),
            }
        ref_x, ref_w = _gauss_legendre_01(self.quad_degree)
        pairs = np.asarray(facets, dtype=np.int64)  # (Ed, 2)
        p0 = verts[pairs[:, 0]]
        p1 = verts[pairs[:, 1]]
        lengths = np.linalg.norm(p1 - p0, axis=1)
        coords = p0[:, None, :] + ref_x[None, :, None] * (p1 - p0)[:, None, :]
        weights = lengths[:, None] * ref_w[None, :]
        values = np.stack([1 - ref_x, ref_x], axis=1)  # (nqe, 2)
        return {
            "vertices": pairs,
            "coords": coords,
            "weights": weights,
            "values": values,
        }

    def lift(self, u_free):
        """Expand free-dof values to the full vertex vector."""
        full = np.zeros(self.num_vertices)
        full[self.free] = np.asarray(u_free, dtype=np.float64).reshape(-1)
        for v, val in self.dirichlet_values.items():
            full[v] = val
        return full

    def restrict(self, u_full):
        return np.asarray(u_full, dtype=np.float64).reshape(-1)[self.free]


def init_fem(domain, element_type="TRI3", quad_degree=2, bcs=()):
    setup = FemSetup(domain, element_type, quad_degree, bcs)
    domain.fem = setup

    Tn = domain.num_times
    B = domain.batch

    def register(tag, coords_flat):
        pool = coords_flat[None, None]
        pool = np.broadcast_to(pool, (1, Tn) + coords_flat.shape)
        domain.mesh_pool[tag] = np.ascontiguousarray(pool)
        ctx = np.broadcast_to(coords_flat[None, None],
                              (B, Tn) + coords_flat.shape)
        domain.context[tag] = np.ascontiguousarray(ctx)

    register(GAUSS_VOLUME, setup.qp_coords.reshape(-1, domain.mesh.dim))
    for tag, edge in setup.boundary.items():
        register(f"gauss_{tag}", edge["coords"].reshape(-1, domain.mesh.dim))
    return setup


def fem_symbols(domain):
    if domain.fem is None:
        raise UnassembledSymbol("call init_fem() before fem_symbols()")
    return domain.fem.trial, domain.fem.test


# ---------------------------------------------------------------------------
# Term expansion and classification
# ---------------------------------------------------------------------------

def _contains(node, kinds, memo):
    hit = memo.get(node)
    if hit is not None:
        return hit
    out = node.kind in kinds or any(
        _contains(c, kinds, memo) for c in node.children
    )
    memo[node] = out
    return out


_SYMBOLS = (tr.TRIAL, tr.TEST)


def _expand_terms(node, memo):
    """Distribute products over sums -> list of (sign, [factor nodes])."""
    if not _contains(node, _SYMBOLS, memo):
        return [(1.0, [node])]
    if node.kind == tr.ARITH:
        op = node.payload
        if op == "add":
            return _expand_terms(node.children[0], memo) + \
                _expand_terms(node.children[1], memo)
        if op == "sub":
            right = [(-s, f) for s, f in _expand_terms(node.children[1], memo)]
            return _expand_terms(node.children[0], memo) + right
        if op == "neg":
            return [(-s, f) for s, f in _expand_terms(node.children[0], memo)]
        if op == "mul":
            left = _expand_terms(node.children[0], memo)
            right = _expand_terms(node.children[1], memo)
            return [(sl * sr, fl + fr) for sl, fl in left for sr, fr in right]
        if op == "div":
            den = node.children[1]
            if _contains(den, _SYMBOLS, memo):
                raise NonlinearTerm("division by trial/test is not assemblable")
            inv = tr.literal(1.0) / den
            return [(s, f + [inv])
                    for s, f in _expand_terms(node.children[0], memo)]
    return [(1.0, [node])]


class _Term:
    __slots__ = ("sign", "coeff", "trial_parts", "test_part", "region",
                 "temporal")

    def __init__(self):
        self.sign = 1.0
        self.coeff = []        # coefficient factor nodes
        self.trial_parts = []  # ("value",) | ("grad", d) | ("expr", node)
        self.test_part = None  # ("value",) | ("grad", d)
        self.region = None     # None -> volume; tag name for boundary
        self.temporal = False


def _classify_term(setup, sign, factors, memo):
    domain = setup.domain
    term = _Term()
    term.sign = sign
    for f in factors:
        has_trial = _contains(f, (tr.TRIAL,), memo)
        has_test = _contains(f, (tr.TEST,), memo)
        if has_trial and has_test:
            raise NonlinearTerm(
                "a single factor mixes trial and test symbols"
            )
        if has_test:
            if term.test_part is not None:
                raise TargetMismatch("term is nonlinear in the test symbol")
            term.test_part = _symbol_part(setup, f, tr.TEST, term)
            if term.test_part[0] == "dt":
                raise TargetMismatch("temporal derivative of the test symbol")
        elif has_trial:
            part = _symbol_part(setup, f, tr.TRIAL, term)
            if part[0] == "dt":
                term.temporal = True
            else:
                term.trial_parts.append(part)
        else:
            term.coeff.append(f)
    if term.test_part is None:
        raise TargetMismatch(
            "every weak-form term needs exactly one test factor"
        )
    term.region = _term_region(domain, factors, memo)
    return term


def _symbol_part(setup, factor, symbol_kind, term):
    """Recognize u, d(u, x_i), d(u, t) (and arbitrary trial expressions)."""
    if factor.kind == symbol_kind:
        return ("value", factor)
    if factor.kind == tr.DERIVATIVE:
        child, wrt = factor.children
        order = factor.payload[0]
        if child.kind == symbol_kind:
            spec = setup.domain.binding_spec(wrt)
            if spec is None:
                raise UnassembledSymbol(
                    f"derivative of {child.kind} w.r.t. an unregistered "
                    f"variable {wrt.name!r}"
                )
            if spec[0] == "time":
                if order != 1:
                    raise TargetMismatch(
                        "only first-order temporal derivatives assemble"
                    )
                return ("dt", factor)
            if order != 1:
                raise NonlinearTerm(
                    "P1 elements carry no second derivatives; integrate by "
                    "parts before assembling"
                )
            return ("grad", spec[2], factor)
    if symbol_kind == tr.TEST:
        raise TargetMismatch(
            "test symbol may only appear as phi or d(phi, x_i)"
        )
    return ("expr", factor)


def _term_region(domain, factors, memo):
    regions = set()

    def visit(node, seen):
        if node in seen:
            return
        seen.add(node)
        if node.kind == tr.VARIABLE:
            spec = domain.binding_spec(node)
            if spec and spec[0] in ("coord", "full"):
                tag = spec[1]
                if tag == GAUSS_VOLUME:
                    regions.add(None)
                elif tag.startswith("gauss_"):
                    regions.add(tag[len("gauss_"):])
        for c in node.children:
            visit(c, seen)

    seen = set()
    for f in factors:
        visit(f, seen)
    if len(regions) > 1:
        raise TargetMismatch(
            f"one term mixes quadrature regions: {sorted(map(str, regions))}"
        )
    return regions.pop() if regions else None


def _group(setup, weak):
    memo = {}
    if not _contains(weak, _SYMBOLS, memo):
        raise UnassembledSymbol("weak form contains no trial/test symbols")
    raw = _expand_terms(weak, memo)
    return [_classify_term(setup, s, f, memo) for s, f in raw]


def _trial_degree(term):
    deg = 0
    for part in term.trial_parts:
        if part[0] in ("value", "grad"):
            deg += 1
        else:
            return None  # nonlinear / unknown degree
    return deg


# ---------------------------------------------------------------------------
# Numeric helpers
# ---------------------------------------------------------------------------

def _coefficient_values(setup, term, nq_total, time_value=None):
    """Evaluate the product of coefficient factors on the term's quadrature
    points; returns a flat (nq_total,) array."""
    domain = setup.domain
    if not term.coeff:
        return np.ones(nq_total)
    tag = GAUSS_VOLUME if term.region is None else f"gauss_{term.region}"
    coords = domain.mesh_pool[tag][0, :1]        # (1, N, D) at batch/time 1
    npts = coords.shape[1]
    overlay = {}
    for var, spec in domain._vars.items():
        if spec[0] == "coord" and spec[1] == tag:
            overlay[var] = T.Tensor(coords[None, :, :, spec[2]:spec[2] + 1])
        elif spec[0] == "full" and spec[1] == tag:
            overlay[var] = T.Tensor(coords[None])
        elif spec[0] == "time":
            t0 = time_value
            if t0 is None:
                t0 = domain.time_grid[0] if domain.time_grid is not None else 0.0
            overlay[var] = T.Tensor(np.full((1, 1, 1, 1), float(t0)))
    ctx = ev.EvalContext(domain=domain)
    ctx.bindings.update(overlay)
    value = T.Tensor(np.ones(()))
    for f in term.coeff:
        value = T.mul(value, ev.evaluate(f, ctx))
    arr = np.broadcast_to(value.data, (1, 1, npts, 1)) \
        if value.data.ndim <= 4 else value.data
    return np.ascontiguousarray(arr).reshape(npts)[:nq_total]


def _volume_part_values(setup, part):
    """(E, nq, nodes_per_element) values of a trial/test part at volume
    quadrature points."""
    E, nq = setup.num_elements, setup.nq
    n_nodes = setup.shape_values.shape[1]
    if part[0] == "value":
        return np.broadcast_to(setup.shape_values[None], (E, nq, n_nodes))
    if part[0] == "grad":
        d = part[1]
        return np.broadcast_to(setup.shape_grads[:, None, :, d],
                               (E, nq, n_nodes))
    raise NonlinearTerm(f"part {part[0]!r} has no linear basis values")


def _edge_part_values(edge, part):
    Ed, nqe = edge["weights"].shape
    n_nodes = edge["values"].shape[1]
    if part[0] == "value":
        return np.broadcast_to(edge["values"][None], (Ed, nqe, n_nodes))
    raise TargetMismatch(
        "boundary terms support only symbol values (no tangential gradients)"
    )


def _accumulate_bilinear(setup, term, rows, cols, vals, time_value=None):
    sign = term.sign
    if term.region is None:
        E, nq = setup.num_elements, setup.nq
        c = _coefficient_values(setup, term, E * nq, time_value)
        wc = setup.qp_weights * c.reshape(E, nq)
        test_vals = _volume_part_values(setup, term.test_part)
        trial_vals = _volume_part_values(setup, term.trial_parts[0])
        local = sign * np.einsum("eq,eqa,eqb->eab", wc, test_vals, trial_vals)
        elems = setup.domain.mesh.elements
        n = elems.shape[1]
        for a in range(n):
            for b in range(n):
                rows.append(elems[:, a])
                cols.append(elems[:, b])
                vals.append(local[:, a, b])
    else:
        edge = setup.boundary.get(term.region)
        if edge is None:
            raise UnknownBcTag(f"no quadrature region for {term.region!r}")
        Ed, nqe = edge["weights"].shape
        c = _coefficient_values(setup, term, Ed * nqe, time_value)
        wc = edge["weights"] * c.reshape(Ed, nqe)
        test_vals = _edge_part_values(edge, term.test_part)
        trial_vals = _edge_part_values(edge, term.trial_parts[0])
        local = sign * np.einsum("eq,eqa,eqb->eab", wc, test_vals, trial_vals)
        pairs = edge["vertices"]
        n = pairs.shape[1]
        for a in range(n):
            for b in range(n):
                rows.append(pairs[:, a])
                cols.append(pairs[:, b])
                vals.append(local[:, a, b])


def _accumulate_load(setup, term, out, time_value=None):
    """Add the term (as written) into the full-length vector `out`."""
    sign = term.sign
    if term.region is None:
        E, nq = setup.num_elements, setup.nq
        c = _coefficient_values(setup, term, E * nq, time_value)
        wc = setup.qp_weights * c.reshape(E, nq)
        test_vals = _volume_part_values(setup, term.test_part)
        local = sign * np.einsum("eq,eqa->ea", wc, test_vals)
        np.add.at(out, setup.domain.mesh.elements, local)
    else:
        edge = setup.boundary.get(term.region)
        if edge is None:
            raise UnknownBcTag(f"no quadrature region for {term.region!r}")
        Ed, nqe = edge["weights"].shape
        c = _coefficient_values(setup, term, Ed * nqe, time_value)
        wc = edge["weights"] * c.reshape(Ed, nqe)
        test_vals = _edge_part_values(edge, term.test_part)
        local = sign * np.einsum("eq,eqa->ea", wc, test_vals)
        np.add.at(out, edge["vertices"], local)


def _coo(setup, rows, cols, vals):
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    V = setup.num_vertices
    return sp.coo_matrix((v, (r, c)), shape=(V, V))


class LinearSystem:
    """Reduced system A u = b plus the Dirichlet elimination record."""

    def __init__(self, setup, A_full, b_full):
        self.setup = setup
        free = setup.free
        con = setup.constrained
        csr = A_full.tocsr()
        self.full_matrix = csr
        self.full_rhs = b_full
        g = np.array([setup.dirichlet_values[int(v)] for v in con]) \
            if len(con) else np.zeros(0)
        self.A = csr[free][:, free].tocoo()
        lift = csr[free][:, con] @ g if len(con) else 0.0
        self.b = b_full[free] - lift
        self.dirichlet = {
            "free": free, "constrained": con, "values": g,
        }

    def __iter__(self):
        yield self.A
        yield self.b

    @property
    def triplets(self):
        return self.A.row, self.A.col, self.A.data

    def solve(self):
        u_free = spla.spsolve(self.A.tocsc(), self.b)
        return self.setup.lift(u_free)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def assemble(weak, target, **options):
    setup = _find_setup(weak)
    terms = _group(setup, weak)
    temporal = [t for t in terms if t.temporal]
    steady = [t for t in terms if not t.temporal]

    if target == "fem_system":
        if temporal:
            raise TargetMismatch(
                "fem_system cannot assemble temporal derivatives; "
                "use target='fem_time'"
            )
        return assemble_fem_system(setup, steady)
    if target == "fem_residual":
        if temporal:
            raise TargetMismatch("fem_residual expects a steady form")
        return assemble_fem_residual(setup, steady)
    if target == "fem_time":
        return assemble_fem_time(
            setup, temporal, steady,
            linear=options.get("linear", True),
            state0=options.get("state0"),
            mode=options.get("mode", "implicit"),
        )
    if target == "vpinn":
        trial = options.get("trial")
        if trial is None:
            raise TargetMismatch("vpinn needs trial=<expression or nodal values>")
        if temporal:
            raise TargetMismatch("vpinn expects a steady form")
        return assemble_vpinn(setup, steady, trial)
    raise TargetMismatch(f"unknown assembly target {target!r}")


def _find_setup(weak):
    for node in tr.walk(weak):
        if node.kind in _SYMBOLS:
            return node.payload
    raise UnassembledSymbol("weak form contains no trial/test symbols")


def assemble_fem_system(setup, terms):
    rows, cols, vals = [], [], []
    b_full = np.zeros(setup.num_vertices)
    for term in terms:
        deg = _trial_degree(term)
        if deg is None or deg > 1:
            raise NonlinearTerm(
                "fem_system needs terms at most linear in the trial symbol"
            )
        if deg == 1:
            _accumulate_bilinear(setup, term, rows, cols, vals)
        else:
            # trial-free: weak = a(u,phi) + load = 0  =>  A u = -load
            neg = _Term()
            neg.sign = -term.sign
            neg.coeff = term.coeff
            neg.test_part = term.test_part
            neg.region = term.region
            _accumulate_load(setup, neg, b_full)
    return LinearSystem(setup, _coo(setup, rows, cols, vals), b_full)


class ResidualOperator:
    """R(u) over free dofs with an AD-assembled Jacobian callable."""

    def __init__(self, setup, terms, time_value=None):
        self.setup = setup
        self.terms = terms
        self.time_value = time_value

    def _local_fields(self, u_full, watch_tape=None):
        """Taped per-element interpolants: u_q (1,1,E*nq,1) and per-direction
        gradients, as functions of the local coefficient tensor."""
        setup = self.setup
        elems = setup.domain.mesh.elements
        E, nq = setup.num_elements, setup.nq
        u_loc = T.Tensor(u_full[elems])  # (E, n_nodes)
        if watch_tape is not None:
            watch_tape.watch(u_loc)
        Nt = T.Tensor(setup.shape_values.T)            # (n_nodes, nq)
        u_q = T.matmul(u_loc, Nt)                      # (E, nq)
        u_q = T.reshape(u_q, (1, 1, E * nq, 1))
        grads = []
        for d in range(setup.domain.mesh.dim):
            gd = T.reduce_sum(
                T.mul(u_loc, T.Tensor(setup.shape_grads[:, :, d])),
                axes=1, keepdims=True,
            )                                          # (E, 1)
            gd = T.broadcast_to(gd, (E, nq))
            grads.append(T.reshape(gd, (1, 1, E * nq, 1)))
        return u_loc, u_q, grads

    def _term_point_values(self, term, u_q, grads):
        """Taped product of all non-test factors at the volume points."""
        setup = self.setup
        E, nq = setup.num_elements, setup.nq
        value = T.Tensor(
            _coefficient_values(setup, term, E * nq, self.time_value)
            .reshape(1, 1, E * nq, 1) * term.sign
        )
        for part in term.trial_parts:
            if part[0] == "value":
                value = T.mul(value, u_q)
            elif part[0] == "grad":
                value = T.mul(value, grads[part[1]])
            else:
                value = T.mul(
                    value, self._eval_trial_expr(part[1], u_q, grads)
                )
        return value

    def _eval_trial_expr(self, factor, u_q, grads):
        """Evaluate an arbitrary trial-bearing factor by preseeding the
        symbol (and its derivative nodes) with live taped tensors."""
        setup = self.setup
        ctx = ev.EvalContext(domain=setup.domain)
        ctx.cache[setup.trial] = u_q
        for node in tr.walk(factor):
            if node.kind == tr.DERIVATIVE and node.children[0] is setup.trial:
                spec = setup.domain.binding_spec(node.children[1])
                if spec and spec[0] == "coord":
                    ctx.cache[node] = grads[spec[2]]
        return ev.evaluate(factor, ctx)

    def residual_full(self, u_full):
        setup = self.setup
        E, nq = setup.num_elements, setup.nq
        _, u_q, grads = self._local_fields(u_full)
        out = np.zeros(setup.num_vertices)
        for term in self.terms:
            if term.region is not None:
                # boundary terms carry no trial dependence here
                _accumulate_load(setup, term, out,
                                 time_value=self.time_value)
                continue
            value = self._term_point_values(term, u_q, grads)
            wv = np.broadcast_to(value.data.reshape(-1), (E * nq,)) \
                .reshape(E, nq) * setup.qp_weights
            test_vals = _volume_part_values(setup, term.test_part)
            local = np.einsum("eq,eqa->ea", wv, test_vals)
            np.add.at(out, setup.domain.mesh.elements, local)
        return out

    def __call__(self, u_free):
        u_full = self.setup.lift(u_free)
        return self.residual_full(u_full)[self.setup.free]

    def jacobian(self, u_free):
        setup = self.setup
        E, nq = setup.num_elements, setup.nq
        elems = setup.domain.mesh.elements
        n_nodes = elems.shape[1]
        u_full = setup.lift(u_free)

        with T.Tape() as tape:
            u_loc, u_q, grads = self._local_fields(u_full, watch_tape=tape)
            contribs = []
            for term in self.terms:
                if term.region is not None:
                    continue
                value = self._term_point_values(term, u_q, grads)
                wv = T.mul(
                    value,
                    T.Tensor(setup.qp_weights.reshape(1, 1, E * nq, 1)),
                )
                test_vals = _volume_part_values(setup, term.test_part)
                for a in range(n_nodes):
                    ta = T.Tensor(test_vals[:, :, a].reshape(1, 1, E * nq, 1))
                    contribs.append((a, T.mul(wv, ta)))
            # per local test index: sum over quadrature within each element
            locals_by_a = {}
            for a, v in contribs:
                r = T.reduce_sum(T.reshape(v, (E, nq)), axes=1)
                locals_by_a[a] = r if a not in locals_by_a else \
                    T.add(locals_by_a[a], r)
            sums = {a: T.reduce_sum(v) for a, v in locals_by_a.items()}
        rows, cols, vals = [], [], []
        for a, total in sums.items():
            g = tape.gradient(total, [u_loc])[u_loc.uid]  # (E, n_nodes)
            for b in range(n_nodes):
                rows.append(elems[:, a])
                cols.append(elems[:, b])
                vals.append(g.data[:, b])
        J_full = _coo(setup, rows, cols, vals).tocsr()
        return J_full[setup.free][:, setup.free]


def assemble_fem_residual(setup, terms):
    for term in terms:
        if term.region is not None and _trial_degree(term) not in (0,):
            raise NonlinearTerm(
                "fem_residual supports trial-free boundary terms only"
            )
    return ResidualOperator(setup, terms)


def newton_solve(op, u0, tol=1e-10, max_iter=10):
    """Newton iteration on R(u) = 0; returns (u, residual_norms)."""
    u = np.asarray(u0, dtype=np.float64).copy()
    norms = []
    for _ in range(max_iter):
        r = op(u)
        norms.append(float(np.linalg.norm(r)))
        if norms[-1] < tol:
            return u, norms
        J = op.jacobian(u)
        du = spla.spsolve(J.tocsc(), -r)
        u = u + du
    r = op(u)
    norms.append(float(np.linalg.norm(r)))
    if norms[-1] < tol:
        return u, norms
    raise NewtonDivergence(max_iter, norms[-1])


# ---------------------------------------------------------------------------
# vpinn
# ---------------------------------------------------------------------------

def _substitute(root, mapping):
    """Rebuild `root` with nodes replaced per `mapping` (identity keys)."""
    memo = {}

    def rec(node):
        if node in mapping:
            return mapping[node]
        hit = memo.get(node)
        if hit is not None:
            return hit
        new_children = tuple(rec(c) for c in node.children)
        if new_children == node.children:
            out = node
        else:
            out = tr.ExprNode(node.kind, node.payload, new_children, node.name)
        memo[node] = out
        return out

    return rec(root)


def _test_weight_matrix(setup, term):
    """(n_free, nq_total) matrix of quadrature-weighted test values."""
    free_index = -np.ones(setup.num_vertices, dtype=np.int64)
    free_index[setup.free] = np.arange(len(setup.free))
    if term.region is None:
        E, nq = setup.num_elements, setup.nq
        W = np.zeros((len(setup.free), E * nq))
        test_vals = _volume_part_values(setup, term.test_part)
        elems = setup.domain.mesh.elements
        wq = setup.qp_weights
        for a in range(elems.shape[1]):
            gl = free_index[elems[:, a]]
            e_ok = np.nonzero(gl >= 0)[0]
            rows = np.repeat(gl[e_ok], nq)
            cols = (e_ok[:, None] * nq + np.arange(nq)).reshape(-1)
            np.add.at(W, (rows, cols),
                      (wq[e_ok] * test_vals[e_ok, :, a]).reshape(-1))
        return W
    edge = setup.boundary[term.region]
    Ed, nqe = edge["weights"].shape
    W = np.zeros((len(setup.free), Ed * nqe))
    test_vals = _edge_part_values(edge, term.test_part)
    for a in range(edge["vertices"].shape[1]):
        gl = free_index[edge["vertices"][:, a]]
        e_ok = np.nonzero(gl >= 0)[0]
        rows = np.repeat(gl[e_ok], nqe)
        cols = (e_ok[:, None] * nqe + np.arange(nqe)).reshape(-1)
        np.add.at(W, (rows, cols),
                  (edge["weights"][e_ok] * test_vals[e_ok, :, a]).reshape(-1))
    return W


def _nodal_substitution(setup, terms, nodal):
    """Constant substitution values for a P1-interpolated trial field."""
    u_full = nodal if len(nodal) == setup.num_vertices else setup.lift(nodal)
    elems = setup.domain.mesh.elements
    E, nq = setup.num_elements, setup.nq
    u_loc = u_full[elems]
    u_q = (u_loc @ setup.shape_values.T).reshape(1, 1, E * nq, 1)
    grads = []
    for d in range(setup.domain.mesh.dim):
        gd = np.sum(u_loc * setup.shape_grads[:, :, d], axis=1)
        grads.append(np.broadcast_to(gd[:, None], (E, nq))
                     .reshape(1, 1, E * nq, 1))
    mapping = {setup.trial: tr.constant(u_q, name="u_h")}
    for term in terms:
        for part in term.trial_parts:
            if part[0] == "grad":
                mapping.setdefault(
                    part[2], tr.constant(grads[part[1]], name=f"du_h_{part[1]}")
                )
            elif part[0] == "expr":
                for node in tr.walk(part[1]):
                    if node.kind == tr.DERIVATIVE and \
                            node.children[0] is setup.trial:
                        spec = setup.domain.binding_spec(node.children[1])
                        if spec and spec[0] == "coord":
                            mapping.setdefault(
                                node, tr.constant(grads[spec[2]])
                            )
    return mapping


def assemble_vpinn(setup, terms, trial):
    """Traced residual: sum over hat-function tests of the squared
    quadrature-weighted weak residual."""
    if isinstance(trial, tr.ExprNode):
        mapping = {setup.trial: trial}
        symbolic = True
    else:
        mapping = _nodal_substitution(setup, terms,
                                      np.asarray(trial, dtype=np.float64))
        symbolic = False

    pieces = []
    for term in terms:
        s_expr = None
        for f in term.coeff:
            s_expr = f if s_expr is None else s_expr * f

        for part in term.trial_parts:
            if part[0] == "value":
                node = mapping[setup.trial]
            elif part[0] == "grad":
                if symbolic:
                    node = tr.derivative(mapping[setup.trial],
                                         part[2].children[1], order=1)
                else:
                    node = mapping[part[2]]
            else:
                node = _substitute(part[1], mapping)
            s_expr = node if s_expr is None else s_expr * node
        if s_expr is None:
            s_expr = tr.literal(1.0)
        if term.sign != 1.0:
            s_expr = tr.literal(term.sign) * s_expr

        for node in tr.walk(s_expr):
            if node.kind in _SYMBOLS:
                raise TrialSymbolRemaining(
                    "trial/test symbol remains after vpinn substitution"
                )

        W = tr.constant(_test_weight_matrix(setup, term), name="test_weights")
        pieces.append(tr.matmul_nodes(W, s_expr))

    r = pieces[0]
    for p in pieces[1:]:
        r = r + p
    return (r * r).reduce("sum", axes=(-2, -1))


# ---------------------------------------------------------------------------
# fem_time
# ---------------------------------------------------------------------------

class TimeBlock:
    """Semi-discrete block over free dofs.

    linear:    M u' + A u = b(t)
    nonlinear: M(t) u' + R(u, t) = 0  with Jacobian J(u, t)
    """

    def __init__(self, setup, M, u0, linear, A=None, b=None,
                 residual=None, jacobian=None, mode="implicit"):
        self.setup = setup
        self.M = M
        self.u0 = u0
        self.linear = linear
        self.A = A
        self._b = b
        self._residual = residual
        self._jacobian = jacobian
        self.mode = mode

    def b(self, t):
        return self._b(t)

    def mass(self, t=0.0):
        return self.M

    def residual(self, u, t):
        if self.linear:
            return self.A @ u - self.b(t)
        return self._residual(u, t)

    def jacobian(self, u, t):
        if self.linear:
            return self.A
        return self._jacobian(u, t)

    # integration entry points
    def integrate(self, dt, steps, scheme="backward_euler"):
        if scheme != "backward_euler":
            raise TargetMismatch(f"unknown scheme {scheme!r}")
        return step_backward_euler(self, dt, steps)

    def as_explicit_ode(self):
        return export_explicit_ode(self)


def assemble_fem_time(setup, temporal, steady, linear=True, state0=None,
                      mode="implicit"):
    if not temporal:
        raise NoTemporalTerm(
            "fem_time needs exactly one temporal-derivative term"
        )
    if len(temporal) > 1:
        raise MultipleTemporalTerms(
            f"found {len(temporal)} temporal terms; expected one"
        )
    if mode != "implicit":
        raise TargetMismatch(f"mode {mode!r} unsupported; use 'implicit'")
    mterm = temporal[0]
    if mterm.trial_parts:
        raise NonlinearTerm("the temporal term must be linear: c * u_t * phi")

    rows, cols, vals = [], [], []
    mass_like = _Term()
    mass_like.sign = mterm.sign
    mass_like.coeff = mterm.coeff
    mass_like.test_part = mterm.test_part
    mass_like.region = mterm.region
    mass_like.trial_parts = [("value", None)]
    _accumulate_bilinear(setup, mass_like, rows, cols, vals)
    M_full = _coo(setup, rows, cols, vals).tocsr()
    free = setup.free
    M = M_full[free][:, free]

    if state0 is None:
        u0 = np.zeros(len(free))
    else:
        state0 = np.asarray(state0, dtype=np.float64).reshape(-1)
        u0 = setup.restrict(state0) if len(state0) == setup.num_vertices \
            else state0
        if len(u0) != len(free):
            raise TargetMismatch(
                f"state0 length {len(state0)} matches neither free dof "
                f"count {len(free)} nor vertex count {setup.num_vertices}"
            )

    if linear:
        for term in steady:
            deg = _trial_degree(term)
            if deg is None or deg > 1:
                raise NonlinearTerm(
                    "linear=True but a term is nonlinear in the trial symbol"
                )
        a_terms = [t for t in steady if _trial_degree(t) == 1]
        load_terms = [t for t in steady if _trial_degree(t) == 0]
        rows, cols, vals = [], [], []
        for term in a_terms:
            _accumulate_bilinear(setup, term, rows, cols, vals)
        A_full = _coo(setup, rows, cols, vals).tocsr()
        A = A_full[free][:, free]
        con = setup.constrained
        g = np.array([setup.dirichlet_values[int(v)] for v in con]) \
            if len(con) else np.zeros(0)
        lift = A_full[free][:, con] @ g if len(con) else 0.0

        def b(t):
            out = np.zeros(setup.num_vertices)
            for term in load_terms:
                neg = _Term()
                neg.sign = -term.sign
                neg.coeff = term.coeff
                neg.test_part = term.test_part
                neg.region = term.region
                _accumulate_load(setup, neg, out, time_value=t)
            return out[free] - lift

        return TimeBlock(setup, M, u0, True, A=A, b=b, mode=mode)

    def residual(u, t):
        op = ResidualOperator(setup, steady, time_value=t)
        return op(u)

    def jacobian(u, t):
        op = ResidualOperator(setup, steady, time_value=t)
        return op.jacobian(u)

    return TimeBlock(setup, M, u0, False, residual=residual,
                     jacobian=jacobian, mode=mode)


def step_backward_euler(block, dt, steps, t0=0.0, newton_tol=1e-10,
                        newton_max_iter=25):
    """Implicit Euler; returns the trajectory (steps+1, n_free) incl. u0."""
    if dt <= 0:
        raise SingularStepMatrix("dt must be positive")
    u = np.asarray(block.u0, dtype=np.float64).copy()
    out = [u.copy()]
    if block.linear:
        system = (block.M + dt * block.A).tocsc()
        try:
            lu = spla.splu(system)
        except RuntimeError as exc:
            raise SingularStepMatrix(str(exc)) from None
        for k in range(int(steps)):
            t_next = t0 + dt * (k + 1)
            rhs = block.M @ u + dt * block.b(t_next)
            u = lu.solve(rhs)
            out.append(u.copy())
        return np.asarray(out)
    for k in range(int(steps)):
        t_next = t0 + dt * (k + 1)
        u_prev = u.copy()

        def F(w):
            return block.M @ (w - u_prev) / dt + block.residual(w, t_next)

        w = u.copy()
        converged = False
        for _ in range(newton_max_iter):
            r = F(w)
            if np.linalg.norm(r) < newton_tol:
                converged = True
                break
            J = (block.M / dt + block.jacobian(w, t_next)).tocsc()
            w = w + spla.spsolve(J, -r)
        if not converged and np.linalg.norm(F(w)) >= newton_tol:
            raise NewtonDivergence(newton_max_iter,
                                   float(np.linalg.norm(F(w))))
        u = w
        out.append(u.copy())
    return np.asarray(out)


def export_explicit_ode(block):
    """RHS callback u' = M^{-1} (b(t) - A u); M factorized once."""
    try:
        lu = spla.splu(block.M.tocsc())
    except RuntimeError as exc:
        raise SingularMass(str(exc)) from None

    if block.linear:
        def rhs(t, u):
            return lu.solve(block.b(t) - block.A @ u)
    else:
        def rhs(t, u):
            return lu.solve(-block.residual(u, t))
    return rhs
