import numpy as np
import pytest

from jno import trace as tr
from jno.errors import (
    ArityMismatch,
    ExtraBinding,
    MissingBinding,
    NonPositiveInterval,
    NotAVariable,
    ShapeInferenceFailure,
)


class FakeModel:
    """Shape-rule stand-in for a real network."""

    def __init__(self, out_dim=1, name="net"):
        self.out_dim = out_dim
        self.name = name

    def output_shape(self, arg_shapes):
        return tuple(arg_shapes[-1][:-1]) + (self.out_dim,)


class TestIdentity:
    def test_set_semantics(self):
        x = tr.variable("x")
        s = {x, x}
        assert len(s) == 1
        y = tr.variable("x")  # same name, distinct node
        assert len({x, y}) == 2

    def test_eq_is_identity(self):
        x = tr.variable("x")
        y = tr.variable("x")
        assert x == x
        assert not (x == y)
        assert x != y

    def test_inequality_builds_compare(self):
        x, y = tr.variable("x"), tr.variable("y")
        node = x < y
        assert node.kind == tr.COMPARE
        assert node.payload == "lt"


class TestBuild:
    def test_deferred_add(self):
        x, y = tr.variable("x"), tr.variable("y")
        node = x + y
        assert node.kind == tr.ARITH
        assert node.payload == "add"
        assert node.children == (x, y)

    def test_literal_lift(self):
        x = tr.variable("x")
        node = x + 1.0
        assert node.children[1].kind == tr.LITERAL

    def test_arity_error(self):
        with pytest.raises(ArityMismatch):
            tr.build(tr.ARITH, "add", (tr.variable("x"),))

    def test_derivative_requires_variable(self):
        x = tr.variable("x")
        with pytest.raises(NotAVariable):
            tr.derivative(x, x + x)

    def test_dd_builds_order_2(self):
        x = tr.variable("x")
        u = tr.ExprNode(tr.MODEL_CALL, FakeModel(), (x,))
        node = u.dd(x)
        assert node.kind == tr.DERIVATIVE
        assert node.payload[0] == 2

    def test_reduction_properties(self):
        x = tr.variable("x")
        assert (x.mse).payload == ("mse", None)
        assert (x.mean).payload == ("mean", None)

    def test_tracker_interval(self):
        x = tr.variable("x")
        node = tr.tracker(x, 10)
        assert node.kind == tr.TRACKER and node.payload == 10
        with pytest.raises(NonPositiveInterval):
            tr.tracker(x, 0)


class TestOperationDef:
    def test_shared_body(self):
        a = tr.variable("a")
        square = tr.define_operation([a], a * a, name="square")
        x, y = tr.variable("x"), tr.variable("y")
        c1, c2 = square(x), square(y)
        assert c1.payload is c2.payload
        assert c1 is not c2

    def test_missing_binding(self):
        a, b = tr.variable("a"), tr.variable("b")
        op = tr.define_operation([a, b], a + b)
        with pytest.raises(MissingBinding):
            tr.call_operation(op, {a: tr.variable("x")})

    def test_extra_binding(self):
        a = tr.variable("a")
        op = tr.define_operation([a], a * a)
        with pytest.raises(ExtraBinding):
            tr.call_operation(op, {a: tr.variable("x"), tr.variable("z"): a})

    def test_rebinding_consistent_cse_keys(self):
        # Oracle: canonical keys of two rebindings to the same args match,
        # so CSE collapses the two calls into one node.
        a = tr.variable("a")
        square = tr.define_operation([a], a * a, name="square")
        x = tr.variable("x")
        c1, c2 = square(x), square(x)
        root = c1 + c2
        new_root, stats = tr.cse(root)
        assert stats["nodes_after"] < stats["nodes_before"]
        assert new_root.children[0] is new_root.children[1]

    def test_call_expands_like_inline_body(self):
        # f(x) with f(a)=a*a keys identically to a hand-built x*x
        a = tr.variable("a")
        square = tr.define_operation([a], a * a)
        x = tr.variable("x")
        inline = x * x
        call = square(x)
        root = inline + call
        _, stats = tr.cse(root)
        assert stats["nodes_after"] == stats["nodes_before"] - 1


class TestCse:
    def test_shared_add(self):
        x, y = tr.variable("x"), tr.variable("y")
        prod = (x + y) * (x + y)  # two distinct add nodes
        assert prod.children[0] is not prod.children[1]
        new_root, stats = tr.cse(prod)
        assert stats == {"nodes_before": 5, "nodes_after": 4}
        assert new_root.children[0] is new_root.children[1]

    def test_no_duplicates_untouched(self):
        x, y = tr.variable("x"), tr.variable("y")
        root = (x * y) + x
        new_root, stats = tr.cse(root)
        assert stats["nodes_before"] == stats["nodes_after"]
        assert new_root is root

    def test_idempotent(self):
        x, y = tr.variable("x"), tr.variable("y")
        root = ((x + y) * (x + y)) + (x + y)
        once, s1 = tr.cse(root)
        twice, s2 = tr.cse(once)
        assert s2["nodes_before"] == s2["nodes_after"] == s1["nodes_after"]

    def test_distinct_variables_not_merged(self):
        x, y = tr.variable("v"), tr.variable("v")
        root = (x + 1.0) * (y + 1.0)
        new_root, stats = tr.cse(root)
        # the literals merge by value, but x+1 and y+1 hold different
        # Variables and must stay distinct
        assert stats == {"nodes_before": 7, "nodes_after": 6}
        assert new_root.children[0] is not new_root.children[1]

    def test_literals_merge_by_value(self):
        x = tr.variable("x")
        root = (x + 1.0) * (x + 1.0)
        _, stats = tr.cse(root)
        # before: x, 1.0, 1.0, add, add, mul; after: x, 1.0, add, mul
        assert stats == {"nodes_before": 6, "nodes_after": 4}

    def test_model_calls_share(self):
        net = FakeModel()
        x = tr.variable("x")
        u1 = tr.model_call(net, [x])
        u2 = tr.model_call(net, [x])
        c1 = (u1 * u1).mse
        c2 = (u2 + 1.0).mse
        (r1, r2), stats = tr.cse([c1, c2])
        calls = [n for n in tr.walk([r1, r2]) if n.kind == tr.MODEL_CALL]
        assert len(calls) == 1


class TestGraphUtils:
    def test_toposort_children_first(self):
        x, y = tr.variable("x"), tr.variable("y")
        root = (x + y) * x
        order = tr.toposort(root)
        pos = {n: i for i, n in enumerate(order)}
        for n in order:
            for c in n.children:
                assert pos[c] < pos[n]

    def test_acyclic_by_construction(self):
        # a random-ish composite graph always toposorts
        rng = np.random.default_rng(0)
        leaves = [tr.variable(f"v{i}") for i in range(4)]
        pool = list(leaves)
        for _ in range(30):
            a, b = rng.choice(len(pool), 2)
            pool.append(pool[int(a)] + pool[int(b)])
        assert len(tr.toposort(pool[-1])) == tr.count_nodes(pool[-1])


class TestShapes:
    def test_listing_path(self):
        B, N = 4, 10
        x = tr.variable("x", shape=(B, 1, N, 1))
        y = tr.variable("y", shape=(B, 1, N, 1))
        net = FakeModel(out_dim=1)
        inp = tr.concat_nodes([x, y], axis=-1)
        u = tr.model_call(net, [inp])
        loss = u.mse
        rep = tr.trace_shapes(loss)
        assert rep[inp] == (B, 1, N, 2)
        assert rep[u] == (B, 1, N, 1)
        assert rep[loss] == ()

    def test_mismatch_names_node(self):
        a = tr.variable("a", shape=(2, 1, 5, 1))
        b = tr.variable("b", shape=(2, 1, 4, 2))
        bad = a + b
        with pytest.raises(ShapeInferenceFailure) as exc:
            tr.trace_shapes(bad)
        assert exc.value.node is bad

    def test_feature_axis_broadcast_is_legal(self):
        # trailing 1-vs-2 broadcasts under the right-aligned rule
        a = tr.variable("a", shape=(2, 1, 5, 1))
        b = tr.variable("b", shape=(2, 1, 5, 2))
        root = a * b
        rep = tr.trace_shapes(root)
        assert rep[root] == (2, 1, 5, 2)

    def test_report_deterministic(self):
        x = tr.variable("x", shape=(3, 1, 7, 1))
        root = ((x * x) + x).mse
        rep = tr.trace_shapes(root)
        assert tr.print_shapes(rep) == tr.print_shapes(rep)

    def test_shape_matches_evaluation(self):
        from jno import evaluator as ev

        x = tr.variable("x", shape=(2, 3))
        root = (x * x + 1.0).reduce("sum", axes=1)
        rep = tr.trace_shapes(root)
        ctx = ev.EvalContext(bindings={x: np.ones((2, 3))})
        for node in rep.order:
            val = ev.evaluate(node, ctx)
            assert val.shape == rep[node]


class TestDump:
    def test_single_variable(self):
        x = tr.variable("x")
        text = tr.dump_tree(x)
        assert len(text.strip().splitlines()) == 1

    def test_back_reference_after_cse(self):
        x, y = tr.variable("x"), tr.variable("y")
        root, _ = tr.cse((x + y) * (x + y))
        text = tr.dump_tree(root)
        assert "^" in text
        assert text.count("Arith[add]") == 1

    def test_stable(self):
        x, y = tr.variable("x"), tr.variable("y")
        root = (x + y) * (x - y)
        assert tr.dump_tree(root) == tr.dump_tree(root)
