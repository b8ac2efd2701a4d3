"""Graph IR: typed op nodes, SubGraphs, lazy conditionals, recursion.

A SubGraph is a named, signed graph fragment. Declaring one registers the
signature immediately, so Invoke nodes can target it before its body exists;
that forward declaration is what makes self- and mutual recursion buildable.
Cond takes two SubGraph references and only ever runs the selected one, which
is what lets a recursive definition terminate.

Bodies may reference nodes of enclosing graphs directly; every such outer
reference is rewritten to an extra body input (a capture). Captures close
transitively at finalize: if Model's body invokes Leaf and Leaf captures the
embedding table, Model captures it too, and every call site is rewired
automatically.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .tensor import Shape, Tensor


class BuildError(ValueError):
    """Graph under construction was used inconsistently."""


class _DeferredType:
    def __repr__(self):
        return "Deferred"


DEFERRED = _DeferredType()


class KeyShape:
    """Type of an invocation-key value (an opaque call-path token)."""

    def __repr__(self):
        return "key"

    def __eq__(self, other):
        return isinstance(other, KeyShape)

    def __hash__(self):
        return hash("KeyShape")


KEY = KeyShape()


class TableShape(NamedTuple):
    """Type of a functional row-table value (the sequential baseline's state)."""

    rows: int
    cols: int

    def __str__(self):
        return f"table[{self.rows}x{self.cols}]"


class TupleShape(NamedTuple):
    parts: tuple

    def __str__(self):
        return "(" + ", ".join(str(p) for p in self.parts) + ")"


class RowTable:
    """Immutable table of column vectors with O(rows) functional update."""

    __slots__ = ("slots", "cols")

    def __init__(self, slots: tuple, cols: int):
        self.slots = slots
        self.cols = cols

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "RowTable":
        z = np.zeros((cols, 1))
        z.flags.writeable = False
        return cls((z,) * rows, cols)

    def set(self, i: int, col: np.ndarray) -> "RowTable":
        s = self.slots
        return RowTable(s[:i] + (col,) + s[i + 1 :], self.cols)

    def __len__(self):
        return len(self.slots)


class RowGrads:
    """Sparse gradient of a gather table: per-row contributions to scatter-add.

    Entries keep arrival order; duplicates are summed first-seen-first when
    densified or applied, so reductions stay order-deterministic.
    """

    __slots__ = ("rows", "cols", "entries")

    def __init__(self, rows: int, cols: int, entries: tuple):
        self.rows = rows
        self.cols = cols
        self.entries = entries  # tuple of (row_index, 1 x cols ndarray)

    def merge(self, other: "RowGrads") -> "RowGrads":
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise ValueError("row-gradient shapes differ")
        return RowGrads(self.rows, self.cols, self.entries + other.entries)

    def to_dense(self) -> Tensor:
        out = np.zeros((self.rows, self.cols))
        for i, row in self.entries:
            out[i] += row[0]
        return Tensor._wrap(out)


def _as_shape(s) -> Shape | KeyShape | TableShape:
    if isinstance(s, (Shape, KeyShape, TableShape)):
        return s
    if isinstance(s, tuple) and len(s) == 2:
        rows, cols = s
        return Shape(rows, cols)
    raise BuildError(f"cannot interpret {s!r} as a shape")


class NodeHandle(NamedTuple):
    graph: "Graph"
    id: int

    def __repr__(self):
        return f"<node {self.id} of {self.graph.label}>"


class Node:
    __slots__ = ("id", "kind", "payload", "inputs", "shape", "grad_flag")

    def __init__(self, id: int, kind: str, payload, inputs: list[int], shape):
        self.id = id
        self.kind = kind
        self.payload = payload
        self.inputs = inputs
        self.shape = shape
        self.grad_flag = False

    @property
    def out_shape(self):
        return self.shape


class SubGraphRef(NamedTuple):
    name: str


class SubGraphDef:
    def __init__(self, name: str, in_shapes, out_shapes):
        self.name = name
        self.in_shapes = [_as_shape(s) for s in in_shapes]
        self.out_shapes = [_as_shape(s) for s in out_shapes]
        self.body: Graph | None = None
        self.is_grad = False

    @property
    def captures(self) -> list[NodeHandle]:
        return [] if self.body is None else self.body.capture_order

    @property
    def defined(self) -> bool:
        return self.body is not None


_SAME_SHAPE_BINARY = {
    "add",
    "sub",
    "hadamard",
    "tanh_bwd",
    "sigmoid_bwd",
    "square_bwd",
}


class Graph:
    """A graph under construction (the top level or one SubGraph body)."""

    def __init__(self, parent: "Graph | None" = None, label: str = "top"):
        self.parent = parent
        self.label = label
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self.capture_map: dict[tuple[int, int], int] = {}  # (outer graph id, node id) -> proxy
        self.capture_order: list[NodeHandle] = []
        self.arg_ids: list[int] = []
        self.is_grad = False
        if parent is None:
            self.registry: dict[str, SubGraphDef] = {}
            self.declared_order: list[str] = []
            self.finalized = False
        else:
            self.registry = parent.registry
            self.declared_order = parent.declared_order

    # -- plumbing -------------------------------------------------------

    def root(self) -> "Graph":
        g = self
        while g.parent is not None:
            g = g.parent
        return g

    def _check_mutable(self):
        if self.root().finalized:
            raise BuildError("graph is finalized and immutable")

    def _local_id(self, h: NodeHandle) -> int:
        """Resolve a handle to a node id in this graph, capturing outer refs."""
        if h.graph is self:
            return h.id
        anc = self.parent
        while anc is not None and anc is not h.graph:
            anc = anc.parent
        if anc is None:
            raise BuildError(
                f"node {h.id} belongs to {h.graph.label!r}, which does not enclose {self.label!r}"
            )
        return self._capture(h)

    def _capture(self, outer: NodeHandle) -> int:
        key = (id(outer.graph), outer.id)
        proxy = self.capture_map.get(key)
        if proxy is None:
            shape = outer.graph.nodes[outer.id].shape
            node = Node(len(self.nodes), "capture", outer, [], shape)
            self.nodes.append(node)
            proxy = node.id
            self.capture_map[key] = proxy
            self.capture_order.append(outer)
        return proxy

    def shape_of(self, h: NodeHandle):
        return h.graph.nodes[h.id].shape

    # -- node addition --------------------------------------------------

    def add_node(
        self,
        kind: str,
        inputs: Sequence[NodeHandle] = (),
        payload=None,
        shape=None,
    ) -> NodeHandle:
        self._check_mutable()
        ids = [self._local_id(h) for h in inputs]
        in_shapes = [self.nodes[i].shape for i in ids]
        if shape is None:
            shape = self._infer_shape(kind, payload, ids, in_shapes)
        node = Node(len(self.nodes), kind, payload, ids, shape)
        self.nodes.append(node)
        return NodeHandle(self, node.id)

    def _infer_shape(self, kind, payload, ids, shapes):
        def need(n):
            if len(ids) != n:
                raise BuildError(f"{kind} takes {n} input(s), got {len(ids)} (nodes {ids})")

        if kind == "matmul":
            need(2)
            a, b = shapes
            if not (isinstance(a, Shape) and isinstance(b, Shape)):
                raise BuildError(f"matmul needs tensor operands, got {a} and {b}")
            if a.rows is None or b.rows is None:
                raise BuildError("matmul operands must have static row counts")
            if a.cols != b.rows:
                raise BuildError(
                    f"matmul: incompatible shapes {a} and {b} (nodes {ids[0]}, {ids[1]})"
                )
            return Shape(a.rows, b.cols)
        if kind == "unary":
            need(1)
            return shapes[0]
        if kind == "binary":
            need(2)
            a, b = shapes
            if payload in _SAME_SHAPE_BINARY:
                if a != b:
                    raise BuildError(
                        f"binary[{payload}]: mismatched shapes {a} and {b} "
                        f"(nodes {ids[0]}, {ids[1]})"
                    )
                return a
            if payload == "scale":
                if b != Shape(1, 1):
                    raise BuildError(f"scale factor must be 1x1, got {b} (node {ids[1]})")
                return a
            if payload == "softmax_xent_bwd":  # logits, 1x1 label index
                if b != Shape(1, 1):
                    raise BuildError(f"label index must be 1x1, got {b} (node {ids[1]})")
                return a
            if payload == "matmul_nt":  # a @ b.T
                if a.cols != b.cols:
                    raise BuildError(f"matmul_nt: {a} vs {b}")
                return Shape(a.rows, b.rows)
            if payload == "matmul_tn":  # a.T @ b
                if a.rows != b.rows:
                    raise BuildError(f"matmul_tn: {a} vs {b}")
                return Shape(a.cols, b.cols)
            raise BuildError(f"unknown binary function {payload!r}")
        if kind == "transpose":
            need(1)
            a = shapes[0]
            return Shape(a.cols, a.rows)
        if kind == "slice_rows":
            need(1)
            start, stop = payload
            a = shapes[0]
            if a.rows is not None and not (0 <= start < stop <= a.rows):
                raise BuildError(f"slice_rows [{start}:{stop}] out of range for {a}")
            return Shape(stop - start, a.cols)
        if kind == "concat_rows":
            need(2)
            a, b = shapes
            if a.cols != b.cols:
                raise BuildError(f"concat_rows: column mismatch {a} vs {b}")
            rows = None if a.rows is None or b.rows is None else a.rows + b.rows
            return Shape(rows, a.cols)
        if kind == "gather_row":
            need(2)
            a, idx = shapes
            if idx != Shape(1, 1):
                raise BuildError(f"gather_row index must be 1x1, got {idx}")
            return Shape(1, a.cols)
        if kind == "softmax_xent":
            need(2)
            a, lab = shapes
            if a.rows != 1:
                raise BuildError(f"softmax_xent logits must be 1xC, got {a}")
            if lab != Shape(1, 1):
                raise BuildError(f"softmax_xent label must be 1x1, got {lab}")
            return Shape(1, 1)
        if kind == "scatter_row":
            need(2)
            return payload  # the table's Shape
        if kind == "grad_accum":
            if not ids:
                raise BuildError("grad_accum needs at least one input")
            first = shapes[0]
            for s in shapes[1:]:
                if s != first:
                    raise BuildError(f"grad_accum operands disagree: {first} vs {s}")
            return first
        if kind == "table_get":
            need(2)
            t = shapes[0]
            if not isinstance(t, TableShape):
                raise BuildError(f"table_get needs a row table, got {t}")
            return Shape(t.cols, 1)
        if kind == "table_set":
            need(3)
            t, idx, v = shapes
            if not isinstance(t, TableShape):
                raise BuildError(f"table_set needs a row table, got {t}")
            if v != Shape(t.cols, 1):
                raise BuildError(f"table_set row must be {t.cols}x1, got {v}")
            return t
        if kind == "table_adj_scatter":
            need(2)
            col, idx = shapes
            if col != Shape(payload.cols, 1):
                raise BuildError(
                    f"table_adj_scatter column must be {payload.cols}x1, got {col}"
                )
            return payload  # the table's TableShape
        if kind == "table_zero_slot":
            need(2)
            t, idx = shapes
            if not isinstance(t, TableShape):
                raise BuildError(f"table_zero_slot needs a row table, got {t}")
            return t
        if kind == "key_extend":
            need(1)
            if shapes[0] != KEY:
                raise BuildError("key_extend input must be a key")
            return KEY
        if kind == "after":
            # Pass-through of input 0 that additionally waits for input 1;
            # sequences a backward call after its forward call has returned.
            need(2)
            return shapes[0]
        if kind == "cache_read":
            need(1)
            if shapes[0] != KEY:
                raise BuildError("cache_read input must be a key")
            return payload[1]
        if kind == "cache_write":
            need(1)
            return None
        if kind == "grad_out":
            need(1)
            return shapes[0]
        if kind == "select":
            need(1)
            src = shapes[0]
            if not isinstance(src, TupleShape):
                raise BuildError(f"select needs a tuple-valued input, got {src}")
            return src.parts[payload]
        raise BuildError(f"cannot infer shape for kind {kind!r}")

    # -- leaf constructors ----------------------------------------------

    def placeholder(self, shape, name: str) -> NodeHandle:
        if self.parent is not None:
            raise BuildError("placeholders live in the top-level graph only")
        return self.add_node("placeholder", (), payload=name, shape=_as_shape(shape))

    def parameter(self, name: str, shape) -> NodeHandle:
        if self.parent is not None:
            raise BuildError("parameters live in the top-level graph and reach bodies by capture")
        return self.add_node("parameter", (), payload=name, shape=_as_shape(shape))

    def constant(self, value: Tensor | RowTable | tuple) -> NodeHandle:
        if isinstance(value, Tensor):
            shape = value.shape
        elif isinstance(value, RowTable):
            shape = TableShape(len(value), value.cols)
        elif isinstance(value, tuple):
            shape = KEY
        else:
            raise BuildError(f"constant of unsupported type {type(value).__name__}")
        return self.add_node("const", (), payload=value, shape=shape)

    def none_grad(self, shape) -> NodeHandle:
        """A statically absent gradient (runtime value None) of a known shape."""
        return self.add_node("none_const", (), payload=None, shape=_as_shape(shape))

    # -- op sugar ---------------------------------------------------------

    def matmul(self, a, b):
        return self.add_node("matmul", (a, b))

    def unary(self, x, f: str):
        return self.add_node("unary", (x,), payload=f)

    def tanh(self, x):
        return self.unary(x, "tanh")

    def sigmoid(self, x):
        return self.unary(x, "sigmoid")

    def neg(self, x):
        return self.unary(x, "neg")

    def square(self, x):
        return self.unary(x, "square")

    def binary(self, a, b, f: str):
        return self.add_node("binary", (a, b), payload=f)

    def add(self, a, b):
        return self.binary(a, b, "add")

    def sub(self, a, b):
        return self.binary(a, b, "sub")

    def hadamard(self, a, b):
        return self.binary(a, b, "hadamard")

    def concat_rows(self, a, b):
        return self.add_node("concat_rows", (a, b))

    def gather_row(self, table, index):
        return self.add_node("gather_row", (table, index))

    def softmax_xent(self, logits, label):
        return self.add_node("softmax_xent", (logits, label))

    def transpose(self, x):
        return self.add_node("transpose", (x,))

    def slice_rows(self, x, start: int, stop: int):
        return self.add_node("slice_rows", (x,), payload=(start, stop))

    def table_get(self, table, index):
        return self.add_node("table_get", (table, index))

    def table_set(self, table, index, value):
        return self.add_node("table_set", (table, index, value))

    # -- subgraphs --------------------------------------------------------

    def declare_subgraph(self, name: str, in_shapes, out_shapes) -> SubGraphRef:
        self._check_mutable()
        if name in self.registry:
            raise BuildError(f"subgraph {name!r} already declared")
        self.registry[name] = SubGraphDef(name, in_shapes, out_shapes)
        self.declared_order.append(name)
        return SubGraphRef(name)

    def body(self, ref: SubGraphRef) -> "Graph":
        """Fresh body graph for `ref`, with its signature inputs pre-added."""
        d = self.registry[ref.name]
        b = Graph(parent=self, label=ref.name)
        for slot, s in enumerate(d.in_shapes):
            h = b.add_node("input", (), payload=slot, shape=s)
            b.arg_ids.append(h.id)
        return b

    @property
    def args(self) -> tuple[NodeHandle, ...]:
        return tuple(NodeHandle(self, i) for i in self.arg_ids)

    def set_outputs(self, handles: Iterable[NodeHandle]):
        self._check_mutable()
        self.outputs = [self._local_id(h) for h in handles]

    def define_subgraph(self, ref: SubGraphRef, body: "Graph"):
        self._check_mutable()
        d = self.registry[ref.name]
        if d.defined:
            raise BuildError(f"subgraph {ref.name!r} is already defined")
        if body.registry is not self.registry:
            raise BuildError("body was not created from this graph family")
        if len(body.outputs) != len(d.out_shapes):
            raise BuildError(
                f"subgraph {ref.name!r} declares {len(d.out_shapes)} output(s), "
                f"body sets {len(body.outputs)}"
            )
        for i, (oid, want) in enumerate(zip(body.outputs, d.out_shapes)):
            got = body.nodes[oid].shape
            if not _shape_compatible(got, want):
                raise BuildError(
                    f"subgraph {ref.name!r} output {i}: declared {want}, body yields {got}"
                )
        d.body = body
        d.is_grad = body.is_grad

    def invoke(self, ref: SubGraphRef, args: Sequence[NodeHandle]) -> list[NodeHandle]:
        self._check_mutable()
        d = self.registry[ref.name]
        self._check_args(ref.name, d, args)
        shape = d.out_shapes[0] if len(d.out_shapes) == 1 else TupleShape(tuple(d.out_shapes))
        node = self.add_node("invoke", tuple(args), payload=ref.name, shape=shape)
        return self._split_outputs(node, d)

    def cond(
        self,
        predicate: NodeHandle,
        then_ref: SubGraphRef,
        else_ref: SubGraphRef,
        args: Sequence[NodeHandle],
    ) -> list[NodeHandle]:
        self._check_mutable()
        t, e = self.registry[then_ref.name], self.registry[else_ref.name]
        if t.in_shapes != e.in_shapes or t.out_shapes != e.out_shapes:
            raise BuildError(
                f"cond branches {then_ref.name!r} and {else_ref.name!r} have different signatures"
            )
        if self.shape_of(predicate) != Shape(1, 1):
            raise BuildError(f"cond predicate must be 1x1, got {self.shape_of(predicate)}")
        self._check_args("cond", t, args)
        shape = t.out_shapes[0] if len(t.out_shapes) == 1 else TupleShape(tuple(t.out_shapes))
        node = self.add_node(
            "cond",
            (predicate, *args),
            payload=(then_ref.name, else_ref.name),
            shape=shape,
        )
        return self._split_outputs(node, t)

    def _check_args(self, what: str, d: SubGraphDef, args):
        if len(args) != len(d.in_shapes):
            raise BuildError(
                f"{what}: expected {len(d.in_shapes)} argument(s), got {len(args)}"
            )
        for i, (h, want) in enumerate(zip(args, d.in_shapes)):
            got = self.shape_of(h)
            if not _shape_compatible(got, want):
                raise BuildError(f"{what}: argument {i} has shape {got}, signature wants {want}")

    def _split_outputs(self, node: NodeHandle, d: SubGraphDef) -> list[NodeHandle]:
        if len(d.out_shapes) == 1:
            return [node]
        return [self.add_node("select", (node,), payload=k) for k in range(len(d.out_shapes))]

    # -- finalize ---------------------------------------------------------

    def finalize(self) -> "FinalizedGraph":
        if self.parent is not None:
            raise BuildError("finalize the top-level graph, not a body")
        if self.finalized:
            raise BuildError("finalize called twice")
        undefined = [n for n in self.declared_order if not self.registry[n].defined]
        if undefined:
            raise BuildError(f"undefined body for subgraph(s): {', '.join(undefined)}")
        self._close_captures()
        self._wire_captures()
        for name in self.declared_order:
            body = self.registry[name].body
            _check_dag(body)
            if len(body.arg_ids) + len(body.capture_order) != sum(
                1 for n in body.nodes if n.kind in ("input", "capture")
            ):
                raise BuildError(f"subgraph {name!r} input arity bookkeeping is inconsistent")
        _check_dag(self)
        self.finalized = True
        return FinalizedGraph(self)

    def _close_captures(self):
        """Propagate callee captures up through caller bodies to a fixpoint."""
        changed = True
        while changed:
            changed = False
            graphs = [self] + [self.registry[n].body for n in self.declared_order]
            for g in graphs:
                for node in list(g.nodes):
                    for tname in _target_names(node):
                        tdef = self.registry[tname]
                        for outer in list(tdef.captures):
                            if outer.graph is g:
                                continue
                            before = len(g.capture_order)
                            if g.parent is None:
                                anc = None
                            else:
                                anc = g.parent
                                while anc is not None and anc is not outer.graph:
                                    anc = anc.parent
                            if g.parent is None or anc is None:
                                raise BuildError(
                                    f"capture of node {outer.id} in {outer.graph.label!r} "
                                    f"cannot be satisfied from {g.label!r}"
                                )
                            g._capture(outer)
                            if len(g.capture_order) != before:
                                changed = True

    def _wire_captures(self):
        """Append capture operands to every invoke/cond in canonical order."""
        record = bool(getattr(self, "record_branches", False))
        graphs = [self] + [self.registry[n].body for n in self.declared_order]
        for g in graphs:
            for node in g.nodes:
                names = _target_names(node)
                if not names:
                    continue
                extra: list[int] = []
                counts = []
                for tname in names:
                    tdef = self.registry[tname]
                    ids = []
                    for outer in tdef.captures:
                        if outer.graph is g:
                            ids.append(outer.id)
                        else:
                            ids.append(g.capture_map[(id(outer.graph), outer.id)])
                    counts.append(len(ids))
                    extra.extend(ids)
                node.inputs = node.inputs + extra
                if node.kind == "invoke":
                    node.payload = (node.payload, counts[0])
                elif node.kind == "cond":
                    node.payload = (*node.payload, counts[0], counts[1], record)
                elif node.kind == "cond_grad":
                    node.payload = node.payload._replace(cap_counts=tuple(counts))

    # -- debug dump -------------------------------------------------------

    def dump(self) -> str:
        root = self.root()
        lines: list[str] = []
        self._dump_body(self, lines, indent="")
        for name in root.declared_order:
            d = root.registry[name]
            sig_in = ", ".join(str(s) for s in d.in_shapes)
            sig_out = ", ".join(str(s) for s in d.out_shapes)
            ncap = len(d.captures)
            lines.append(f"subgraph {name}: in [{sig_in}] out [{sig_out}] captures {ncap}")
            if d.body is not None:
                self._dump_body(d.body, lines, indent="  ")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _dump_body(g: "Graph", lines: list[str], indent: str):
        for n in g.nodes:
            args = ", ".join(str(i) for i in n.inputs)
            lines.append(f"{indent}{n.id}: {_kind_str(n)}({args}) -> {_shape_str(n.shape)}")
        if g.outputs:
            lines.append(f"{indent}outputs: {', '.join(str(i) for i in g.outputs)}")


def _shape_compatible(got, want) -> bool:
    if isinstance(got, Shape) and isinstance(want, Shape):
        rows_ok = got.rows is None or want.rows is None or got.rows == want.rows
        return rows_ok and got.cols == want.cols
    return got == want


def _shape_str(s) -> str:
    if s is None:
        return "-"
    return str(s)


def _kind_str(n: Node) -> str:
    k, p = n.kind, n.payload
    if k in ("placeholder", "parameter"):
        return f"{k}[{p}]"
    if k == "const":
        return f"const[{_shape_str(n.shape)}]"
    if k == "none_const":
        return "none"
    if k == "input":
        return f"input[{p}]"
    if k == "capture":
        return f"capture[{p.graph.label}:{p.id}]"
    if k in ("unary", "binary"):
        return f"{k}[{p}]"
    if k == "slice_rows":
        return f"slice_rows[{p[0]}:{p[1]}]"
    if k == "select":
        return f"select[{p}]"
    if k == "invoke":
        name = p[0] if isinstance(p, tuple) else p
        return f"invoke[{name}]"
    if k == "cond":
        return f"cond[{p[0]},{p[1]}]"
    if k == "cond_grad":
        return f"cond_grad[{p.then_name},{p.else_name}]"
    if k == "cache_write":
        return f"cache_write[{p}]"
    if k == "cache_read":
        return f"cache_read[{p[0]}]"
    if k == "key_extend":
        return f"key_extend[{p}]"
    if k == "scatter_row":
        return f"scatter_row[{_shape_str(p)}]"
    return k


def _target_names(node: Node) -> tuple[str, ...]:
    if node.kind == "invoke":
        p = node.payload
        return (p[0] if isinstance(p, tuple) else p,)
    if node.kind == "cond":
        return (node.payload[0], node.payload[1])
    if node.kind == "cond_grad":
        return (node.payload.then_name, node.payload.else_name)
    return ()


def _check_dag(g: Graph):
    n = len(g.nodes)
    indeg = [0] * n
    deps: list[list[int]] = [[] for _ in range(n)]
    for node in g.nodes:
        for i in node.inputs:
            deps[i].append(node.id)
            indeg[node.id] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while ready:
        i = ready.pop()
        seen += 1
        for j in deps[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    if seen != n:
        cyclic = [i for i in range(n) if indeg[i] > 0]
        raise BuildError(f"node-level cycle through nodes {cyclic} in {g.label!r}")


class CondGradPayload(NamedTuple):
    cond_site: int
    then_name: str
    else_name: str
    n_args: int
    n_union: int  # number of union-layout output slots
    cap_counts: tuple  # (len(then captures), len(else captures)) after wiring
    then_slots: tuple  # union-layout position of each then-branch output
    else_slots: tuple


class FinalizedGraph:
    """Immutable, compiled form: per-body arrays the scheduler consumes."""

    def __init__(self, g: Graph):
        self.graph = g
        self.from_differentiate = getattr(g, "from_differentiate", False)
        self.bodies: dict[str, CompiledBody] = {}
        self.top = CompiledBody(g, is_top=True)
        for name in g.declared_order:
            d = g.registry[name]
            self.bodies[name] = CompiledBody(d.body, is_top=False)
        self.param_names = [n.payload for n in g.nodes if n.kind == "parameter"]

    def dump(self) -> str:
        return self.graph.dump()


class CompiledBody:
    __slots__ = (
        "label",
        "kinds",
        "payloads",
        "inputs",
        "dependents",
        "pending0",
        "initial_ready",
        "preset",
        "arg_slots",
        "placeholders",
        "parameters",
        "outputs",
        "outputs_unique",
        "completion_total",
        "completion_mask",
        "kernels",
        "none_prop",
        "n_nodes",
    )

    def __init__(self, g: Graph, is_top: bool):
        from . import kernels  # local import to avoid a cycle

        n = len(g.nodes)
        self.label = g.label
        self.n_nodes = n
        self.kinds = [nd.kind for nd in g.nodes]
        self.payloads = [nd.payload for nd in g.nodes]
        self.inputs = [tuple(nd.inputs) for nd in g.nodes]
        deps: list[list[int]] = [[] for _ in range(n)]
        for nd in g.nodes:
            for i in nd.inputs:
                deps[i].append(nd.id)
        self.dependents = [tuple(d) for d in deps]
        self.arg_slots = list(g.arg_ids) + [
            g.capture_map[(id(h.graph), h.id)] for h in g.capture_order
        ]
        preset_kinds = {"const", "none_const"}
        initial = set(self.arg_slots)
        self.preset = []
        self.placeholders = []
        self.parameters = []
        for nd in g.nodes:
            if nd.kind in preset_kinds:
                value = nd.payload if nd.kind == "const" else None
                self.preset.append((nd.id, value))
                initial.add(nd.id)
            elif nd.kind == "placeholder":
                self.placeholders.append((nd.id, nd.payload, nd.shape))
                initial.add(nd.id)
            elif nd.kind == "parameter":
                self.parameters.append((nd.id, nd.payload, nd.shape))
                initial.add(nd.id)
        pending = []
        for nd in g.nodes:
            pending.append(sum(1 for i in nd.inputs if i not in initial))
        for i in initial:
            pending[i] = -1  # never scheduled; value arrives at frame init
        self.pending0 = pending
        self.initial_ready = [
            nd.id for nd in g.nodes if pending[nd.id] == 0 and nd.id not in initial
        ]
        self.outputs = list(g.outputs)
        self.outputs_unique = tuple(dict.fromkeys(g.outputs))
        sinks = [
            nd.id
            for nd in g.nodes
            if not deps[nd.id] and nd.id not in g.outputs and nd.id not in initial
        ]
        self.completion_total = (
            len(self.outputs_unique) + len(sinks) if not is_top else 0
        )
        mask = [False] * n
        if not is_top:
            for i in self.outputs_unique:
                mask[i] = True
            for i in sinks:
                mask[i] = True
        self.completion_mask = mask
        self.kernels = kernels.compile_body(g)
        self.none_prop = [nd.grad_flag or g.is_grad for nd in g.nodes]
