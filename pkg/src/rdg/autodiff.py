"""Reverse-mode differentiation with first-class recursion.

`differentiate` clones the finalized forward graph, then sweeps it backwards
emitting vector-Jacobian products. Each SubGraph F gets a synthesized
gradient SubGraph; its inputs are F's upstream output-gradients plus F's
invocation key, and its outputs are gradients for F's inputs followed by
gradients for F's captures. A recursive Invoke in F is mirrored by a
recursive Invoke of F's gradient at the same position, fed with the child's
key (parent key extended by the call-site id). Forward values a gradient
needs are wired directly when they live in the same frame, and through the
per-run value cache otherwise: the forward clone gains CacheWrite nodes for
exactly the values some gradient reads, and every gradient body reads them
back keyed by the invocation key it was handed.

Cond gradients route through the recorded taken branch only; the untaken
branch's parameters receive no contribution, which materializes as exact
zeros at the top level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import (
    BuildError,
    CondGradPayload,
    FinalizedGraph,
    Graph,
    KEY,
    NodeHandle,
    Shape,
    SubGraphRef,
    TupleShape,
    _target_names,
)
from .tensor import Tensor


@dataclass
class GradientMap:
    """Where to find gradients in the extended graph."""

    loss: NodeHandle
    node_grad: dict = field(default_factory=dict)  # forward node id -> grad node id
    subgraph_grad: dict = field(default_factory=dict)  # forward name -> gradient name
    param_grads: dict = field(default_factory=dict)  # wrt name -> grad NodeHandle
    param_order: list = field(default_factory=list)


def _clone(fg: FinalizedGraph) -> tuple[Graph, dict]:
    """Structural copy of the finalized builder graph, in pre-wiring form.

    Node ids are preserved. Invoke/Cond operands appended by capture wiring
    are stripped (finalize re-derives them), so the clone can be extended and
    finalized again.
    """
    src_top = fg.graph
    gmap: dict[int, Graph] = {}
    top = Graph(label="top")
    gmap[id(src_top)] = top
    _clone_nodes(src_top, top, gmap)

    for name in src_top.declared_order:
        d = src_top.registry[name]
        top.registry[name] = type(d)(name, d.in_shapes, d.out_shapes)
        top.declared_order.append(name)

    def depth(g: Graph) -> int:
        n = 0
        while g.parent is not None:
            g = g.parent
            n += 1
        return n

    for name in sorted(src_top.declared_order, key=lambda n: depth(src_top.registry[n].body)):
        d = src_top.registry[name]
        parent_clone = gmap[id(d.body.parent)]
        body = Graph(parent=parent_clone, label=name)
        body.is_grad = d.body.is_grad
        gmap[id(d.body)] = body
        _clone_nodes(d.body, body, gmap)
        body.outputs = list(d.body.outputs)
        top.registry[name].body = body
        top.registry[name].is_grad = body.is_grad
    return top, gmap


def _clone_nodes(src: Graph, dst: Graph, gmap: dict):
    for n in src.nodes:
        kind, payload, inputs = n.kind, n.payload, list(n.inputs)
        if kind == "invoke" and isinstance(payload, tuple):
            name, ncaps = payload
            payload = name
            if ncaps:
                inputs = inputs[: len(inputs) - ncaps]
        elif kind == "cond" and len(payload) == 5:
            tname, ename, ct, ce, _rec = payload
            payload = (tname, ename)
            if ct + ce:
                inputs = inputs[: len(inputs) - ct - ce]
        if kind == "capture":
            outer: NodeHandle = payload
            outer_clone = NodeHandle(gmap[id(outer.graph)], outer.id)
            node = dst.add_node("capture", (), payload=outer_clone, shape=n.shape)
            dst.capture_map[(id(outer_clone.graph), outer_clone.id)] = node.id
            dst.capture_order.append(outer_clone)
            continue
        handles = [NodeHandle(dst, i) for i in inputs]
        h = dst.add_node(kind, handles, payload=payload, shape=n.shape)
        assert h.id == n.id
        if kind == "input":
            dst.arg_ids.append(h.id)


class _Context:
    """One graph being swept backwards: the top level or one SubGraph body."""

    def __init__(self, synth: "_Synth", fwd: Graph, out: Graph, key_node):
        self.synth = synth
        self.fwd = fwd  # graph whose nodes we differentiate
        self.out = out  # graph receiving emitted gradient nodes
        self._key = key_node  # handle of the invocation-key value, or None (top)
        self.adjoint: dict[int, list[NodeHandle]] = {}
        self.bucket: dict[int, dict[int, NodeHandle]] = {}  # invoke id -> slot -> grad
        self.cap_out: dict[int, list[NodeHandle]] = {}
        self._reads: dict[int, NodeHandle] = {}

    # -- context plumbing ------------------------------------------------

    def emit(self, kind, inputs=(), payload=None, shape=None) -> NodeHandle:
        before = len(self.out.nodes)
        h = self.out.add_node(kind, inputs, payload=payload, shape=shape)
        for node in self.out.nodes[before:]:
            node.grad_flag = True
        return h

    def flag_from(self, start: int):
        for node in self.out.nodes[start:]:
            node.grad_flag = True

    def key_node(self) -> NodeHandle:
        if self._key is None:
            self._key = self.out.constant(())
        return self._key

    def val(self, nid: int) -> NodeHandle:
        """Handle for the forward value of node `nid` of self.fwd."""
        node = self.fwd.nodes[nid]
        if self.fwd is self.out:
            return NodeHandle(self.fwd, nid)
        if node.kind == "capture" and node.payload.graph.parent is None:
            # Top-level values are the same in every frame; re-capturing the
            # outer node is cheaper than a cache round-trip. Captures of an
            # intermediate frame's nodes go through the cache like any other
            # frame-local value (the proxy holds the value in this frame).
            return node.payload
        if node.kind == "const":
            return self.emit("const", (), payload=node.payload, shape=node.shape)
        h = self._reads.get(nid)
        if h is None:
            h = self.emit(
                "cache_read", (self.key_node(),), payload=(nid, node.shape)
            )
            self._reads[nid] = h
            self.synth.needed.setdefault(self.fwd.label, set()).add(nid)
        return h

    def add_adjoint(self, nid: int, h: NodeHandle):
        self.adjoint.setdefault(nid, []).append(h)

    def want(self, nid: int) -> bool:
        """False for nodes whose adjoint could never be used: skips emitting it."""
        return self.fwd.nodes[nid].kind not in ("const", "none_const")

    def route_capture(self, c: NodeHandle, h: NodeHandle):
        if c.graph is self.fwd:
            self.add_adjoint(c.id, h)
            return
        if self.fwd is self.out:
            raise BuildError(
                f"capture of node {c.id} in {c.graph.label!r} cannot receive a "
                "gradient from the top level"
            )
        for j, outer in enumerate(self.fwd.capture_order):
            if outer == c:
                self.cap_out.setdefault(j, []).append(h)
                return
        raise BuildError(
            f"capture closure is missing {c.graph.label}:{c.id} in {self.fwd.label!r}"
        )

    def combined(self, nid: int):
        parts = self.adjoint.get(nid)
        if not parts:
            return None
        if len(parts) == 1:
            return parts[0]
        return self.emit("grad_accum", tuple(parts))

    def grad_or_none(self, h, shape) -> NodeHandle:
        if h is not None:
            return h
        return self.emit("none_const", (), shape=shape)


class _Synth:
    """Session state for one differentiate() call."""

    def __init__(self, top: Graph):
        self.top = top
        self.registry = top.registry
        self.gsub: dict[str, SubGraphRef] = {}
        self.needed: dict[str, set[int]] = {}

    def gradient_subgraph(self, name: str) -> SubGraphRef:
        ref = self.gsub.get(name)
        if ref is not None:
            return ref
        d = self.registry[name]
        if d.body is None:
            raise BuildError(f"cannot differentiate undefined subgraph {name!r}")
        gname = f"{name}__grad"
        while gname in self.registry:
            gname += "_"
        in_shapes = list(d.out_shapes) + [KEY]
        out_shapes = [d.body.nodes[i].shape for i in d.body.arg_ids]
        out_shapes += [c.graph.nodes[c.id].shape for c in d.body.capture_order]
        ref = self.top.declare_subgraph(gname, in_shapes, out_shapes)
        self.gsub[name] = ref  # registered before the body: recursion closes here

        body = self.top.body(ref)
        body.is_grad = True
        ctx = _Context(self, d.body, body, body.args[-1])
        for j, out_id in enumerate(d.body.outputs):
            ctx.add_adjoint(out_id, body.args[j])
        _sweep(ctx)

        outs = []
        for slot, arg_id in enumerate(d.body.arg_ids):
            h = ctx.combined(arg_id)
            outs.append(ctx.grad_or_none(h, d.body.nodes[arg_id].shape))
        for j, c in enumerate(d.body.capture_order):
            parts = list(ctx.cap_out.get(j, ()))
            proxy = d.body.capture_map[(id(c.graph), c.id)]
            direct = ctx.adjoint.get(proxy)
            if direct:
                parts.extend(direct)
            if not parts:
                h = None
            elif len(parts) == 1:
                h = parts[0]
            else:
                h = ctx.emit("grad_accum", tuple(parts))
            outs.append(ctx.grad_or_none(h, c.graph.nodes[c.id].shape))
        body.set_outputs(outs)
        self.top.define_subgraph(ref, body)
        return ref


def _sweep_order(ctx: _Context) -> list[int]:
    """Node ids of ctx.fwd, topologically ordered.

    Plain id order is almost topological, but a call site also depends on the
    nodes its target captures (finalize wires them in as operands), and a
    body defined after the call site can capture nodes with larger ids than
    the site. Gradients flow from a site to its captured nodes, so the sweep
    must respect those edges too.
    """
    fwd = ctx.fwd
    n = len(fwd.nodes)
    consumers: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for node in fwd.nodes:
        srcs = set(node.inputs)
        for tname in _target_names(node):
            body = ctx.synth.registry[tname].body
            if body is not None:
                for c in body.capture_order:
                    if c.graph is fwd:
                        srcs.add(c.id)
        for i in srcs:
            consumers[i].append(node.id)
            indeg[node.id] += 1
    stack = [i for i in range(n - 1, -1, -1) if indeg[i] == 0]
    order: list[int] = []
    while stack:
        i = stack.pop()
        order.append(i)
        for j in consumers[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    if len(order) != n:
        raise BuildError(f"cycle while ordering {fwd.label!r} for differentiation")
    return order


def _sweep(ctx: _Context):
    fwd = ctx.fwd
    for nid in reversed(_sweep_order(ctx)):
        node = fwd.nodes[nid]
        kind = node.kind
        if kind == "select":
            d = ctx.combined(nid)
            if d is not None:
                src = node.inputs[0]
                ctx.bucket.setdefault(src, {})[node.payload] = d
            continue
        if kind == "invoke":
            _vjp_invoke(ctx, node)
            continue
        if kind == "cond":
            _vjp_cond(ctx, node)
            continue
        d = ctx.combined(nid)
        if d is None:
            continue
        _vjp_node(ctx, node, d)


def _vjp_node(ctx: _Context, node, d: NodeHandle):
    kind = node.kind
    ins = node.inputs
    emit, val, want = ctx.emit, ctx.val, ctx.want

    def add(nid, thunk):
        if ctx.want(nid):
            ctx.add_adjoint(nid, thunk() if callable(thunk) else thunk)

    if kind in (
        "placeholder",
        "parameter",
        "const",
        "none_const",
        "input",
        "capture",
        "key_extend",
        "after",
    ):
        return
    if kind == "matmul":
        a, b = ins
        add(a, lambda: emit("binary", (d, val(b)), payload="matmul_nt"))
        add(b, lambda: emit("binary", (val(a), d), payload="matmul_tn"))
        return
    if kind == "unary":
        (a,) = ins
        tag = node.payload
        if tag == "tanh":
            add(a, lambda: emit("binary", (d, val(node.id)), payload="tanh_bwd"))
        elif tag == "sigmoid":
            add(a, lambda: emit("binary", (d, val(node.id)), payload="sigmoid_bwd"))
        elif tag == "neg":
            add(a, lambda: emit("unary", (d,), payload="neg"))
        elif tag == "square":
            add(a, lambda: emit("binary", (d, val(a)), payload="square_bwd"))
        elif isinstance(tag, tuple) and tag and tag[0] == "sleep":
            add(a, d)
        else:
            raise BuildError(f"no derivative rule for unary {tag!r}")
        return
    if kind == "binary":
        a, b = ins
        tag = node.payload
        if tag == "add":
            add(a, d)
            add(b, d)
        elif tag == "sub":
            add(a, d)
            add(b, lambda: emit("unary", (d,), payload="neg"))
        elif tag == "hadamard":
            add(a, lambda: emit("binary", (d, val(b)), payload="hadamard"))
            add(b, lambda: emit("binary", (d, val(a)), payload="hadamard"))
        else:
            raise BuildError(f"no derivative rule for binary {tag!r}")
        return
    if kind == "transpose":
        add(ins[0], lambda: emit("transpose", (d,)))
        return
    if kind == "concat_rows":
        a, b = ins
        ra = ctx.fwd.nodes[a].shape.rows
        rb = ctx.fwd.nodes[b].shape.rows
        if ra is None or rb is None:
            raise BuildError("cannot differentiate concat_rows with dynamic rows")
        add(a, lambda: emit("slice_rows", (d,), payload=(0, ra)))
        add(b, lambda: emit("slice_rows", (d,), payload=(ra, ra + rb)))
        return
    if kind == "gather_row":
        t, i = ins
        add(
            t,
            lambda: emit("scatter_row", (d, val(i)), payload=ctx.fwd.nodes[t].shape),
        )
        return
    if kind == "softmax_xent":
        logits, label = ins
        if want(logits):
            raw = emit(
                "binary", (val(logits), val(label)), payload="softmax_xent_bwd"
            )
            ctx.add_adjoint(logits, emit("binary", (raw, d), payload="scale"))
        return
    if kind == "table_get":
        t, i = ins
        add(
            t,
            lambda: emit(
                "table_adj_scatter",
                (d, val(i)),
                payload=ctx.fwd.nodes[t].shape,
            ),
        )
        return
    if kind == "table_set":
        t, i, v = ins
        add(t, lambda: emit("table_zero_slot", (d, val(i))))
        add(v, lambda: emit("table_get", (d, val(i))))
        return
    raise BuildError(f"no derivative rule for node kind {kind!r}")


def _douts_for(ctx: _Context, node, out_shapes) -> list[NodeHandle]:
    if len(out_shapes) == 1:
        return [ctx.grad_or_none(ctx.combined(node.id), out_shapes[0])]
    slot_grads = ctx.bucket.get(node.id, {})
    return [
        ctx.grad_or_none(slot_grads.get(k), s) for k, s in enumerate(out_shapes)
    ]


def _any_real(douts, ctx) -> bool:
    return any(ctx.out.nodes[h.id].kind != "none_const" for h in douts)


def _vjp_invoke(ctx: _Context, node):
    name = node.payload
    d = ctx.synth.registry[name]
    douts = _douts_for(ctx, node, d.out_shapes)
    if not _any_real(douts, ctx):
        return
    gref = ctx.synth.gradient_subgraph(name)
    key = ctx.emit("key_extend", (ctx.key_node(),), payload=node.id)
    if ctx.fwd is ctx.out:
        # Top-level backward call: nothing else orders it after the forward
        # call, so make its key wait for the forward value. A returned call
        # implies its whole frame tree completed, cached values included.
        key = ctx.emit("after", (key, NodeHandle(ctx.fwd, node.id)))
    before = len(ctx.out.nodes)
    gouts = ctx.out.invoke(gref, [*douts, key])
    ctx.flag_from(before)
    n_args = len(d.in_shapes)
    for i, arg in enumerate(node.inputs):
        ctx.add_adjoint(arg, gouts[i])
    caps = ctx.synth.registry[name].body.capture_order
    for j, c in enumerate(caps):
        ctx.route_capture(c, gouts[n_args + j])


def _vjp_cond(ctx: _Context, node):
    tname, ename = node.payload
    tdef = ctx.synth.registry[tname]
    edef = ctx.synth.registry[ename]
    douts = _douts_for(ctx, node, tdef.out_shapes)
    if not _any_real(douts, ctx):
        return
    g_then = ctx.synth.gradient_subgraph(tname)
    g_else = ctx.synth.gradient_subgraph(ename)
    caps_t = tdef.body.capture_order
    caps_e = edef.body.capture_order
    n_args = len(tdef.in_shapes)
    n_union = n_args + len(caps_t) + len(caps_e)
    then_slots = tuple(range(n_args + len(caps_t)))
    else_slots = tuple(range(n_args)) + tuple(
        range(n_args + len(caps_t), n_union)
    )
    arg_ids = node.inputs[1:]  # input 0 is the predicate: no gradient
    union_shapes = [tdef.body.nodes[i].shape for i in tdef.body.arg_ids]
    union_shapes += [c.graph.nodes[c.id].shape for c in caps_t]
    union_shapes += [c.graph.nodes[c.id].shape for c in caps_e]
    shape = union_shapes[0] if n_union == 1 else TupleShape(tuple(union_shapes))
    payload = CondGradPayload(
        cond_site=node.id,
        then_name=g_then.name,
        else_name=g_else.name,
        n_args=n_args,
        n_union=n_union,
        cap_counts=(0, 0),
        then_slots=then_slots,
        else_slots=else_slots,
    )
    key = ctx.key_node()
    if ctx.fwd is ctx.out:
        key = ctx.emit("after", (key, NodeHandle(ctx.fwd, node.id)))
    cg = ctx.emit(
        "cond_grad", (*douts, key), payload=payload, shape=shape
    )
    if n_union == 1:
        slots = [cg]
    else:
        slots = [ctx.emit("select", (cg,), payload=k) for k in range(n_union)]
    for i, arg in enumerate(arg_ids):
        ctx.add_adjoint(arg, slots[i])
    for j, c in enumerate(caps_t):
        ctx.route_capture(c, slots[n_args + j])
    for j, c in enumerate(caps_e):
        ctx.route_capture(c, slots[n_args + len(caps_t) + j])


def differentiate(
    fg: FinalizedGraph, loss: NodeHandle, wrt: list[NodeHandle]
) -> tuple[FinalizedGraph, GradientMap]:
    """Extend `fg` with gradient computation for d(loss)/d(each wrt node)."""
    if fg.from_differentiate:
        raise BuildError(
            "gradient of a gradient is not supported: differentiate the "
            "original forward graph instead"
        )
    if loss.graph is not fg.graph:
        raise BuildError("loss node does not belong to the given graph")
    if fg.graph.nodes[loss.id].shape != Shape(1, 1):
        raise BuildError(
            f"loss must be 1x1, got {fg.graph.nodes[loss.id].shape}"
        )
    for w in wrt:
        if w.graph is not fg.graph:
            raise BuildError("wrt nodes must belong to the top-level graph")
        if fg.graph.nodes[w.id].kind not in ("parameter", "placeholder"):
            raise BuildError(
                f"wrt node {w.id} is {fg.graph.nodes[w.id].kind!r}; gradients "
                "are taken for parameters and placeholders"
            )

    top, _gmap = _clone(fg)
    top.record_branches = True
    synth = _Synth(top)
    ctx = _Context(synth, top, top, None)
    seed = ctx.emit("const", (), payload=Tensor.scalar(1.0), shape=Shape(1, 1))
    ctx.add_adjoint(loss.id, seed)
    _sweep(ctx)

    gm = GradientMap(loss=NodeHandle(top, loss.id))
    for w in wrt:
        name = top.nodes[w.id].payload
        parts = ctx.adjoint.get(w.id)
        if parts:
            acc = ctx.emit("grad_accum", tuple(parts))
        else:
            acc = ctx.emit("none_const", (), shape=top.nodes[w.id].shape)
        gout = ctx.emit("grad_out", (acc,))
        gm.node_grad[w.id] = gout.id
        gm.param_grads[name] = gout
        gm.param_order.append(name)
    gm.subgraph_grad = {name: ref.name for name, ref in synth.gsub.items()}

    for name, ids in synth.needed.items():
        body = top.registry[name].body
        for x in sorted(ids):
            body.add_node("cache_write", (NodeHandle(body, x),), payload=x)

    top.from_differentiate = True
    out = top.finalize()
    return out, gm
