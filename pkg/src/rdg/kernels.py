"""Per-node compute closures, compiled once at finalize.

Each kernel maps the frame's value list to the node's value. Control kinds
(invoke, cond, cond_grad, cache reads/writes) have no kernel here; the
scheduler interprets those. Nodes created by gradient synthesis are compiled
in a None-propagating variant: a None operand means "no gradient flows", and
the node's result is then None as well. Forward nodes stay strict, so a
missing value in a forward body fails loudly instead of leaking None.
"""

from __future__ import annotations

import time

import numpy as np

from .tensor import Tensor, index_value, softmax_cross_entropy
from . import graph as _g

CONTROL_KINDS = frozenset({"invoke", "cond", "cond_grad", "cache_read", "cache_write"})
INIT_KINDS = frozenset(
    {"const", "none_const", "input", "capture", "placeholder", "parameter"}
)

_W = Tensor._wrap


def _unary_fn(tag):
    if tag == "tanh":
        return np.tanh
    if tag == "sigmoid":
        return lambda x: 0.5 * (1.0 + np.tanh(0.5 * x))
    if tag == "neg":
        return np.negative
    if tag == "square":
        return np.square
    if isinstance(tag, tuple) and tag and tag[0] == "sleep":
        # identity with a fixed stall; used by scheduling tests and benches
        # to make op overlap observable on a wall clock.
        sec = tag[1]

        def slow_id(x, sec=sec):
            time.sleep(sec)
            return x

        return slow_id
    raise _g.BuildError(f"unknown unary function {tag!r}")


def _binary_fn(tag):
    if tag == "add":
        return lambda x, y: x + y
    if tag == "sub":
        return lambda x, y: x - y
    if tag == "hadamard":
        return lambda x, y: x * y
    if tag == "tanh_bwd":  # upstream, tanh output
        return lambda u, y: u * (1.0 - np.square(y))
    if tag == "sigmoid_bwd":  # upstream, sigmoid output
        return lambda u, y: u * y * (1.0 - y)
    if tag == "square_bwd":  # upstream, squared input
        return lambda u, x: 2.0 * u * x
    if tag == "scale":  # tensor, 1x1 factor
        return lambda x, s: x * s[0, 0]
    if tag == "matmul_nt":
        return lambda a, b: a @ b.T
    if tag == "matmul_tn":
        return lambda a, b: a.T @ b
    if tag == "softmax_xent_bwd":
        return None  # handled specially: needs the label as an index
    raise _g.BuildError(f"unknown binary function {tag!r}")


def _build_strict(node):
    k = node.kind
    ins = tuple(node.inputs)
    if k == "matmul":
        a, b = ins
        return lambda v: _W(v[a].a @ v[b].a)
    if k == "unary":
        (a,) = ins
        f = _unary_fn(node.payload)
        return lambda v: _W(f(v[a].a))
    if k == "binary":
        a, b = ins
        if node.payload == "softmax_xent_bwd":

            def xent_bwd(v):
                logits = v[a].a
                label = int(index_value(v[b]))
                z = logits - logits.max()
                ez = np.exp(z)
                p = ez / ez.sum()
                p[0, label] -= 1.0
                return _W(p)

            return xent_bwd
        f = _binary_fn(node.payload)
        return lambda v: _W(f(v[a].a, v[b].a))
    if k == "transpose":
        (a,) = ins
        return lambda v: _W(v[a].a.T)
    if k == "slice_rows":
        (a,) = ins
        start, stop = node.payload
        return lambda v: _W(v[a].a[start:stop])
    if k == "concat_rows":
        a, b = ins
        return lambda v: _W(np.concatenate((v[a].a, v[b].a)))
    if k == "gather_row":
        a, b = ins

        def gather(v):
            i = int(index_value(v[b]))
            t = v[a]
            if not (0 <= i < t.rows):
                raise IndexError(f"row {i} out of range for {t.rows}x{t.cols} table")
            return _W(t.a[i : i + 1])

        return gather
    if k == "softmax_xent":
        a, b = ins

        def xent(v):
            loss, _ = softmax_cross_entropy(v[a], int(index_value(v[b])))
            return Tensor.scalar(loss)

        return xent
    if k == "scatter_row":
        a, b = ins
        shape = node.payload

        def scatter(v):
            i = int(index_value(v[b]))
            return _g.RowGrads(shape.rows, shape.cols, ((i, v[a].a),))

        return scatter
    if k == "grad_accum":
        return _build_grad_accum(ins)
    if k == "table_get":
        a, b = ins

        def tget(v):
            i = int(index_value(v[b]))
            t = v[a]
            if not (0 <= i < len(t.slots)):
                raise IndexError(f"slot {i} out of range for table of {len(t.slots)}")
            return _W(t.slots[i])

        return tget
    if k == "table_set":
        a, b, c = ins

        def tset(v):
            t = v[a]
            i = int(index_value(v[b]))
            if not (0 <= i < len(t.slots)):
                raise IndexError(f"slot {i} out of range for table of {len(t.slots)}")
            return t.set(i, v[c].a)

        return tset
    if k == "table_adj_scatter":
        a, b = ins
        shape = node.payload
        base = _g.RowTable.zeros(shape.rows, shape.cols)

        def tscatter(v):
            i = int(index_value(v[b]))
            return base.set(i, v[a].a)

        return tscatter
    if k == "table_zero_slot":
        a, b = ins
        zcol = None

        def tzero(v):
            nonlocal zcol
            t = v[a]
            if zcol is None or zcol.shape[0] != t.cols:
                z = np.zeros((t.cols, 1))
                z.flags.writeable = False
                zcol = z
            return t.set(int(index_value(v[b])), zcol)

        return tzero
    if k == "key_extend":
        (a,) = ins
        site = node.payload
        return lambda v: v[a] + (site,)
    if k == "after":
        a = ins[0]
        return lambda v: v[a]
    if k == "select":
        (a,) = ins
        idx = node.payload
        return lambda v: v[a][idx]
    if k == "grad_out":
        (a,) = ins
        shape = node.shape

        def gout(v):
            x = v[a]
            if x is None:
                return Tensor.zeros(shape.rows, shape.cols)
            return x

        return gout
    raise _g.BuildError(f"no kernel for kind {node.kind!r}")


def _build_grad_accum(ins):
    def accum(v):
        parts = [v[i] for i in ins if v[i] is not None]
        if not parts:
            return None
        first = parts[0]
        if isinstance(first, _g.RowGrads):
            out = first
            for p in parts[1:]:
                if not isinstance(p, _g.RowGrads):
                    raise TypeError("mixed dense and row-sparse gradients in one sum")
                out = out.merge(p)
            return out
        if isinstance(first, _g.RowTable):
            if len(parts) == 1:
                return first
            slots = [s.copy() for s in first.slots]
            for p in parts[1:]:
                if not isinstance(p, _g.RowTable):
                    raise TypeError("mixed table and tensor gradients in one sum")
                for i, s in enumerate(p.slots):
                    slots[i] += s
            for s in slots:
                s.flags.writeable = False
            return _g.RowTable(tuple(slots), first.cols)
        acc = parts[0].a
        for p in parts[1:]:
            if isinstance(p, (_g.RowGrads, _g.RowTable)):
                raise TypeError("mixed dense and row-sparse gradients in one sum")
            acc = acc + p.a
        return _W(acc) if len(parts) > 1 else parts[0]

    return accum


_CUSTOM_NONE = frozenset({"grad_accum", "grad_out", "select"})


def _none_prop(fn, ins):
    def wrapped(v):
        for i in ins:
            if v[i] is None:
                return None
        return fn(v)

    return wrapped


def compile_body(g) -> list:
    fns: list = [None] * len(g.nodes)
    for node in g.nodes:
        if node.kind in CONTROL_KINDS or node.kind in INIT_KINDS:
            continue
        fn = _build_strict(node)
        if (g.is_grad or node.grad_flag) and node.kind not in _CUSTOM_NONE:
            fn = _none_prop(fn, tuple(node.inputs))
        fns[node.id] = fn
    return fns
