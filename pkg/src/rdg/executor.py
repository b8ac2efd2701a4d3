"""Parallel graph runtime: FIFO ready queue, worker pool, dynamic expansion.

Every run owns a queue, a worker pool, and a value cache. Nodes carry
unresolved-input counters per frame; a completed node decrements its
dependents and enqueues any that reach zero. Invoke and Cond never block a
worker: they create a child frame, enqueue its source nodes behind existing
work, and register the parent node as the child's return slot. Frames form a
tree through parent pointers, and each dynamic invocation is identified by an
invocation key — the path of call-site node ids from the top frame — which
also keys the write-once value cache that pairs forward activations with
their backward readers.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from queue import SimpleQueue

from .graph import FinalizedGraph, NodeHandle, Shape
from .tensor import Tensor

_PENDING = object()
_STOP = object()


class ExecutionError(RuntimeError):
    """A run failed; the message carries the node id and invocation key."""


@dataclass
class RunOptions:
    threads: int = 1
    max_recursion_depth: int = 512
    seed: int = 0
    debug: bool = False
    instrument: bool = False
    trace: bool = False
    timeout_s: float | None = None


@dataclass
class RunResult:
    values: list
    frames: dict = field(default_factory=dict)
    peak_concurrency: int = 0
    trace: list = field(default_factory=list)


def _key_str(key: tuple) -> str:
    return "/".join(str(i) for i in key) if key else "-"


class ValueCache:
    """Write-once map (invocation key, node id, tag) -> value."""

    __slots__ = ("_d", "__weakref__")

    def __init__(self):
        self._d = {}

    def write(self, key: tuple, node: int, tag: str, value):
        # dict.setdefault is a single atomic operation in CPython, which makes
        # the absent->present transition race-free across worker threads. Each
        # write gets a fresh cell so a second write is detected even when it
        # carries the identical value object.
        cell = [value]
        existing = self._d.setdefault((key, node, tag), cell)
        if existing is not cell:
            raise ExecutionError(
                f"duplicate cache write for node {node} ({tag}) at key {_key_str(key)}"
            )

    def read(self, key: tuple, node: int, tag: str):
        try:
            return self._d[(key, node, tag)][0]
        except KeyError:
            raise ExecutionError(
                f"backward before forward: no cached {tag} for node {node} "
                f"at key {_key_str(key)}"
            ) from None

    def __len__(self):
        return len(self._d)


class _Frame:
    __slots__ = (
        "body",
        "key",
        "values",
        "pending",
        "lock",
        "remaining",
        "parent",
        "return_node",
        "mapper",
    )

    def __init__(self, body, key, parent, return_node, mapper):
        self.body = body
        self.key = key
        self.values = [_PENDING] * body.n_nodes
        self.pending = list(body.pending0)
        self.lock = threading.Lock()
        self.remaining = body.completion_total
        self.parent = parent
        self.return_node = return_node
        self.mapper = mapper


class _RunState:
    __slots__ = (
        "g",
        "opts",
        "cache",
        "queue",
        "lock",
        "done",
        "error",
        "aborted",
        "watched",
        "fetch_remaining",
        "frames",
        "in_flight",
        "peak",
        "trace",
        "tracing",
    )

    def __init__(self, g: FinalizedGraph, opts: RunOptions):
        self.g = g
        self.opts = opts
        self.cache = ValueCache()
        self.queue: SimpleQueue = SimpleQueue()
        self.lock = threading.Lock()
        self.done = threading.Event()
        self.error: tuple | None = None
        self.aborted = False
        self.watched: set[int] = set()
        self.fetch_remaining = 0
        self.frames: dict[str, int] = {}
        self.in_flight = 0
        self.peak = 0
        self.trace: list[tuple] = []
        self.tracing = opts.trace or os.environ.get("RDG_TRACE") == "1"

    def fail(self, exc: BaseException, frame: _Frame, nid: int):
        with self.lock:
            if self.error is None:
                self.error = (exc, frame.key, nid, frame.body.kinds[nid])
                self.aborted = True
        self.done.set()


def _truthy(t: Tensor) -> bool:
    return abs(float(t.a[0, 0])) > 0.5


def _op_label(body, nid: int) -> str:
    k = body.kinds[nid]
    if k in ("unary", "binary"):
        p = body.payloads[nid]
        tag = p if isinstance(p, str) else p[0]
        return f"{k}[{tag}]"
    if k == "invoke":
        return f"invoke[{body.payloads[nid][0]}]"
    if k == "cond":
        return f"cond[{body.payloads[nid][0]},{body.payloads[nid][1]}]"
    return k


def _new_frame(state: _RunState, name: str, key, arg_values, parent, return_node, mapper):
    body = state.g.bodies[name]
    if len(key) > state.opts.max_recursion_depth:
        raise ExecutionError(
            f"recursion depth {len(key)} exceeds limit "
            f"{state.opts.max_recursion_depth} at key {_key_str(key)}"
        )
    if len(arg_values) != len(body.arg_slots):
        raise ExecutionError(
            f"subgraph {name!r} expects {len(body.arg_slots)} values "
            f"(inputs plus captures), got {len(arg_values)}"
        )
    frame = _Frame(body, key, parent, return_node, mapper)
    values = frame.values
    for nid, v in body.preset:
        values[nid] = v
    for nid, v in zip(body.arg_slots, arg_values):
        values[nid] = v
    with state.lock:
        state.frames[name] = state.frames.get(name, 0) + 1
    # Outputs that are themselves inputs/constants (identity bodies) complete
    # at init; settle them before any worker can race the countdown.
    finished = []
    if frame.remaining:
        with frame.lock:
            for nid in body.outputs_unique:
                if values[nid] is not _PENDING:
                    frame.remaining -= 1
            if frame.remaining == 0:
                finished = [frame]
    q = state.queue
    for nid in body.initial_ready:
        q.put((frame, nid))
    for f in finished:
        _return_frame(state, f)


def _return_frame(state: _RunState, frame: _Frame):
    body = frame.body
    outs = tuple(frame.values[i] for i in body.outputs)
    if frame.mapper is not None:
        value = frame.mapper(outs)
    elif len(outs) == 1:
        value = outs[0]
    else:
        value = outs
    _finish_node(state, frame.parent, frame.return_node, value)


def _finish_node(state: _RunState, frame: _Frame, nid: int, value):
    """Record a node's value and propagate readiness; iterative, no recursion."""
    work = deque([(frame, nid, value)])
    q = state.queue
    while work:
        frame, nid, value = work.popleft()
        body = frame.body
        frame.values[nid] = value
        for d in body.dependents[nid]:
            with frame.lock:
                frame.pending[d] -= 1
                fire = frame.pending[d] == 0
            if fire:
                q.put((frame, d))
        if frame.parent is None:
            if nid in state.watched:
                with state.lock:
                    state.fetch_remaining -= 1
                    if state.fetch_remaining == 0:
                        state.done.set()
        elif body.completion_mask[nid]:
            with frame.lock:
                frame.remaining -= 1
                returned = frame.remaining == 0
            if returned:
                pbody = frame.body
                outs = tuple(frame.values[i] for i in pbody.outputs)
                if frame.mapper is not None:
                    out_value = frame.mapper(outs)
                elif len(outs) == 1:
                    out_value = outs[0]
                else:
                    out_value = outs
                work.append((frame.parent, frame.return_node, out_value))


def _expand_invoke(state: _RunState, frame: _Frame, nid: int):
    name, _ncaps = frame.body.payloads[nid]
    vals = frame.values
    args = [vals[i] for i in frame.body.inputs[nid]]
    _new_frame(state, name, frame.key + (nid,), args, frame, nid, None)


def _expand_cond(state: _RunState, frame: _Frame, nid: int):
    tname, ename, ct, ce, record = frame.body.payloads[nid]
    ids = frame.body.inputs[nid]
    vals = frame.values
    n_args = len(ids) - 1 - ct - ce
    pred = _truthy(vals[ids[0]])
    if record:
        state.cache.write(frame.key, nid, "branch", 1 if pred else 0)
    args = [vals[i] for i in ids[1 : 1 + n_args]]
    if pred:
        name = tname
        caps = ids[1 + n_args : 1 + n_args + ct]
    else:
        name = ename
        caps = ids[1 + n_args + ct :]
    args.extend(vals[i] for i in caps)
    _new_frame(state, name, frame.key + (nid,), args, frame, nid, None)


def _expand_cond_grad(state: _RunState, frame: _Frame, nid: int):
    p = frame.body.payloads[nid]
    ids = frame.body.inputs[nid]
    vals = frame.values
    ct, ce = p.cap_counts
    n_up = len(ids) - 1 - ct - ce
    fwd_key = vals[ids[n_up]]
    try:
        rec = state.cache.read(fwd_key, p.cond_site, "branch")
    except ExecutionError as e:
        raise ExecutionError(
            f"forward/backward mismatch: no branch record for node {p.cond_site} "
            f"at key {_key_str(fwd_key)}"
        ) from e
    if rec not in (0, 1):
        raise ExecutionError(
            f"forward/backward mismatch: branch record for node {p.cond_site} "
            f"at key {_key_str(fwd_key)} is {rec!r}"
        )
    branch_key = fwd_key + (p.cond_site,)
    args = [vals[i] for i in ids[:n_up]]
    args.append(branch_key)
    if rec == 1:
        name = p.then_name
        caps = ids[1 + n_up : 1 + n_up + ct]
        slots = p.then_slots
    else:
        name = p.else_name
        caps = ids[1 + n_up + ct :]
        slots = p.else_slots
    args.extend(vals[i] for i in caps)
    n_union = p.n_union

    def embed(outs, slots=slots, n_union=n_union):
        union = [None] * n_union
        for pos, slot in enumerate(slots):
            union[slot] = outs[pos]
        return union[0] if n_union == 1 else tuple(union)

    _new_frame(state, name, frame.key + (nid,), args, frame, nid, embed)


def _execute(state: _RunState, frame: _Frame, nid: int, wid: int):
    body = frame.body
    kind = body.kinds[nid]
    opts = state.opts
    if opts.debug:
        for i in body.inputs[nid]:
            if frame.values[i] is _PENDING:
                raise ExecutionError(
                    f"scheduling bug: node {nid} ran before input {i} resolved "
                    f"at key {_key_str(frame.key)}"
                )
    if state.tracing:
        with state.lock:
            state.trace.append(
                (
                    time.monotonic_ns() // 1000,
                    wid,
                    _key_str(frame.key),
                    nid,
                    _op_label(body, nid),
                )
            )
    kernel = body.kernels[nid]
    if kernel is not None:
        if opts.instrument:
            with state.lock:
                state.in_flight += 1
                if state.in_flight > state.peak:
                    state.peak = state.in_flight
            try:
                value = kernel(frame.values)
            finally:
                with state.lock:
                    state.in_flight -= 1
        else:
            value = kernel(frame.values)
        _finish_node(state, frame, nid, value)
    elif kind == "invoke":
        _expand_invoke(state, frame, nid)
    elif kind == "cond":
        _expand_cond(state, frame, nid)
    elif kind == "cond_grad":
        _expand_cond_grad(state, frame, nid)
    elif kind == "cache_write":
        src = body.inputs[nid][0]
        state.cache.write(frame.key, body.payloads[nid], "val", frame.values[src])
        _finish_node(state, frame, nid, None)
    elif kind == "cache_read":
        key = frame.values[body.inputs[nid][0]]
        value = state.cache.read(key, body.payloads[nid][0], "val")
        _finish_node(state, frame, nid, value)
    else:
        raise ExecutionError(f"node {nid} of kind {kind!r} is not executable")


def _worker(state: _RunState, wid: int):
    q = state.queue
    while True:
        item = q.get()
        if item is _STOP:
            return
        if state.aborted:
            continue
        frame, nid = item
        try:
            _execute(state, frame, nid, wid)
        except Exception as exc:  # noqa: BLE001 - reported with full context
            state.fail(exc, frame, nid)


def run(
    g: FinalizedGraph,
    feeds: dict,
    fetches: list,
    opts: RunOptions | None = None,
    params: dict | None = None,
) -> RunResult:
    """Execute `g`, returning the fetched values in order."""
    opts = opts or RunOptions()
    if opts.threads < 1:
        raise ValueError("threads must be >= 1")
    params = params or {}
    top = g.top

    by_name = {}
    for h, v in feeds.items():
        name = h.payload if hasattr(h, "payload") else h
        if isinstance(name, NodeHandle):
            name = name.graph.nodes[name.id].payload
        by_name[name] = v

    fetch_ids = []
    for f in fetches:
        if isinstance(f, NodeHandle):
            if f.graph is not g.graph:
                raise ExecutionError(f"fetch {f!r} does not belong to this graph")
            fetch_ids.append(f.id)
        else:
            fetch_ids.append(int(f))
    for i in fetch_ids:
        if not (0 <= i < top.n_nodes):
            raise ExecutionError(f"fetch id {i} out of range")

    state = _RunState(g, opts)
    frame = _Frame(top, (), None, -1, None)
    values = frame.values
    for nid, v in top.preset:
        values[nid] = v
    for nid, name, shape in top.placeholders:
        if name not in by_name:
            raise ExecutionError(f"placeholder {name!r} was not fed")
        v = by_name[name]
        if not isinstance(v, Tensor):
            raise ExecutionError(f"feed for {name!r} must be a tensor")
        if v.cols != shape.cols or (shape.rows is not None and v.rows != shape.rows):
            raise ExecutionError(
                f"feed for {name!r} has shape {v.rows}x{v.cols}, expected {shape}"
            )
        values[nid] = v
    for nid, name, shape in top.parameters:
        if name not in params:
            raise ExecutionError(f"parameter {name!r} missing from the parameter store")
        v = params[name]
        if Shape(v.rows, v.cols) != shape:
            raise ExecutionError(
                f"parameter {name!r} has shape {v.rows}x{v.cols}, expected {shape}"
            )
        values[nid] = v

    state.watched = set(fetch_ids)
    init_done = sum(1 for i in state.watched if values[i] is not _PENDING)
    state.fetch_remaining = len(state.watched) - init_done
    if state.fetch_remaining == 0:
        state.done.set()
    with state.lock:
        state.frames["top"] = 1

    workers = [
        threading.Thread(target=_worker, args=(state, w), daemon=True)
        for w in range(opts.threads)
    ]
    q = state.queue
    for nid in top.initial_ready:
        q.put((frame, nid))
    for t in workers:
        t.start()
    finished = state.done.wait(opts.timeout_s)
    state.aborted = True
    for _ in workers:
        q.put(_STOP)
    for t in workers:
        t.join()
    if not finished:
        raise ExecutionError(f"run timed out after {opts.timeout_s}s")
    if state.error is not None:
        exc, key, nid, kind = state.error
        raise ExecutionError(
            f"node {nid} ({kind}) at key {_key_str(key)}: {exc}"
        ) from exc

    out = [values[i] for i in fetch_ids]
    return RunResult(
        values=out,
        frames=dict(state.frames),
        peak_concurrency=state.peak,
        trace=state.trace,
    )


def run_training_step(
    g: FinalizedGraph,
    grad_map,
    feeds: dict,
    params: dict,
    opts: RunOptions | None = None,
):
    """One forward+backward pass: returns (loss, {param name: gradient})."""
    fetches = [grad_map.loss] + [grad_map.param_grads[n] for n in grad_map.param_order]
    res = run(g, feeds, fetches, opts, params)
    loss = float(res.values[0].item())
    grads = dict(zip(grad_map.param_order, res.values[1:]))
    return loss, grads
