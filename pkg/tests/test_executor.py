"""Scheduler behavior: overlap, determinism, frames, cache, error context."""

import threading
import time
import weakref

import pytest

from rdg import ExecutionError, Graph, RunOptions, Tensor, run
from rdg.executor import ValueCache
from rdg.graph import Shape

from test_graph import build_countdown, scalar_sig


def run1(g, feeds, fetches, **kw):
    return run(g, feeds, fetches, RunOptions(**kw))


class TestBasics:
    def test_countdown_value(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(5.0)}, [y], RunOptions(threads=2))
        assert res.values[0].item() == 120.0

    def test_fetch_placeholder_directly(self):
        g = Graph()
        x = g.placeholder((2, 1), "x")
        fg = g.finalize()
        t = Tensor(2, 1, [3.0, 4.0])
        res = run(fg, {"x": t}, [x])
        assert res.values[0] == t

    def test_fetch_constant(self):
        g = Graph()
        c = g.constant(Tensor.scalar(7.0))
        fg = g.finalize()
        assert run(fg, {}, [c]).values[0].item() == 7.0

    def test_duplicate_fetches(self):
        g = Graph()
        x = g.placeholder((1, 1), "x")
        y = g.neg(x)
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(2.0)}, [y, y, x])
        assert [v.item() for v in res.values] == [-2.0, -2.0, 2.0]

    def test_unfed_placeholder_named(self):
        g = Graph()
        x = g.placeholder((1, 1), "price")
        y = g.neg(x)
        fg = g.finalize()
        with pytest.raises(ExecutionError, match="'price' was not fed"):
            run(fg, {}, [y])

    def test_missing_parameter_named(self):
        g = Graph()
        w = g.parameter("W", (1, 1))
        y = g.neg(w)
        fg = g.finalize()
        with pytest.raises(ExecutionError, match="'W' missing"):
            run(fg, {}, [y])

    def test_feed_shape_checked(self):
        g = Graph()
        x = g.placeholder((2, 1), "x")
        fg = g.finalize()
        with pytest.raises(ExecutionError, match="expected 2x1"):
            run(fg, {"x": Tensor.scalar(1.0)}, [x])

    def test_dynamic_row_feed_accepts_any_rows(self):
        g = Graph()
        x = g.placeholder((None, 1), "x")
        fg = g.finalize()
        for rows in (1, 5, 17):
            t = Tensor.zeros(rows, 1)
            assert run(fg, {"x": t}, [x]).values[0].rows == rows

    def test_threads_must_be_positive(self):
        g = Graph()
        c = g.constant(Tensor.scalar(0.0))
        fg = g.finalize()
        with pytest.raises(ValueError, match="threads"):
            run(fg, {}, [c], RunOptions(threads=0))

    def test_debug_mode_checklist_passes(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(4.0)}, [y], RunOptions(threads=4, debug=True))
        assert res.values[0].item() == 24.0


class TestDeterminism:
    def test_identical_across_thread_counts(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        results = [
            run(fg, {"x": Tensor.scalar(9.0)}, [y], RunOptions(threads=t)).values[0]
            for t in (1, 2, 4, 8)
        ]
        for r in results[1:]:
            assert r == results[0]  # bitwise

    def test_concurrent_runs_are_independent(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        (expected,) = [
            {n: run(fg, {"x": Tensor.scalar(float(n))}, [y]).values[0].item() for n in range(1, 9)}
        ]
        out = {}
        errs = []

        def one(n):
            try:
                r = run(fg, {"x": Tensor.scalar(float(n))}, [y], RunOptions(threads=2))
                out[n] = r.values[0].item()
            except Exception as e:  # noqa: BLE001
                errs.append(e)

        ts = [threading.Thread(target=one, args=(n,)) for n in range(1, 9)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert not errs
        assert out == expected


class TestLaziness:
    def test_untaken_branch_never_runs(self):
        g = Graph()
        then = g.declare_subgraph("Then", *scalar_sig())
        other = g.declare_subgraph("Else", *scalar_sig())
        tb = g.body(then)
        tb.set_outputs([tb.neg(tb.args[0])])
        g.define_subgraph(then, tb)
        eb = g.body(other)
        eb.set_outputs([eb.square(eb.args[0])])
        g.define_subgraph(other, eb)
        p = g.placeholder((1, 1), "p")
        x = g.placeholder((1, 1), "x")
        (y,) = g.cond(p, then, other, [x])
        fg = g.finalize()

        res = run(fg, {"p": Tensor.scalar(1.0), "x": Tensor.scalar(3.0)}, [y])
        assert res.values[0].item() == -3.0
        assert res.frames.get("Then", 0) == 1
        assert res.frames.get("Else", 0) == 0

        res = run(fg, {"p": Tensor.scalar(0.0), "x": Tensor.scalar(3.0)}, [y])
        assert res.values[0].item() == 9.0
        assert res.frames.get("Then", 0) == 0
        assert res.frames.get("Else", 0) == 1

    def test_predicate_threshold_is_half(self):
        g = Graph()
        then = g.declare_subgraph("Then", *scalar_sig())
        other = g.declare_subgraph("Else", *scalar_sig())
        for ref, fn in ((then, "neg"), (other, "square")):
            b = g.body(ref)
            b.set_outputs([b.unary(b.args[0], fn)])
            g.define_subgraph(ref, b)
        p = g.placeholder((1, 1), "p")
        x = g.placeholder((1, 1), "x")
        (y,) = g.cond(p, then, other, [x])
        fg = g.finalize()
        feeds = lambda pv: {"p": Tensor.scalar(pv), "x": Tensor.scalar(3.0)}
        assert run(fg, feeds(0.49), [y]).values[0].item() == 9.0
        assert run(fg, feeds(0.51), [y]).values[0].item() == -3.0
        assert run(fg, feeds(-0.51), [y]).values[0].item() == -3.0  # magnitude


class TestRecursionMechanics:
    def test_deep_linear_recursion_single_thread(self):
        # With one worker, a blocking call-site design would deadlock at
        # depth 2; 400 frames deep proves invocation never parks a worker.
        g = Graph()
        f = g.declare_subgraph("F", *scalar_sig())
        base = g.declare_subgraph("B", *scalar_sig())
        step = g.declare_subgraph("S", *scalar_sig())
        fb = g.body(f)
        (n,) = fb.args
        fb.set_outputs(fb.cond(n, step, base, [n]))
        g.define_subgraph(f, fb)
        bb = g.body(base)
        bb.set_outputs([bb.constant(Tensor.scalar(0.0))])
        g.define_subgraph(base, bb)
        sb = g.body(step)
        (m,) = sb.args
        rec = sb.invoke(f, [sb.add(m, sb.constant(Tensor.scalar(-1.0)))])
        sb.set_outputs([sb.add(rec[0], sb.constant(Tensor.scalar(1.0)))])
        g.define_subgraph(step, sb)
        x = g.placeholder((1, 1), "x")
        (y,) = g.invoke(f, [x])
        fg = g.finalize()
        res = run(
            fg,
            {"x": Tensor.scalar(400.0)},
            [y],
            RunOptions(threads=1, max_recursion_depth=1000),
        )
        assert res.values[0].item() == 400.0
        assert res.frames["F"] == 401

    def test_depth_limit_error_names_key(self):
        g = Graph()
        f = g.declare_subgraph("Loop", *scalar_sig())
        fb = g.body(f)
        fb.set_outputs(fb.invoke(f, [fb.args[0]]))  # no terminating cond
        g.define_subgraph(f, fb)
        x = g.placeholder((1, 1), "x")
        (y,) = g.invoke(f, [x])
        fg = g.finalize()
        t0 = time.monotonic()
        with pytest.raises(ExecutionError, match="recursion depth .* exceeds limit 64"):
            run(fg, {"x": Tensor.scalar(1.0)}, [y], RunOptions(max_recursion_depth=64))
        assert time.monotonic() - t0 < 10.0

    def test_runtime_error_carries_node_and_key(self):
        g = Graph()
        f = g.declare_subgraph("F", [(1, 1)], [(1, 1)])
        fb = g.body(f)
        (i,) = fb.args
        table = fb.root().constant(Tensor.from_rows([[1.0], [2.0]]))
        fb.set_outputs([fb.gather_row(table, i)])
        g.define_subgraph(f, fb)
        x = g.placeholder((1, 1), "x")
        (y,) = g.invoke(f, [x])
        fg = g.finalize()
        with pytest.raises(ExecutionError, match=r"node \d+ \(gather_row\) at key \d"):
            run(fg, {"x": Tensor.scalar(5.0)}, [y])  # row 5 of a 2-row table


class TestOverlap:
    def test_diamond_overlap_wall_clock(self):
        def build():
            g = Graph()
            a = g.placeholder((1, 1), "a")
            b = g.unary(a, ("sleep", 0.05))
            c = g.unary(a, ("sleep", 0.05))
            d = g.add(b, c)
            return g.finalize(), d

        fg, d = build()
        feeds = {"a": Tensor.scalar(1.0)}

        t0 = time.monotonic()
        run(fg, feeds, [d], RunOptions(threads=1))
        serial = time.monotonic() - t0

        t0 = time.monotonic()
        run(fg, feeds, [d], RunOptions(threads=2))
        overlapped = time.monotonic() - t0

        assert serial >= 0.099  # two sleeps back to back
        assert overlapped < 0.09  # b and c overlapped

    def test_parallel_leaves_through_recursion(self):
        # Bin(n): n > 0.5 -> two recursive calls then merge; else a slow leaf.
        # With 8 workers and 8 leaves all 8 stalls should overlap.
        g = Graph()
        f = g.declare_subgraph("Bin", *scalar_sig())
        leaf = g.declare_subgraph("Leaf", *scalar_sig())
        split = g.declare_subgraph("Split", *scalar_sig())
        fb = g.body(f)
        (n,) = fb.args
        fb.set_outputs(fb.cond(n, split, leaf, [n]))
        g.define_subgraph(f, fb)
        lb = g.body(leaf)
        lb.set_outputs([lb.unary(lb.args[0], ("sleep", 0.05))])
        g.define_subgraph(leaf, lb)
        sb = g.body(split)
        (m,) = sb.args
        dec = sb.add(m, sb.constant(Tensor.scalar(-1.0)))
        l = sb.invoke(f, [dec])
        r = sb.invoke(f, [dec])
        sb.set_outputs([sb.add(l[0], r[0])])
        g.define_subgraph(split, sb)
        x = g.placeholder((1, 1), "x")
        (y,) = g.invoke(f, [x])
        fg = g.finalize()

        res = run(
            fg,
            {"x": Tensor.scalar(3.0)},
            [y],
            RunOptions(threads=8, instrument=True),
        )
        assert res.frames["Leaf"] == 8
        assert res.frames["Bin"] == 15
        assert res.peak_concurrency >= 4  # at least half the leaves overlapped

    def test_linear_tree_is_sequential(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        res = run(
            fg, {"x": Tensor.scalar(6.0)}, [y], RunOptions(threads=8, instrument=True)
        )
        assert res.peak_concurrency == 1


class TestCache:
    def test_round_trip_within_run(self):
        g = Graph()
        src = g.constant(Tensor.scalar(5.0))
        g.add_node("cache_write", (src,), payload=src.id)
        key = g.constant(())
        rd = g.add_node("cache_read", (key,), payload=(src.id, Shape(1, 1)))
        fg = g.finalize()
        res = run(fg, {}, [rd], RunOptions(threads=1))
        assert res.values[0].item() == 5.0

    def test_missing_entry_is_backward_before_forward(self):
        g = Graph()
        key = g.constant((9,))  # no frame ever wrote under this key
        rd = g.add_node("cache_read", (key,), payload=(0, Shape(1, 1)))
        fg = g.finalize()
        with pytest.raises(ExecutionError, match="backward before forward"):
            run(fg, {}, [rd], RunOptions(threads=1))

    def test_duplicate_write_detected(self):
        g = Graph()
        src = g.constant(Tensor.scalar(5.0))
        g.add_node("cache_write", (src,), payload=src.id)
        g.add_node("cache_write", (src,), payload=src.id)
        sink = g.neg(src)
        fg = g.finalize()
        with pytest.raises(ExecutionError, match="duplicate cache write"):
            run(fg, {}, [sink], RunOptions(threads=1))

    def test_sibling_frames_write_same_node_id(self):
        # two invocations of one subgraph, each caching its own input
        g = Graph()
        f = g.declare_subgraph("F", *scalar_sig())
        fb = g.body(f)
        (a,) = fb.args
        fb.add_node("cache_write", (a,), payload=a.id)
        fb.set_outputs([fb.neg(a)])
        g.define_subgraph(f, fb)
        x = g.placeholder((1, 1), "x")
        (y1,) = g.invoke(f, [x])
        (y2,) = g.invoke(f, [g.neg(x)])
        out = g.add(y1, y2)
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(3.0)}, [out], RunOptions(threads=4))
        assert res.values[0].item() == 0.0

    def test_concurrent_stress_all_reads_observe_writes(self):
        cache = ValueCache()
        n_threads, n_keys = 8, 1000
        errs = []

        def worker(tid):
            try:
                for k in range(n_keys):
                    cache.write((tid, k), 0, "val", (tid, k))
                for k in range(n_keys):
                    assert cache.read((tid, k), 0, "val") == (tid, k)
            except Exception as e:  # noqa: BLE001
                errs.append(e)

        ts = [threading.Thread(target=worker, args=(t,)) for t in range(n_threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert not errs
        assert len(cache) == n_threads * n_keys
        for tid in range(n_threads):
            for k in range(n_keys):
                assert cache.read((tid, k), 0, "val") == (tid, k)

    def test_write_once_under_contention(self):
        cache = ValueCache()
        failures = []

        def worker(tid):
            try:
                cache.write((), 7, "val", tid)
            except ExecutionError:
                failures.append(tid)

        ts = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert len(failures) == 7  # exactly one writer wins

    def test_cache_released_after_run(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        holder = {}
        orig_init = ValueCache.__init__

        def spy(self):
            orig_init(self)
            holder["ref"] = weakref.ref(self)

        ValueCache.__init__ = spy
        try:
            run(fg, {"x": Tensor.scalar(5.0)}, [y])
        finally:
            ValueCache.__init__ = orig_init
        assert holder["ref"]() is None  # nothing retains the run's cache


class TestTrace:
    def test_trace_rows_and_keys(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(3.0)}, [y], RunOptions(threads=1, trace=True))
        assert res.trace
        for ts, wid, key, nid, op in res.trace:
            assert isinstance(ts, int) and isinstance(wid, int)
            assert isinstance(key, str) and isinstance(nid, int)
            assert isinstance(op, str)
        ops = [r[4] for r in res.trace]
        assert ops.count("invoke[F]") == 4  # top + three recursive sites
        # timestamps are non-decreasing per worker
        by_worker = {}
        for ts, wid, *_ in res.trace:
            assert by_worker.get(wid, 0) <= ts
            by_worker[wid] = ts

    def test_trace_off_by_default(self):
        g, x, y = build_countdown()
        fg = g.finalize()
        res = run(fg, {"x": Tensor.scalar(3.0)}, [y])
        assert res.trace == []
