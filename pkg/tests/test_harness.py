import pytest

from memento import probe
from memento.ds import OP_INSERT, OP_REMOVE
from memento.ds.base import NEXT
from memento.harness import CrashPlan, HistoryLog, RunConfig, System, run, run_threads
from memento.harness.campaign import check_run, fifo_violations
from memento.harness.log import FREE, INV, RES, THREAD_CRASH, Event
from memento.harness.plan import PlanError
from memento.harness.verify import (Op, history_from_log, verify_exactly_once,
                                    verify_linearizable, verify_no_double_free)
from memento.insdel import PERSIST
from memento.pmem import CrashModel


def test_pair_workload_counts():
    res = run(RunConfig(ds="msq-cas", workload="pair", threads=1, ops=100, seed=1))
    names = [e.op for e in res.log.events if e.kind == RES]
    assert names.count("enq") == 100 and names.count("deq") == 100
    assert check_run(res) == []


def test_same_seed_same_history():
    cfg = dict(ds="msq-indel", threads=3, ops=60, seed=11, plan=CrashPlan.full(2))
    a = run(RunConfig(**cfg)).log.text()
    b = run(RunConfig(**cfg)).log.text()
    assert a == b


def test_thread_crash_is_logged_inside_the_operation():
    plan = CrashPlan(kind="thread", trigger="label", label="dcas.L35", count=1, tid=1)
    res = run(RunConfig(ds="msq-cas", threads=2, ops=20, seed=3, plan=plan))
    assert res.thread_crashes == 1
    evs = res.log.events
    crash = next(i for i, e in enumerate(evs) if e.kind == THREAD_CRASH)
    tid = evs[crash].tid
    inv = max(i for i, e in enumerate(evs[:crash]) if e.kind == INV and e.tid == tid)
    seq = evs[inv].seq
    assert not any(e.kind == RES and e.tid == tid and e.seq == seq for e in evs[inv:crash])
    assert sum(1 for e in evs if e.kind == INV and e.tid == tid and e.seq == seq) == 1
    assert sum(1 for e in evs if e.kind == RES and e.tid == tid and e.seq == seq) == 1
    assert check_run(res) == []


def _ev(kind, tid=1, seq=0, op="", args="", result=""):
    return Event(0, seq, tid, kind, op, str(args), str(result), 0)


def test_exactly_once_detects_duplicates():
    good = [_ev(INV, seq=0, op="enq", args=5), _ev(RES, seq=0, op="enq", args=5, result="ok"),
            _ev(INV, seq=1, op="deq"), _ev(RES, seq=1, op="deq", result="5")]
    assert verify_exactly_once(good, [])
    assert not verify_exactly_once(good, [5])
    lost = good[:2]
    assert not verify_exactly_once(lost, [])
    twice = good + [_ev(INV, tid=2, seq=0, op="deq"), _ev(RES, tid=2, seq=0, op="deq", result="5")]
    assert not verify_exactly_once(twice, [])


def test_double_free_detected():
    assert verify_no_double_free([_ev("retire", args=64), _ev(FREE, args=64)])
    assert not verify_no_double_free([_ev("retire", args=64), _ev(FREE, args=64),
                                      _ev(FREE, args=64)])


def test_sequential_history_is_linearizable():
    ops = [Op(1, "enq", 1, None, 0, 1), Op(1, "enq", 2, None, 2, 3),
           Op(1, "deq", None, 1, 4, 5), Op(1, "deq", None, 2, 6, 7), Op(1, "deq", None, -1, 8, 9)]
    assert verify_linearizable(ops)
    stack = [Op(1, "push", 1, None, 0, 1), Op(1, "push", 2, None, 2, 3),
             Op(1, "pop", None, 2, 4, 5)]
    assert verify_linearizable(stack, "stack")


def test_overlap_allows_either_order():
    ops = [Op(1, "enq", 1, None, 0, 5), Op(2, "enq", 2, None, 1, 4), Op(3, "deq", None, 2, 6, 7)]
    assert verify_linearizable(ops)


@pytest.mark.parametrize("history", fifo_violations())
def test_fifo_violations_rejected(history):
    assert not verify_linearizable(history)


def test_history_from_log_spans_crashes():
    res = run(RunConfig(ds="stack", threads=2, ops=4, seed=5, plan=CrashPlan.full(1, jitter=5)))
    ops = history_from_log(res.log.events)
    assert len(ops) == 8
    assert all(o.inv < o.res for o in ops)


def test_plan_parsing():
    plan = CrashPlan.parse("kind=full\ncount=3  # three\nmodel=per_line_random\nseed=4\n")
    assert plan.kind == "full" and plan.crashes == 3
    assert CrashPlan.parse("kind=thread\ntrigger=op_count\nat=5,9").crashes == 2
    for bad in ("kind=meteor", "count=x", "trigger=label", "nonsense", "colour=red",
                "model=enumerate", "model=gamma"):
        with pytest.raises(PlanError):
            CrashPlan.parse(bad)


def test_log_roundtrip(tmp_path):
    res = run(RunConfig(ds="msq-vol", threads=2, ops=10, seed=2, plan=CrashPlan.full(1)))
    path = tmp_path / "h.log"
    res.log.save(path)
    assert HistoryLog.load(path).events == res.log.events


@pytest.mark.parametrize("crashes", [0, 1, 3])
def test_boot_count(crashes):
    res = run(RunConfig(ds="msq-indel", threads=2, ops=200, seed=9,
                        plan=CrashPlan.full(crashes, model=CrashModel.per_line_random(1))))
    assert res.boots == crashes
    assert check_run(res) == []


def test_os_threads_crash_free():
    res = run_threads("msq-cas", "enq50", 4, 200, seed=3)
    assert check_run(res) == []


def test_file_backed_pool(tmp_path):
    path = str(tmp_path / "pool.img")
    res = run(RunConfig(ds="msq-cas", threads=2, ops=50, seed=4, plan=CrashPlan.full(2),
                        path=path))
    assert check_run(res) == []
    assert (tmp_path / "pool.img").stat().st_size == res.system.pool.capacity


def test_commit_unique_under_thread_crashes():
    """A node's replacement is committed at most once per lifetime."""
    log = HistoryLog()
    probe.set_tracer(lambda kind, *a: log.append(0, a[0], "commit", "", a[1])
                     if kind == "commit" else None)
    plan = CrashPlan(kind="thread", trigger="label", label="insdel.delete.L34", count=4, nth=5)
    res = run(RunConfig(ds="msq-indel", threads=3, ops=150, seed=8, plan=plan), log)
    assert res.thread_crashes == 4 and check_run(res) == []
    live: dict = {}
    for e in log.events:
        if e.kind == "commit":
            assert not live.get(e.args), f"block {e.args} committed twice"
            live[e.args] = True
        elif e.kind == FREE:
            live[e.args] = False


def test_dequeue_never_flushes_head_synchronously():
    system = System.create("msq-indel", 1 << 20, 4)
    system.ds.prefill([1, 2, 3])
    head_line = (system.ds.root) >> 6
    pool = system.pool
    events = []
    flush = pool.flush
    cas = pool.cas_word

    def traced_flush(off):
        events.append(("flush", off >> 6))
        return flush(off)

    def traced_cas(off, old, new):
        events.append(("cas", off >> 6))
        return cas(off, old, new)
    pool.flush, pool.cas_word = traced_flush, traced_cas
    probe.set_hook(lambda label: events.append(("point", label)))
    for seq in range(3):
        system.execute(1 + seq, OP_REMOVE, 0, seq)
    probe.set_hook(None)
    # from one operation's end to the next one's deferred flushes
    ends = [i for i, e in enumerate(events) if e == ("point", "smr.unpin.done")]
    begins = [i for i, e in enumerate(events) if e == ("point", "smr.unpin.begin")]
    assert len(begins) == 3
    for start, end in zip([0] + ends, begins):
        on_head = [k for k, line in events[start:end] if line == head_line and k != "point"]
        assert "cas" in on_head and "flush" not in on_head


def test_links_persist_before_they_are_cleared():
    """Every NEXT link with the persist bit clear is durable."""
    system = System.create("msq-indel", 1 << 20, 4)
    checked = [0]

    def hook(label):
        pool = system.pool
        for n in system.ds.nodes():
            word = pool.load_word(n + NEXT)
            if word and not word & PERSIST:
                checked[0] += 1
                assert pool.persisted_word(n + NEXT) & ~PERSIST == word
    probe.set_hook(hook)
    for seq in range(6):
        system.execute(1, OP_INSERT, seq + 1, seq)
    probe.set_hook(None)
    assert checked[0] > 0
