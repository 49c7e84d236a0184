import pytest

from scheduler_harness import run_many
from loraserve.kvcache import KvPageConfig
from loraserve.scheduler import GpuState, Request, RequestState, Scheduler


def make(n_gpus=2, pages=100, page=4, max_batch=32, **kw):
    gpus = [GpuState(u, KvPageConfig(page_size=page, total_pages=pages), max_batch) for u in range(n_gpus)]
    return Scheduler(gpus, **kw), gpus


def req(i, lora=0, prompt=4, out=3):
    return Request(i, lora, prompt, out)


def test_ties_go_to_highest_uuid():
    s, gpus = make(3)
    r = req(0)
    s.submit(r)
    assert r.gpu == 2 and r.state is RequestState.RUNNING


def test_largest_working_set_wins():
    s, gpus = make(3)
    s.submit(req(0))
    s.submit(req(1))
    assert {r.gpu for r in gpus[2].working_set.values()} == {2}
    assert len(gpus[2]) == 2 and len(gpus[0]) == 0


def test_full_gpu_spills_to_next():
    s, gpus = make(2, max_batch=2)
    for i in range(3):
        s.submit(req(i))
    assert len(gpus[1]) == 2 and len(gpus[0]) == 1


def test_fcfs_head_of_line_blocking():
    s, gpus = make(1, pages=4, page=4)
    s.submit(req(0, prompt=12))           # 3 pages
    big = req(1, prompt=8)                # needs 2, only 1 free
    small = req(2, prompt=1)
    s.submit(big)
    s.submit(small)
    assert big.state is RequestState.QUEUED and small.state is RequestState.QUEUED
    assert [r.id for r in s.queued()] == [1, 2]


def test_headroom_blocks_admission():
    s, gpus = make(1, pages=3, page=4, headroom_pages=2)
    s.submit(req(0, prompt=8))
    assert s.queue_depth == 1


def test_homogeneous_mode_keeps_one_adapter_per_gpu():
    s, gpus = make(2, homogeneous=True)
    s.submit(req(0, lora=5))
    s.submit(req(1, lora=6))
    s.submit(req(2, lora=5))
    assert set(gpus[1].lora_counts) == {5} and set(gpus[0].lora_counts) == {6}
    assert len(gpus[1]) == 2


def test_on_oom_evicts_newest_first():
    s, gpus = make(2, pages=6, page=4)
    rs = [req(i, prompt=8) for i in range(3)]
    for r in rs:
        s.submit(r)
    g = gpus[1]
    assert len(g) == 3 and g.kv.free_pages == 0
    for _ in range(8):
        g.kv.extend(0) or None
    evicted = s.on_oom(g, 0)
    assert [v.id for v in evicted] == [2]
    assert rs[2].migrations == 1 and s.migrations == 1
    assert rs[2].state in (RequestState.QUEUED, RequestState.RUNNING)


def test_on_oom_can_evict_the_requester():
    s, gpus = make(1, pages=2, page=4)
    a, b = req(0, prompt=4), req(1, prompt=4)
    s.submit(a)
    s.submit(b)
    for _ in range(4):
        assert gpus[0].kv.extend(1) or True
    evicted = s.on_oom(gpus[0], 1)
    assert evicted == [b] and b.state is RequestState.QUEUED


def test_evicted_request_refills_prompt_plus_generated():
    s, gpus = make(2, pages=4, page=4)
    r = req(0, prompt=4, out=10)
    s.submit(r)
    r.generated = 3
    s.migrate(r)
    s.drain_queue()
    assert r.state is RequestState.RUNNING
    assert gpus[r.gpu].kv.seq_len(r.id) == 7


def test_cancel_queued_and_running():
    s, gpus = make(1, pages=1, page=4)
    a, b = req(0), req(1)
    s.submit(a)
    s.submit(b)
    assert b.state is RequestState.QUEUED
    s.cancel(b)
    assert b.state is RequestState.CANCELLED and s.queue_depth == 0
    gpus[0].busy = True
    s.cancel(a)
    assert a.state is RequestState.CANCELLED and len(gpus[0]) == 0
    assert gpus[0].kv.free_pages == 0          # pages held until the step ends
    s.deliver(gpus[0])
    assert gpus[0].kv.free_pages == 1


def test_migrate_while_busy_resubmits_on_delivery():
    s, gpus = make(2)
    r = req(0)
    s.submit(r)
    src = gpus[r.gpu]
    src.busy = True
    s.migrate(r)
    assert r.state is RequestState.MIGRATING
    s.deliver(src)
    assert r.state is RequestState.QUEUED
    s.drain_queue()
    assert r.state is RequestState.RUNNING and r.migrations == 1


def test_cancel_during_migration():
    s, gpus = make(1)
    r = req(0)
    s.submit(r)
    gpus[0].busy = True
    s.migrate(r)
    s.cancel(r)
    s.deliver(gpus[0])
    assert r.state is RequestState.CANCELLED and s.queue_depth == 0 and len(gpus[0].kv) == 0


def test_finish_releases():
    s, gpus = make(1)
    r = req(0)
    s.submit(r)
    s.finish(r)
    assert r.state is RequestState.FINISHED and gpus[0].kv.free_pages == 100


def test_scaling_signal():
    s, gpus = make(2, max_batch=4)         # lightly loaded below 2
    assert s.scaling_signal().kind == "can_release"
    for i in range(5):
        s.submit(req(i))
    assert s.scaling_signal().kind == "steady"
    s.submit(req(5))
    assert s.scaling_signal().kind == "need_more"


def test_submit_rejects_running():
    s, _ = make(1)
    r = req(0)
    s.submit(r)
    with pytest.raises(ValueError):
        s.submit(r)


def test_duplicate_uuid_rejected():
    g = GpuState(0, KvPageConfig())
    with pytest.raises(ValueError):
        Scheduler([g, g])


def test_request_validation():
    with pytest.raises(ValueError):
        Request(0, 0, 0, 1)


def test_randomized_sequences_clean():
    bad, totals = run_many(0, 2000)
    assert bad == []
    assert totals["evictions"] > 0 and totals["full_gpus"] > 0
