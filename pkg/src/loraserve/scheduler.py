"""Cluster scheduler: placement, FCFS queueing, eviction and cancellation.

The scheduler is a deterministic state machine. The simulator drives it with
arrivals, step completions, KvCache refusals and cancellations; it never
looks at the clock.
"""
import enum
import heapq
from dataclasses import dataclass, field
from typing import Optional

from loraserve.kvcache import PagedKvAllocator


class RequestState(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    MIGRATING = "migrating"
    FINISHED = "finished"
    CANCELLED = "cancelled"


@dataclass(eq=False)
class Request:
    id: int                   # admission sequence number: FCFS and "newest" order
    lora_id: int
    prompt_len: int
    target_output_len: int
    arrival_time: float = 0.0
    generated: int = 0
    state: RequestState = RequestState.QUEUED
    gpu: Optional[int] = None
    needs_prefill: bool = True
    migrations: int = 0
    last_token_time: Optional[float] = None

    def __post_init__(self):
        if self.prompt_len < 1 or self.target_output_len < 1:
            raise ValueError(f"request {self.id}: lengths must be >= 1")

    @property
    def prefill_len(self):
        # after migration the prefill recomputes prompt plus generated tokens
        return self.prompt_len + self.generated

    @property
    def done(self):
        return self.state in (RequestState.FINISHED, RequestState.CANCELLED)

    def __repr__(self):
        return (f"Request(id={self.id}, lora={self.lora_id}, prompt={self.prompt_len}, "
                f"gen={self.generated}/{self.target_output_len}, {self.state.value})")


class GpuState:
    def __init__(self, uuid, kv_config, max_batch=32):
        self.uuid = uuid
        self.kv = PagedKvAllocator(kv_config)
        self.max_batch = max_batch
        self.working_set = {}         # request id -> Request, insertion ordered
        self.lora_counts = {}
        self.loaded_adapters = {}     # lora_id -> load completion time
        self.busy = False             # a step is in flight
        self.pending = []             # (request, resubmit) awaiting step completion

    def add(self, req):
        self.working_set[req.id] = req
        self.lora_counts[req.lora_id] = self.lora_counts.get(req.lora_id, 0) + 1

    def remove(self, req):
        del self.working_set[req.id]
        c = self.lora_counts[req.lora_id] - 1
        if c:
            self.lora_counts[req.lora_id] = c
        else:
            del self.lora_counts[req.lora_id]

    def __len__(self):
        return len(self.working_set)

    def __repr__(self):
        return f"GpuState(uuid={self.uuid}, ws={len(self.working_set)}, free_pages={self.kv.free_pages})"


@dataclass(frozen=True)
class ScalingSignal:
    kind: str                  # "need_more" | "steady" | "can_release"
    gpus: tuple = field(default=())


class Scheduler:
    """Places requests on the GPU with the largest admissible working set.

    ``homogeneous=True`` restricts each working set to a single adapter,
    which is how the baseline systems batch.
    """

    def __init__(self, gpus, headroom_pages=0, lightly_loaded_threshold=None, homogeneous=False):
        self.gpus = list(gpus)
        self.by_uuid = {g.uuid: g for g in self.gpus}
        if len(self.by_uuid) != len(self.gpus):
            raise ValueError("duplicate GPU uuid")
        self.headroom_pages = headroom_pages
        mb = max((g.max_batch for g in self.gpus), default=32)
        self.lightly_loaded_threshold = (
            lightly_loaded_threshold if lightly_loaded_threshold is not None else mb / 2)
        self.homogeneous = homogeneous
        self._heap = []
        self._queued = {}
        self.migrations = 0

    # queue

    @property
    def queue_depth(self):
        return len(self._queued)

    def queued(self):
        return sorted(self._queued.values(), key=lambda r: r.id)

    def _enqueue(self, req):
        req.state = RequestState.QUEUED
        req.gpu = None
        req.needs_prefill = True
        self._queued[req.id] = req
        heapq.heappush(self._heap, req.id)

    def _head(self):
        while self._heap and self._heap[0] not in self._queued:
            heapq.heappop(self._heap)
        return self._queued[self._heap[0]] if self._heap else None

    # placement

    def admissible(self, req, gpu):
        if len(gpu.working_set) >= gpu.max_batch:
            return False
        if self.homogeneous and gpu.working_set and req.lora_id not in gpu.lora_counts:
            return False
        return gpu.kv.can_admit(req.prefill_len, self.headroom_pages)

    def place(self, req):
        """The admissible GPU with the largest working set, highest uuid on ties."""
        best, best_key = None, None
        for g in self.gpus:
            if not self.admissible(req, g):
                continue
            key = (len(g.working_set), g.uuid)
            if best_key is None or key > best_key:
                best, best_key = g, key
        return best

    def _assign(self, req, gpu):
        if not gpu.kv.reserve(req.id, req.prefill_len):
            raise AssertionError("admission check passed but reservation failed")
        gpu.add(req)
        req.state = RequestState.RUNNING
        req.gpu = gpu.uuid
        req.needs_prefill = True

    def submit(self, req):
        """Queue a new request, then place whatever FCFS allows."""
        if req.state is not RequestState.QUEUED:
            raise ValueError(f"submit of non-queued {req}")
        self._enqueue(req)
        return self.drain_queue()

    def drain_queue(self):
        """Place queued requests in admission order; stop at the first that does not fit."""
        placed = []
        while True:
            req = self._head()
            if req is None:
                break
            gpu = self.place(req)
            if gpu is None:
                break
            heapq.heappop(self._heap)
            del self._queued[req.id]
            self._assign(req, gpu)
            placed.append((req, gpu))
        return placed

    # completion, eviction, cancellation

    def finish(self, req):
        gpu = self.by_uuid[req.gpu]
        gpu.remove(req)
        gpu.kv.release(req.id)
        req.state = RequestState.FINISHED
        req.gpu = None

    def on_oom(self, gpu, rid, new_tokens=1):
        """Evict newest requests from ``gpu`` until ``rid`` can grow by ``new_tokens``.

        Evicted requests release their pages now and re-enter the queue with
        their generated tokens folded into the next prefill. Returns the
        evicted requests, newest first.
        """
        evicted = []
        while True:
            victim = gpu.working_set[max(gpu.working_set)]
            gpu.remove(victim)
            gpu.kv.release(victim.id)
            victim.migrations += 1
            self.migrations += 1
            self._enqueue(victim)
            evicted.append(victim)
            if victim.id == rid or gpu.kv.extend(rid, new_tokens):
                return evicted

    def cancel(self, req):
        """Remove a request; pages return once the GPU's in-flight step ends."""
        if req.done:
            return
        if req.state is RequestState.QUEUED:
            del self._queued[req.id]
            req.state = RequestState.CANCELLED
            return
        if req.state is RequestState.MIGRATING:
            gpu = self.by_uuid[req.gpu]
            gpu.pending = [(r, rs and r is not req) for r, rs in gpu.pending]
            req.state = RequestState.CANCELLED
            return
        self._detach(req, resubmit=False)

    def migrate(self, req):
        """Cancel on the current GPU and resubmit with recomputation."""
        if req.state is not RequestState.RUNNING:
            return
        self._detach(req, resubmit=True)

    def _detach(self, req, resubmit):
        gpu = self.by_uuid[req.gpu]
        gpu.remove(req)
        req.state = RequestState.MIGRATING if resubmit else RequestState.CANCELLED
        gpu.pending.append((req, resubmit))
        if not gpu.busy:
            self.deliver(gpu)

    def deliver(self, gpu):
        """Apply pending cancellations on ``gpu``; returns the affected requests."""
        out = []
        for req, resubmit in gpu.pending:
            gpu.kv.release(req.id)
            if resubmit:
                req.migrations += 1
                self.migrations += 1
                self._enqueue(req)
            else:
                req.gpu = None
            out.append(req)
        gpu.pending = []
        return out

    def scaling_signal(self):
        sizes = [len(g.working_set) for g in self.gpus]
        if sizes and all(s >= self.lightly_loaded_threshold for s in sizes):
            return ScalingSignal("need_more")
        idle = tuple(g.uuid for g in self.gpus if not g.working_set)
        if idle:
            return ScalingSignal("can_release", idle)
        return ScalingSignal("steady")
