"""Deterministic discrete-event simulation of a multi-GPU LoRA serving cluster.

Each GPU runs batched model invocations back to back. A batch mixes at most
one prefill with every decode-ready request; rows are grouped by adapter so
the SGMV segments are contiguous. Step latency comes from the cost model,
placement and migration from the scheduler.
"""
import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from loraserve import costmodel
from loraserve.config import total_pages
from loraserve.costmodel import CostParams, StepRow
from loraserve.kvcache import KvPageConfig
from loraserve.scheduler import GpuState, Request, RequestState, Scheduler
from loraserve.sgmv import Segments
from loraserve.workload import RequestSpec, generate, spec_from_config

# tie-break order at equal timestamps
STEP_COMPLETE, CANCEL, ADAPTER_LOADED, ARRIVAL = range(4)

STEPS_HEADER = ("time", "gpu", "batch_size", "tokens_emitted", "queue_depth")


@dataclass(frozen=True)
class BatchPlan:
    gpu: int
    prefill: Optional[Request]
    decodes: tuple
    segments: Segments
    lora_order: tuple

    @property
    def requests(self):
        return ((self.prefill,) if self.prefill is not None else ()) + self.decodes

    @property
    def batch_size(self):
        return len(self.decodes) + (self.prefill is not None)

    @property
    def rows(self):
        return self.segments.total


def build_batch(gpu, now=math.inf, single_adapter=False):
    """Batch for the next step on ``gpu``; None when nothing is ready.

    Requests whose adapter is still loading sit out. The oldest pending
    prefill goes first, decodes sharing its adapter follow it, then the
    remaining adapter groups in ``lora_id`` order. ``single_adapter`` keeps
    only the adapter group with the most ready requests (oldest wins ties).
    """
    ready = [r for r in gpu.working_set.values() if gpu.loaded_adapters.get(r.lora_id, math.inf) <= now]
    if not ready:
        return None
    ready.sort(key=lambda r: r.id)
    if single_adapter:
        counts = {}
        for r in ready:
            counts[r.lora_id] = counts.get(r.lora_id, 0) + 1
        oldest = {}
        for r in ready:
            oldest.setdefault(r.lora_id, r.id)
        pick = max(counts, key=lambda k: (counts[k], -oldest[k]))
        ready = [r for r in ready if r.lora_id == pick]
    prefill = next((r for r in ready if r.needs_prefill), None)
    groups = {}
    for r in ready:
        if not r.needs_prefill:
            groups.setdefault(r.lora_id, []).append(r)
    order = sorted(groups)
    if prefill is not None and prefill.lora_id in groups:
        order.remove(prefill.lora_id)
        order.insert(0, prefill.lora_id)
    decodes = tuple(r for k in order for r in groups[k])

    sizes, lora_order = [], []
    if prefill is not None:
        sizes.append(prefill.prefill_len)
        lora_order.append(prefill.lora_id)
    for k in order:
        if lora_order and lora_order[-1] == k:
            sizes[-1] += len(groups[k])
        else:
            sizes.append(len(groups[k]))
            lora_order.append(k)
    return BatchPlan(gpu.uuid, prefill, decodes, Segments.from_sizes(sizes), tuple(lora_order))


def plan_latency(plan, gpu, params):
    rows = []
    if plan.prefill is not None:
        rows.append(StepRow(0, True, plan.prefill.prefill_len))
    kv = gpu.kv
    for r in plan.decodes:
        rows.append(StepRow(kv.seq_len(r.id), False, 0))
    return costmodel.decode_step_latency(rows, params, num_models=len(plan.lora_order))


@dataclass
class RequestRecord:
    id: int
    lora_id: int
    prompt_len: int
    target_output_len: int
    arrival_time: float
    emitted: int = 0
    migrations: int = 0
    first_token_time: Optional[float] = None
    finish_time: Optional[float] = None
    state: str = "queued"


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)            # STEPS_HEADER tuples
    token_latencies: list = field(default_factory=list)  # inter-token gaps, seconds
    first_token_latencies: list = field(default_factory=list)
    requests: dict = field(default_factory=dict)         # id -> RequestRecord
    scaling: list = field(default_factory=list)          # (time, kind, gpus)
    migrations: int = 0
    peak_gpus_busy: int = 0
    start_time: float = 0.0
    end_time: float = 0.0
    mode: str = "punica"

    @property
    def total_tokens(self):
        return sum(s[3] for s in self.steps)

    def batch_sizes(self, gpu=None):
        return np.array([s[2] for s in self.steps if s[2] > 0 and (gpu is None or s[1] == gpu)], dtype=np.int64)

    def steps_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEPS_HEADER)
        for t, g, bs, tok, q in self.steps:
            w.writerow((f"{t:.9f}", g, bs, tok, q))
        return buf.getvalue()

    def windowed_throughput(self, window):
        """(window start, tokens/s) over the whole run."""
        if not self.steps:
            return []
        n = int(math.ceil((self.end_time - self.start_time) / window)) or 1
        tok = np.zeros(n)
        for t, _, _, k, _ in self.steps:
            tok[min(n - 1, int((t - self.start_time) // window))] += k
        return [(self.start_time + i * window, tok[i] / window) for i in range(n)]

    def summary(self):
        span = self.end_time - self.start_time
        lat = np.array(self.token_latencies) if self.token_latencies else None
        ttft = np.array(self.first_token_latencies) if self.first_token_latencies else None
        bs = self.batch_sizes()
        states = {}
        for rec in self.requests.values():
            states[rec.state] = states.get(rec.state, 0) + 1

        def pct(a, q):
            return float(np.percentile(a, q)) if a is not None else None

        return {
            "mode": self.mode,
            "requests": len(self.requests),
            "finished": states.get("finished", 0),
            "cancelled": states.get("cancelled", 0),
            "unfinished": len(self.requests) - states.get("finished", 0) - states.get("cancelled", 0),
            "total_tokens": self.total_tokens,
            "duration_s": span,
            "throughput_tok_s": self.total_tokens / span if span > 0 else 0.0,
            "p50_token_latency_s": pct(lat, 50),
            "p99_token_latency_s": pct(lat, 99),
            "p50_first_token_s": pct(ttft, 50),
            "mean_batch_size": float(bs.mean()) if bs.size else 0.0,
            "median_batch_size": float(np.median(bs)) if bs.size else 0.0,
            "steps": int(bs.size),
            "migrations": self.migrations,
            "peak_gpus_busy": self.peak_gpus_busy,
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


class Simulator:
    """One simulation instance; call ``run`` once."""

    def __init__(self, cfg, mode="punica"):
        if mode not in ("punica", "baseline"):
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.params = CostParams.from_dict(cfg["cost_model"])
        kv = cfg["kvcache"]
        self.kv_config = KvPageConfig(kv["page_size"], kv["layers"], kv["kv_heads"],
                                      kv["head_dim"], kv["elem_bytes"], total_pages(cfg))
        sc = cfg["scheduler"]
        self.workload = spec_from_config(cfg["workload"])
        headroom_tokens = sc["headroom_tokens"]
        if headroom_tokens is None:
            headroom_tokens = int(math.ceil(self.workload.lengths.mean_output))
        self.gpus = [GpuState(i, self.kv_config, sc["max_batch"]) for i in range(cfg["cluster"]["gpu_count"])]
        self.scheduler = Scheduler(
            self.gpus,
            headroom_pages=self.kv_config.pages_for(headroom_tokens),
            lightly_loaded_threshold=sc["lightly_loaded_threshold"],
            homogeneous=(mode == "baseline"),
        )
        self.load_latency = costmodel.adapter_load_latency(self.params.layers, self.params)
        self.now = 0.0
        self._events = []
        self._seq = 0
        self._copy_free = {g.uuid: 0.0 for g in self.gpus}
        self._plans = {}
        self._active = set()
        self.requests = {}
        self.log = MetricsLog(mode=mode)

    def _push(self, t, kind, payload):
        self._seq += 1
        heapq.heappush(self._events, (t, kind, self._seq, payload))

    def run(self, requests=None, migrations=(), cancellations=()):
        """Simulate until every event is processed.

        ``requests`` defaults to the configured workload. ``migrations`` and
        ``cancellations`` are ``(time, request_id)`` pairs injected as
        scheduler commands; request ids are arrival indices.
        """
        if requests is None:
            requests = generate(self.workload)
        requests = sorted(requests, key=lambda r: r.arrival_time)
        for i, spec in enumerate(requests):
            self._push(spec.arrival_time, ARRIVAL, (i, spec))
        for t, rid in migrations:
            self._push(t, CANCEL, (rid, True))
        for t, rid in cancellations:
            self._push(t, CANCEL, (rid, False))
        if requests:
            self.log.start_time = requests[0].arrival_time
            self.log.end_time = self.log.start_time
        self._signal = None
        while self._events:
            t, kind, _, payload = heapq.heappop(self._events)
            self.now = t
            if kind == STEP_COMPLETE:
                self._step_complete(self.scheduler.by_uuid[payload])
            elif kind == ARRIVAL:
                self._arrival(*payload)
            elif kind == ADAPTER_LOADED:
                self._maybe_start(self.scheduler.by_uuid[payload])
            else:
                self._cancel(*payload)
            self._record_signal()
        self.log.end_time = max(self.log.end_time, self.now)
        self.log.migrations = self.scheduler.migrations
        for rec in self.log.requests.values():
            rec.state = self.requests[rec.id].state.value
            rec.migrations = self.requests[rec.id].migrations
        return self.log

    # event handlers

    def _arrival(self, rid, spec):
        req = Request(rid, spec.lora_id, spec.prompt_len, spec.output_len, arrival_time=self.now)
        self.requests[rid] = req
        self.log.requests[rid] = RequestRecord(rid, spec.lora_id, spec.prompt_len, spec.output_len, self.now)
        self._placed(self.scheduler.submit(req))

    def _cancel(self, rid, resubmit):
        req = self.requests.get(rid)
        if req is None:
            return
        gpu = self.scheduler.by_uuid.get(req.gpu) if req.gpu is not None else None
        if resubmit:
            self.scheduler.migrate(req)
        else:
            self.scheduler.cancel(req)
        self._placed(self.scheduler.drain_queue())
        if gpu is not None:
            self._maybe_start(gpu)

    def _placed(self, placements):
        for req, gpu in placements:
            ready = gpu.loaded_adapters.get(req.lora_id)
            if ready is None:
                # host-to-device copies on one GPU are serialized
                start = max(self.now, self._copy_free[gpu.uuid])
                ready = start + self.load_latency
                self._copy_free[gpu.uuid] = ready
                gpu.loaded_adapters[req.lora_id] = ready
                self._push(ready, ADAPTER_LOADED, gpu.uuid)
        for gpu in sorted({g.uuid: g for _, g in placements}.values(), key=lambda g: g.uuid):
            self._maybe_start(gpu)

    def _maybe_start(self, gpu):
        if gpu.busy:
            return
        plan = build_batch(gpu, self.now, single_adapter=(self.mode == "baseline"))
        if plan is None:
            if gpu.uuid in self._active:
                self._active.discard(gpu.uuid)
                self.log.steps.append((self.now, gpu.uuid, 0, 0, self.scheduler.queue_depth))
            return
        self._active.add(gpu.uuid)
        self.log.peak_gpus_busy = max(self.log.peak_gpus_busy, len(self._active))
        gpu.busy = True
        self._plans[gpu.uuid] = plan
        self._push(self.now + plan_latency(plan, gpu, self.params), STEP_COMPLETE, gpu.uuid)

    def _step_complete(self, gpu):
        gpu.busy = False
        plan = self._plans.pop(gpu.uuid)
        sched = self.scheduler
        # cancellations received mid-step: pages go back, in-flight tokens are dropped
        sched.deliver(gpu)
        emitted = 0
        for req in sorted(plan.requests, key=lambda r: r.id):
            if req.state is not RequestState.RUNNING or req.gpu != gpu.uuid:
                continue
            if req.needs_prefill:
                req.needs_prefill = False
            elif not gpu.kv.extend(req.id, 1):
                if req in sched.on_oom(gpu, req.id):
                    continue
            self._emit(req)
            emitted += 1
            if req.generated == req.target_output_len:
                sched.finish(req)
                self.log.requests[req.id].finish_time = self.now
        self.log.steps.append((self.now, gpu.uuid, plan.batch_size, emitted, sched.queue_depth))
        self.log.end_time = self.now
        self._placed(sched.drain_queue())
        self._maybe_start(gpu)

    def _emit(self, req):
        req.generated += 1
        rec = self.log.requests[req.id]
        rec.emitted += 1
        if req.last_token_time is None:
            self.log.first_token_latencies.append(self.now - req.arrival_time)
            rec.first_token_time = self.now
        else:
            self.log.token_latencies.append(self.now - req.last_token_time)
        req.last_token_time = self.now

    def _record_signal(self):
        sig = self.scheduler.scaling_signal()
        key = (sig.kind, sig.gpus)
        if key != self._signal:
            self._signal = key
            self.log.scaling.append((self.now, sig.kind, sig.gpus))


def run(cfg, seed=None, mode="punica", **kwargs):
    """Simulate ``cfg``; ``seed`` overrides ``workload.seed``."""
    if seed is not None:
        cfg = dict(cfg, workload=dict(cfg["workload"], seed=seed))
    return Simulator(cfg, mode).run(**kwargs)


def baseline_mode(cfg, seed=None, **kwargs):
    return run(cfg, seed, mode="baseline", **kwargs)


def requests_from_tuples(rows):
    """Build RequestSpec list from (arrival, lora_id, prompt_len, output_len)."""
    return [RequestSpec(float(a), int(l), int(p), int(o)) for a, l, p, o in rows]
