"""Roofline latency model for SGMV kernels, decode steps and adapter loads.

All simulated time is derived from here. Defaults live in ``defaults.yaml``
under ``cost_model``; ``fit_step_anchors`` refits the two free step-level
coefficients against measured (batch, context, latency) points.
"""
import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class CostParams:
    peak_flops: float
    mem_bw: float
    kernel_overhead: float
    step_kernel_overhead: float
    layer_overhead: float
    pcie_bw: float
    elem_bytes: int
    layers: int
    attn_coeff: float
    proj_coeff: float
    hidden_dim: int
    ffn_dim: int
    lora_rank: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ValueError(f"cost_model.{f.name} must be positive, got {v}")
        if self.elem_bytes not in (2, 4):
            raise ValueError(f"cost_model.elem_bytes must be 2 or 4, got {self.elem_bytes}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def projection_dims(self):
        """(h_in, h_out) of the 7 LoRA-adapted projections: Q, K, V, O, gate, up, down."""
        h, f = self.hidden_dim, self.ffn_dim
        return [(h, h)] * 4 + [(h, f), (h, f), (f, h)]

    @property
    def layer_weight_params(self):
        return sum(a * b for a, b in self.projection_dims())

    @property
    def adapter_layer_bytes(self):
        r = self.lora_rank
        return sum(r * (a + b) for a, b in self.projection_dims()) * self.elem_bytes


def default_cost_params():
    from loraserve.config import default_config
    return CostParams.from_dict(default_config()["cost_model"])


@dataclass(frozen=True)
class SgmvShape:
    n: int
    s_n: int
    h_in: int
    h_out: int

    def __post_init__(self):
        if self.n < 0 or self.s_n < 0 or self.h_in < 1 or self.h_out < 1:
            raise ValueError(f"invalid shape {self}")
        if self.s_n and not (1 <= self.n <= self.s_n):
            raise ValueError(f"need 1 <= n <= s_n, got n={self.n}, s_n={self.s_n}")


def sgmv_flop(shape):
    return shape.s_n * shape.h_in * shape.h_out * 2


def sgmv_io_bytes(shape, elem_bytes=2):
    return (shape.s_n * (shape.h_in + shape.h_out) + shape.n * shape.h_in * shape.h_out) * elem_bytes


def arithmetic_intensity(shape, elem_bytes=2):
    io = sgmv_io_bytes(shape, elem_bytes)
    if io == 0:
        raise ValueError("arithmetic intensity undefined for zero I/O")
    return sgmv_flop(shape) / io


def gather_bmm_extra_elements(shape):
    # gather writes s_n weight copies, bmm reads them back
    return shape.s_n * shape.h_in * shape.h_out * 2


def gather_bmm_extra_io(shape, elem_bytes=2):
    return gather_bmm_extra_elements(shape) * elem_bytes


def sgmv_latency(shape, params, overhead=None):
    """Roofline time: slowest of compute, memory traffic and the launch floor."""
    floor = params.kernel_overhead if overhead is None else overhead
    return max(
        sgmv_flop(shape) / params.peak_flops,
        sgmv_io_bytes(shape, params.elem_bytes) / params.mem_bw,
        floor,
    )


class StepRow(NamedTuple):
    seq_len: int      # tokens already in this request's KvCache
    is_prefill: bool
    prompt_len: int   # rows contributed by a prefill


def _rows_and_context(batch):
    rows = 0
    ctx = 0
    prefill_sq = 0
    for seq_len, is_prefill, prompt_len in batch:
        if is_prefill:
            rows += prompt_len
            ctx += prompt_len
            prefill_sq += prompt_len * prompt_len
        else:
            rows += 1
            ctx += seq_len + 1
    return rows, ctx, prefill_sq


def _layer_fixed(rows, n_models, prefill_sq, params):
    """Per-layer time excluding layer_overhead and the attn_coeff term."""
    proj = max(
        2 * rows * params.layer_weight_params * params.proj_coeff,
        params.layer_weight_params * params.elem_bytes / params.mem_bw,
    )
    # causal prefill attention is compute bound: QK^T and PV over half the square
    prefill_attn = 2 * prefill_sq * params.hidden_dim * params.proj_coeff
    lora = 0.0
    r = params.lora_rank
    for h_in, h_out in params.projection_dims():
        lora += sgmv_latency(SgmvShape(n_models, rows, h_in, r), params, params.step_kernel_overhead)
        lora += sgmv_latency(SgmvShape(n_models, rows, r, h_out), params, params.step_kernel_overhead)
    return proj + prefill_attn + lora


def decode_step_latency(batch, params, num_models=None):
    """Latency of one batched model invocation.

    ``batch`` is a sequence of ``(seq_len, is_prefill, prompt_len)``. Decode
    rows attend over ``seq_len + 1`` positions; a prefill contributes
    ``prompt_len`` rows. ``num_models`` is the number of distinct adapters
    in the batch and defaults to one per request.
    """
    if not batch:
        raise ValueError("empty batch")
    rows, ctx, prefill_sq = _rows_and_context(batch)
    n = len(batch) if num_models is None else num_models
    n = max(1, min(n, rows))
    per_layer = (_layer_fixed(rows, n, prefill_sq, params)
                 + params.layer_overhead + params.attn_coeff * ctx)
    return params.layers * per_layer


def adapter_load_latency(num_layers, params):
    if num_layers < 0:
        raise ValueError("negative layer count")
    return num_layers * params.adapter_layer_bytes / params.pcie_bw


def uniform_decode_batch(batch_size, seq_len):
    return [StepRow(seq_len, False, 0)] * batch_size


def fit_step_anchors(params, anchors):
    """Least-squares fit of layer_overhead and attn_coeff in relative error.

    ``anchors`` holds ``(batch_size, seq_len, seconds)`` for pure decode
    batches with one adapter per request. The model is linear in both
    coefficients, so the fit is a 2-column lstsq.
    """
    rows_a, rhs = [], []
    for bs, seq, target in anchors:
        batch = uniform_decode_batch(bs, seq)
        rows, ctx, psq = _rows_and_context(batch)
        fixed = params.layers * _layer_fixed(rows, min(bs, rows), psq, params)
        rows_a.append([params.layers / target, params.layers * ctx / target])
        rhs.append((target - fixed) / target)
    (overhead, coeff), *_ = np.linalg.lstsq(np.array(rows_a), np.array(rhs), rcond=None)
    if overhead <= 0 or coeff <= 0:
        raise ValueError(f"anchors imply non-physical coefficients ({overhead}, {coeff})")
    return replace(params, layer_overhead=float(overhead), attn_coeff=float(coeff))


def models_for_distribution(distribution, s_n, alpha=1.5):
    """Adapter count for a batch of s_n rows under a popularity distribution."""
    if s_n == 0:
        return 0
    if distribution == "distinct":
        return s_n
    if distribution == "identical":
        return 1
    if distribution == "uniform":
        return math.ceil(math.sqrt(s_n))
    if distribution == "skewed":
        from loraserve.workload import zipf_model_count
        return min(s_n, zipf_model_count(s_n, alpha))
    raise ValueError(f"unknown distribution {distribution!r}")
