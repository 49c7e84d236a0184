"""Segmented gather matrix-vector multiplication (SGMV) for batched LoRA.

A batch holds one input row per token. Rows that use the same adapter are
stored consecutively; ``Segments`` records the boundaries. The LoRA addon
``x @ A @ B`` is computed as two launches of one segmented kernel: a shrink
pass (h1 -> r) followed by an expand pass (r -> h2).

The segmented kernel comes from the compiled extension when it is built and
falls back to a numpy implementation otherwise. Set ``LORASERVE_PURE_PYTHON=1``
to force the fallback. ``lora_loop_oracle`` and ``gather_bmm_oracle`` are
independent implementations used to check the kernel.
"""
import os
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from loraserve import _sgmv_py

try:
    if os.environ.get("LORASERVE_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from loraserve import _sgmv_ext
except ImportError:
    _sgmv_ext = None

BACKEND = "cython" if _sgmv_ext is not None else "python"
_kernel = (_sgmv_ext or _sgmv_py).segmented_matmul


def set_backend(name):
    """Switch the segmented kernel; returns the previous backend name."""
    global BACKEND, _kernel
    if name == "cython" and _sgmv_ext is None:
        raise RuntimeError("compiled extension is not built")
    if name not in ("cython", "python"):
        raise ValueError(f"unknown backend {name!r}")
    prev = BACKEND
    BACKEND = name
    _kernel = (_sgmv_ext if name == "cython" else _sgmv_py).segmented_matmul
    return prev


def available_backends():
    return ["python"] + (["cython"] if _sgmv_ext is not None else [])


class Segments:
    """Boundaries s_0 = 0 < s_1 < ... < s_n of a batch grouped by adapter."""

    __slots__ = ("_b",)

    def __init__(self, boundaries):
        b = np.asarray(boundaries, dtype=np.int64)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("segments need at least the leading 0")
        if b[0] != 0:
            raise ValueError(f"first boundary must be 0, got {b[0]}")
        if b.size > 1 and np.any(np.diff(b) <= 0):
            raise ValueError(f"boundaries must be strictly increasing: {b.tolist()}")
        b.setflags(write=False)
        self._b = b

    @classmethod
    def from_sizes(cls, sizes):
        return cls(np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))]))

    @property
    def boundaries(self):
        return self._b

    @property
    def n(self):
        return self._b.size - 1

    @property
    def total(self):
        return int(self._b[-1])

    def sizes(self):
        return np.diff(self._b)

    def row_model_index(self):
        """Segment index of every row."""
        return np.repeat(np.arange(self.n), self.sizes())

    def __eq__(self, other):
        return isinstance(other, Segments) and np.array_equal(self._b, other._b)

    def __hash__(self):
        return hash(tuple(self._b.tolist()))

    def __repr__(self):
        return f"Segments({self._b.tolist()})"


@dataclass(frozen=True, eq=False)
class LoraModel:
    id: Hashable
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=np.float64)
        B = np.ascontiguousarray(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2:
            raise ValueError("A and B must be matrices")
        h1, r = A.shape
        if B.shape[0] != r:
            raise ValueError(f"A is {A.shape} but B is {B.shape}: inner rank differs")
        h2 = B.shape[1]
        if r < 1 or r > min(h1, h2):
            raise ValueError(f"rank {r} outside [1, min(h1, h2)={min(h1, h2)}]")
        if not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise ValueError("adapter weights must be finite")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self):
        return self.A.shape[1]

    @property
    def h1(self):
        return self.A.shape[0]

    @property
    def h2(self):
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class Batch:
    X: np.ndarray
    segments: Segments
    models: Sequence[LoraModel]

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be a matrix")
        if X.shape[0] != self.segments.total:
            raise ValueError(f"X has {X.shape[0]} rows but segments cover {self.segments.total}")
        if len(self.models) != self.segments.n:
            raise ValueError(f"{len(self.models)} models for {self.segments.n} segments")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "models", tuple(self.models))


def _check_uniform(models):
    if not models:
        return None
    r, h1, h2 = models[0].rank, models[0].h1, models[0].h2
    for m in models[1:]:
        if m.rank != r:
            raise ValueError(f"mixed ranks in batch: {r} and {m.rank}")
        if (m.h1, m.h2) != (h1, h2):
            raise ValueError(f"mixed adapter shapes: {(h1, h2)} and {(m.h1, m.h2)}")
    return r, h1, h2


def _stack(mats):
    return np.ascontiguousarray(np.stack(mats))


def sgmv_shrink(batch):
    """v_j = x_j @ A_i for every row j of segment i."""
    dims = _check_uniform(batch.models)
    if dims is None:
        return np.zeros((0, 0))
    r, h1, _ = dims
    if batch.X.shape[1] != h1:
        raise ValueError(f"X has {batch.X.shape[1]} columns, adapters expect {h1}")
    return _kernel(batch.X, batch.segments.boundaries, _stack([m.A for m in batch.models]))


def sgmv_expand(V, segments, models):
    """y_j = v_j @ B_i for every row j of segment i."""
    V = np.ascontiguousarray(V, dtype=np.float64)
    models = tuple(models)
    if len(models) != segments.n:
        raise ValueError(f"{len(models)} models for {segments.n} segments")
    dims = _check_uniform(models)
    if dims is None:
        if V.shape[0] != 0:
            raise ValueError("rows without segments")
        return np.zeros((0, 0))
    r, _, h2 = dims
    if V.ndim != 2 or V.shape != (segments.total, r):
        raise ValueError(f"V has shape {V.shape}, expected {(segments.total, r)}")
    return _kernel(V, segments.boundaries, _stack([m.B for m in models]))


def lora_addon(batch):
    """Segmented x_j @ A_i @ B_i as a shrink launch followed by an expand launch."""
    if batch.segments.n == 0:
        return np.zeros((0, 0))
    return sgmv_expand(sgmv_shrink(batch), batch.segments, batch.models)


def dense_projection(batch, W):
    """Backbone projection plus the per-segment LoRA addon: X @ W + lora_addon."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != batch.X.shape[1]:
        raise ValueError(f"W has shape {W.shape}, X has {batch.X.shape[1]} columns")
    if batch.models and batch.models[0].h2 != W.shape[1]:
        raise ValueError(f"W outputs {W.shape[1]} features, adapters output {batch.models[0].h2}")
    base = batch.X @ W
    if batch.segments.n:
        base += lora_addon(batch)
    return base


def lora_loop_oracle(batch):
    """For-loop over adapters, then over rows; one vector product at a time."""
    models = batch.models
    if not models:
        return np.zeros((0, 0))
    _check_uniform(models)
    h2 = models[0].h2
    if batch.X.shape[1] != models[0].h1:
        raise ValueError("dimension mismatch between X and A")
    out = np.empty((batch.X.shape[0], h2))
    b = batch.segments.boundaries
    for i, model in enumerate(models):
        for j in range(b[i], b[i + 1]):
            v = np.dot(batch.X[j], model.A)
            out[j] = np.dot(v, model.B)
    return out


def gather_bmm_oracle(batch):
    """Gather one weight copy per row, then batched matmul; twice."""
    models = batch.models
    if not models:
        return np.zeros((0, 0))
    _check_uniform(models)
    if batch.X.shape[1] != models[0].h1:
        raise ValueError("dimension mismatch between X and A")
    idx = batch.segments.row_model_index()
    a_stack = np.stack([m.A for m in models])[idx]   # (s_n, h1, r)
    b_stack = np.stack([m.B for m in models])[idx]   # (s_n, r, h2)
    v = np.matmul(batch.X[:, None, :], a_stack)
    return np.matmul(v, b_stack)[:, 0, :]


def random_batch(rng, sizes, h1, h2, rank, scale=1.0):
    """Batch with one random adapter per segment of the given sizes."""
    segments = Segments.from_sizes(sizes)
    models = [
        LoraModel(i, rng.standard_normal((h1, rank)) * scale, rng.standard_normal((rank, h2)) * scale)
        for i in range(len(sizes))
    ]
    X = rng.standard_normal((segments.total, h1))
    return Batch(X, segments, models)


def batch_to_dict(batch):
    """Plain-data form: dimensions, flat row-major values, segment boundaries."""
    h1 = batch.X.shape[1]
    return {
        "rows": int(batch.X.shape[0]),
        "h1": int(h1),
        "segments": batch.segments.boundaries.tolist(),
        "X": batch.X.ravel().tolist(),
        "models": [
            {
                "id": m.id,
                "rank": m.rank,
                "h2": m.h2,
                "A": m.A.ravel().tolist(),
                "B": m.B.ravel().tolist(),
            }
            for m in batch.models
        ],
    }


def batch_from_dict(doc):
    h1 = doc["h1"]
    X = np.asarray(doc["X"], dtype=np.float64).reshape(doc["rows"], h1)
    models = []
    for m in doc["models"]:
        r, h2 = m["rank"], m["h2"]
        models.append(LoraModel(
            m["id"],
            np.asarray(m["A"], dtype=np.float64).reshape(h1, r),
            np.asarray(m["B"], dtype=np.float64).reshape(r, h2),
        ))
    return Batch(X, Segments(doc["segments"]), models)
