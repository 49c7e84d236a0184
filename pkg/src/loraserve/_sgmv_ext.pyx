# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled segmented matmul core.

One dgemm per segment; the segment loop runs in C so Distinct-style batches
(many one-row segments) do not pay Python call overhead per segment.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def segmented_matmul(const double[:, ::1] x, const cnp.int64_t[::1] seg,
                     const double[:, :, ::1] w):
    """out[seg[i]:seg[i+1]] = x[seg[i]:seg[i+1]] @ w[i] for every segment i."""
    cdef Py_ssize_t n = seg.shape[0] - 1
    cdef int h_in = <int>w.shape[1]
    cdef int h_out = <int>w.shape[2]
    out_arr = np.zeros((x.shape[0], h_out), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double alpha = 1.0
    cdef double beta = 0.0
    cdef char trans = b'N'
    cdef int rows
    cdef Py_ssize_t i, lo
    if x.shape[0] == 0 or h_out == 0:
        return out_arr
    # row-major (rows x h_in) @ (h_in x h_out) is column-major
    # (h_out x h_in) @ (h_in x rows); no copies needed
    with nogil:
        for i in range(n):
            lo = seg[i]
            rows = <int>(seg[i + 1] - lo)
            if rows <= 0:
                continue
            dgemm(&trans, &trans, &h_out, &rows, &h_in, &alpha,
                  <double*>&w[i, 0, 0], &h_out,
                  <double*>&x[lo, 0], &h_in,
                  &beta, &out[lo, 0], &h_out)
    return out_arr
