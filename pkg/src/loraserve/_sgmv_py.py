"""Pure-Python segmented matmul, used when the compiled core is unavailable."""
import numpy as np


def segmented_matmul(x, seg, w):
    """out[seg[i]:seg[i+1]] = x[seg[i]:seg[i+1]] @ w[i] for every segment i."""
    out = np.zeros((x.shape[0], w.shape[2]), dtype=np.float64)
    for i in range(len(seg) - 1):
        lo, hi = seg[i], seg[i + 1]
        if hi > lo:
            np.matmul(x[lo:hi], w[i], out=out[lo:hi])
    return out
