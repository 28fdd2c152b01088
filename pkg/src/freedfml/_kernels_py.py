"""Pure-numpy reference kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
baseline in ``benchmarks/bench_kernels.py``.  Every function here has a
twin with an identical signature in ``_ckernels.pyx``.
"""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_fwd_bwd(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    b = logits.shape[0]
    lsm = log_softmax_rows(logits)
    rows = np.arange(b)
    loss = -lsm[rows, labels].sum() / b
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def kl_rows(p_logits, q_logits):
    """Per-row KL(softmax(p) || softmax(q)) plus the cached log-softmaxes."""
    lp = log_softmax_rows(p_logits)
    lq = log_softmax_rows(q_logits)
    p = np.exp(lp)
    return (p * (lp - lq)).sum(axis=1), lp, lq


def kl_grads(lp, lq, weights):
    """Gradients of sum_j weights[j] * KL_j w.r.t. both logit arrays."""
    p = np.exp(lp)
    q = np.exp(lq)
    d = lp - lq
    inner = (p * d).sum(axis=1, keepdims=True)
    w = weights[:, None]
    gp = w * p * (d - inner)
    gq = w * (q - p)
    return gp, gq


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in bytes(data):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h
