"""Pure numpy implementations of the adapter hot kernels.

Shapes: ``W0`` d x k; ``B`` NB x d x r and ``A`` NA x r x k with NB, NA in
{1, N} (1 means shared by all speakers); ``m`` N x k or None; ``G`` N x d x k.
Reductions over speakers always run in speaker order 0..N-1.
"""

import numpy as np

NAME = "python"


def column_norms(v):
    return np.sqrt(np.einsum("ndk,ndk->nk", v, v))


def _per_speaker(x, n):
    return x if x.shape[0] == n else np.broadcast_to(x, (n,) + x.shape[1:])


def merge_forward(w0, b, a, m, alpha, n, normalize):
    v = w0[None] + alpha * np.matmul(_per_speaker(b, n), _per_speaker(a, n))
    if m is None:
        return v, v, None
    if normalize:
        norms = column_norms(v)
        # scale = m/||v|| first so that m == ||v|| gives exactly 1.0
        return v * (m / norms)[:, None, :], v, norms
    return v * m[:, None, :], v, None


def _reduce_speakers(full, shared):
    if not shared:
        return full
    out = full[0].copy()
    for i in range(1, full.shape[0]):
        out += full[i]
    return out[None]


def merge_backward(g, v, norms, b, a, m, alpha, normalize, detach, need_db):
    n = g.shape[0]
    dm = None
    if m is None:
        dv = g
    elif normalize:
        vhat = v / norms[:, None, :]
        dm = np.einsum("ndk,ndk->nk", g, vhat)
        coef = (m / norms)[:, None, :]
        dv = coef * g if detach else coef * (g - dm[:, None, :] * vhat)
    else:
        dm = np.einsum("ndk,ndk->nk", g, v)
        dv = m[:, None, :] * g
    bb = _per_speaker(b, n)
    da = _reduce_speakers(alpha * np.matmul(bb.transpose(0, 2, 1), dv), a.shape[0] == 1 and n > 1)
    db = None
    if need_db:
        aa = _per_speaker(a, n)
        db = _reduce_speakers(alpha * np.matmul(dv, aa.transpose(0, 2, 1)), b.shape[0] == 1 and n > 1)
    return db, da, dm
