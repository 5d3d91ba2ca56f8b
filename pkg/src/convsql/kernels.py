"""Hot numeric kernels with numba and pure-numpy twins.

Every kernel is implemented twice with identical semantics; the active set is
picked once at import via :mod:`convsql.backend`. The numba versions fuse the
gather over relation labels with the contraction, so the (N, N, d) relation
tensor is never materialized; the numpy versions materialize it and einsum.

All kernels take and return C-contiguous float arrays (float64 in tests).
"""

import numpy as np

from . import backend

# ---------------------------------------------------------------------------
# numpy reference implementations


def _np_softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(out, grad):
    inner = (grad * out).sum(axis=-1, keepdims=True)
    return out * (grad - inner)


def _np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=-1)
    var = ((x - mean[:, None]) ** 2).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    out = (x - mean[:, None]) * rstd[:, None] * gain[None, :] + bias[None, :]
    return out, mean, rstd


def _np_layernorm_bwd(x, gain, mean, rstd, grad):
    n = x.shape[-1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    ggain = (grad * xhat).sum(axis=0)
    gbias = grad.sum(axis=0)
    gxhat = grad * gain[None, :]
    gx = rstd[:, None] * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return gx, ggain, gbias


def _np_rel_scores_fwd(q, rel, labels):
    # s[i, j] = q[i] . rel[labels[i, j]]
    return np.einsum("id,ijd->ij", q, rel[labels])


def _np_rel_scores_bwd(grad, q, rel, labels):
    gq = np.einsum("ij,ijd->id", grad, rel[labels])
    grel = np.zeros_like(rel)
    np.add.at(grel, labels.reshape(-1), (grad[:, :, None] * q[:, None, :]).reshape(-1, q.shape[1]))
    return gq, grel


def _np_rel_ctx_fwd(e, rel, labels):
    # c[i] = sum_j e[i, j] * rel[labels[i, j]]
    return np.einsum("ij,ijd->id", e, rel[labels])


def _np_rel_ctx_bwd(grad, e, rel, labels):
    ge = np.einsum("id,ijd->ij", grad, rel[labels])
    grel = np.zeros_like(rel)
    np.add.at(grel, labels.reshape(-1), (e[:, :, None] * grad[:, None, :]).reshape(-1, rel.shape[1]))
    return ge, grel


_NUMPY_KERNELS = {
    "softmax_fwd": _np_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "layernorm_fwd": _np_layernorm_fwd,
    "layernorm_bwd": _np_layernorm_bwd,
    "rel_scores_fwd": _np_rel_scores_fwd,
    "rel_scores_bwd": _np_rel_scores_bwd,
    "rel_ctx_fwd": _np_rel_ctx_fwd,
    "rel_ctx_bwd": _np_rel_ctx_bwd,
}

# ---------------------------------------------------------------------------
# numba implementations


def _build_numba_kernels():
    from numba import njit

    opts = dict(cache=True, fastmath=False, nogil=True)

    @njit(**opts)
    def softmax_fwd(x):
        out = np.empty_like(x)
        for r in range(x.shape[0]):
            m = x[r, 0]
            for c in range(1, x.shape[1]):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(x.shape[1]):
                v = np.exp(x[r, c] - m)
                out[r, c] = v
                s += v
            for c in range(x.shape[1]):
                out[r, c] /= s
        return out

    @njit(**opts)
    def softmax_bwd(out, grad):
        gx = np.empty_like(out)
        for r in range(out.shape[0]):
            inner = 0.0
            for c in range(out.shape[1]):
                inner += grad[r, c] * out[r, c]
            for c in range(out.shape[1]):
                gx[r, c] = out[r, c] * (grad[r, c] - inner)
        return gx

    @njit(**opts)
    def layernorm_fwd(x, gain, bias, eps):
        n_rows, n = x.shape
        out = np.empty_like(x)
        mean = np.empty(n_rows, dtype=x.dtype)
        rstd = np.empty(n_rows, dtype=x.dtype)
        for r in range(n_rows):
            m = 0.0
            for c in range(n):
                m += x[r, c]
            m /= n
            v = 0.0
            for c in range(n):
                d = x[r, c] - m
                v += d * d
            v /= n
            rs = 1.0 / np.sqrt(v + eps)
            mean[r] = m
            rstd[r] = rs
            for c in range(n):
                out[r, c] = (x[r, c] - m) * rs * gain[c] + bias[c]
        return out, mean, rstd

    @njit(**opts)
    def layernorm_bwd(x, gain, mean, rstd, grad):
        n_rows, n = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(n, dtype=x.dtype)
        gbias = np.zeros(n, dtype=x.dtype)
        for r in range(n_rows):
            m = mean[r]
            rs = rstd[r]
            s1 = 0.0
            s2 = 0.0
            for c in range(n):
                xhat = (x[r, c] - m) * rs
                gxh = grad[r, c] * gain[c]
                ggain[c] += grad[r, c] * xhat
                gbias[c] += grad[r, c]
                s1 += gxh
                s2 += gxh * xhat
            for c in range(n):
                xhat = (x[r, c] - m) * rs
                gxh = grad[r, c] * gain[c]
                gx[r, c] = rs * (gxh - s1 / n - xhat * s2 / n)
        return gx, ggain, gbias

    @njit(**opts)
    def rel_scores_fwd(q, rel, labels):
        n, d = q.shape
        out = np.empty((n, labels.shape[1]), dtype=q.dtype)
        for i in range(n):
            for j in range(labels.shape[1]):
                acc = 0.0
                lab = labels[i, j]
                for k in range(d):
                    acc += q[i, k] * rel[lab, k]
                out[i, j] = acc
        return out

    @njit(**opts)
    def rel_scores_bwd(grad, q, rel, labels):
        n, d = q.shape
        gq = np.zeros_like(q)
        grel = np.zeros_like(rel)
        for i in range(n):
            for j in range(labels.shape[1]):
                g = grad[i, j]
                lab = labels[i, j]
                for k in range(d):
                    gq[i, k] += g * rel[lab, k]
                    grel[lab, k] += g * q[i, k]
        return gq, grel

    @njit(**opts)
    def rel_ctx_fwd(e, rel, labels):
        n, m = e.shape
        d = rel.shape[1]
        out = np.zeros((n, d), dtype=e.dtype)
        for i in range(n):
            for j in range(m):
                w = e[i, j]
                lab = labels[i, j]
                for k in range(d):
                    out[i, k] += w * rel[lab, k]
        return out

    @njit(**opts)
    def rel_ctx_bwd(grad, e, rel, labels):
        n, m = e.shape
        d = rel.shape[1]
        ge = np.empty_like(e)
        grel = np.zeros_like(rel)
        for i in range(n):
            for j in range(m):
                lab = labels[i, j]
                acc = 0.0
                for k in range(d):
                    acc += grad[i, k] * rel[lab, k]
                    grel[lab, k] += e[i, j] * grad[i, k]
                ge[i, j] = acc
        return ge, grel

    return {
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "layernorm_fwd": layernorm_fwd,
        "layernorm_bwd": layernorm_bwd,
        "rel_scores_fwd": rel_scores_fwd,
        "rel_scores_bwd": rel_scores_bwd,
        "rel_ctx_fwd": rel_ctx_fwd,
        "rel_ctx_bwd": rel_ctx_bwd,
    }


def get_kernels(name: str) -> dict:
    if name == backend.NUMPY:
        return _NUMPY_KERNELS
    if name == backend.NUMBA:
        return _build_numba_kernels()
    raise ValueError(f"unknown backend {name!r}")


_ACTIVE = get_kernels(backend.ACTIVE)

softmax_fwd = _ACTIVE["softmax_fwd"]
softmax_bwd = _ACTIVE["softmax_bwd"]
layernorm_fwd = _ACTIVE["layernorm_fwd"]
layernorm_bwd = _ACTIVE["layernorm_bwd"]
rel_scores_fwd = _ACTIVE["rel_scores_fwd"]
rel_scores_bwd = _ACTIVE["rel_scores_bwd"]
rel_ctx_fwd = _ACTIVE["rel_ctx_fwd"]
rel_ctx_bwd = _ACTIVE["rel_ctx_bwd"]
