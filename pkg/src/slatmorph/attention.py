"""Single-head attention kernels used by the morphing processors.

All functions take 2-D float arrays (tokens x features) and are pure.
Blending kernels return the plain attention result untouched at the blend
endpoints (weight 0 or 1), so endpoint frames reproduce un-morphed
generations bit for bit.
"""

from __future__ import annotations

import math

import numpy as np


def _matrix(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D token matrix, got shape {a.shape}")
    return a


def _check_qk(Q, K):
    Q = _matrix("Q", Q)
    K = _matrix("K", K)
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"key dimension mismatch: Q has {Q.shape[1]} columns, K has {K.shape[1]}")
    return Q, K


def _check_kv(K, V, tag=""):
    V = _matrix("V" + tag, V)
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"token count mismatch: K{tag} has {K.shape[0]} rows, V{tag} has {V.shape[0]}")
    return V


def _weight(name, w):
    w = float(w)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {w}")
    return w


def attention_map(Q, K) -> np.ndarray:
    """Row-stochastic matrix ``softmax(Q Kᵀ / sqrt(d_k))``."""
    Q, K = _check_qk(Q, K)
    s = (Q @ K.T) / math.sqrt(K.shape[1])
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def attention(Q, K, V) -> np.ndarray:
    Q, K = _check_qk(Q, K)
    V = _check_kv(K, V)
    return attention_map(Q, K) @ V


def kv_fused_attention(Q, K_src, V_src, K_tgt, V_tgt, alpha) -> np.ndarray:
    """Attention against linearly blended keys and values.

    Source and target token grids must be aligned (same shapes).
    """
    alpha = _weight("alpha", alpha)
    K_src, K_tgt = _matrix("K_src", K_src), _matrix("K_tgt", K_tgt)
    V_src, V_tgt = _matrix("V_src", V_src), _matrix("V_tgt", V_tgt)
    if K_src.shape != K_tgt.shape:
        raise ValueError(f"K_src {K_src.shape} and K_tgt {K_tgt.shape} must have the same shape")
    if V_src.shape != V_tgt.shape:
        raise ValueError(f"V_src {V_src.shape} and V_tgt {V_tgt.shape} must have the same shape")
    if alpha == 0.0:
        return attention(Q, K_src, V_src)
    if alpha == 1.0:
        return attention(Q, K_tgt, V_tgt)
    K = (1.0 - alpha) * K_src + alpha * K_tgt
    V = (1.0 - alpha) * V_src + alpha * V_tgt
    return attention(Q, K, V)


def _blend_outputs(Q, K_a, V_a, K_b, V_b, w, name):
    w = _weight(name, w)
    Q, K_a = _check_qk(Q, K_a)
    _, K_b = _check_qk(Q, K_b)
    V_a = _check_kv(K_a, V_a, "_a")
    V_b = _check_kv(K_b, V_b, "_b")
    if V_a.shape[1] != V_b.shape[1]:
        raise ValueError(f"value dimension mismatch: {V_a.shape[1]} vs {V_b.shape[1]}")
    if w == 0.0:
        return attention(Q, K_a, V_a)
    if w == 1.0:
        return attention(Q, K_b, V_b)
    return (1.0 - w) * attention(Q, K_a, V_a) + w * attention(Q, K_b, V_b)


def morphing_cross_attention(Q, K_src, V_src, K_tgt, V_tgt, alpha) -> np.ndarray:
    """Convex blend of two separately computed attention outputs.

    Unlike :func:`kv_fused_attention`, source and target may hold different
    token counts; only the value width has to agree.
    """
    return _blend_outputs(Q, K_src, V_src, K_tgt, V_tgt, alpha, "alpha")


def temporal_fused_self_attention(Q, K_n, V_n, K_prev, V_prev, beta=0.2) -> np.ndarray:
    """Self-attention of the current frame blended with attention against the
    previous frame's keys and values (weight ``beta``)."""
    return _blend_outputs(Q, K_n, V_n, K_prev, V_prev, beta, "beta")


def split_heads(X: np.ndarray, heads: int) -> list[np.ndarray]:
    if X.shape[1] % heads:
        raise ValueError(f"width {X.shape[1]} not divisible by {heads} heads")
    return np.split(X, heads, axis=1)


def multi_head(kernel, heads: int, Q, *kv, **kwargs) -> np.ndarray:
    """Apply a single-head ``kernel`` per head and concatenate the outputs.

    ``kv`` are the kernel's remaining matrix arguments, each split the same
    way as ``Q``; scalar keyword arguments are passed through.
    """
    parts = [split_heads(np.asarray(m, dtype=np.float64), heads) for m in (Q, *kv)]
    outs = [kernel(*(p[h] for p in parts), **kwargs) for h in range(heads)]
    return np.concatenate(outs, axis=1)
