"""Output heads mapping a raw network output to K quantile predictions.

All heads are vectorized: ``raw`` may be one output vector or a batch of
shape ``(n, width)``; the returned quantiles have shape ``(K,)`` or ``(n, K)``.

Head kinds and raw widths:

========== ========= =====================================================
kind       width     construction
========== ========= =====================================================
NQ_ELU     K + 1     mean ``v`` plus gaps ``elu(g) + 1``
NQ_RELU    K + 1     same, gaps ``relu(g)``
DQR        K         identity, no ordering
DQR_STAR   K         lowest quantile plus cumulative ``softplus`` gaps
NCQRDQN    K + 2     ``beta + relu(alpha) * cumsum(softmax(phi))``
========== ========= =====================================================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NQ_ELU = "NQ_ELU"
NQ_RELU = "NQ_RELU"
DQR = "DQR"
DQR_STAR = "DQR_STAR"
NCQRDQN = "NCQRDQN"

HEAD_KINDS = (NQ_ELU, NQ_RELU, DQR, DQR_STAR, NCQRDQN)

_EXTRA_WIDTH = {NQ_ELU: 1, NQ_RELU: 1, DQR: 0, DQR_STAR: 0, NCQRDQN: 2}


def check_kind(kind: str) -> str:
    if kind not in _EXTRA_WIDTH:
        raise ValueError(f"unknown head kind {kind!r}; expected one of {', '.join(HEAD_KINDS)}")
    return kind


def raw_width(kind: str, K: int) -> int:
    """Number of raw network outputs the head consumes for K quantiles."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return K + _EXTRA_WIDTH[check_kind(kind)]


def default_levels(K: int) -> np.ndarray:
    """Equally spaced levels k / (K + 1), k = 1..K."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return np.arange(1, K + 1) / (K + 1)


def check_levels(taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64)
    if taus.ndim != 1 or taus.size < 1:
        raise ValueError("quantile levels must be a non-empty vector")
    if not (np.all(taus > 0) and np.all(taus < 1)):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("quantile levels must be strictly increasing")
    return taus


# elementwise activations -----------------------------------------------------

def elu_plus_one(x):
    """ELU(x) + 1: x + 1 for x >= 0 and exp(x) for x < 0; always positive."""
    x = np.asarray(x, dtype=np.float64)
    # exp is only evaluated on the negative branch so it cannot overflow
    out = np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    return out[()] if out.ndim == 0 else out


def elu_plus_one_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0.0).astype(np.float64)


# fan container ---------------------------------------------------------------

@dataclass
class QuantileFan:
    """K ordered quantile predictions plus the raw head inputs behind them.

    ``v``, ``g`` and ``sigma_g`` are populated for the NQ heads only; ``raw``
    always holds the full raw vector so every head can be differentiated.
    Arrays carry a leading batch axis; ``batched`` records whether the caller
    passed one.
    """

    kind: str
    f: np.ndarray
    raw: np.ndarray
    v: np.ndarray | None = None
    g: np.ndarray | None = None
    sigma_g: np.ndarray | None = None
    batched: bool = True

    @property
    def K(self) -> int:
        return self.f.shape[-1]

    @property
    def quantiles(self) -> np.ndarray:
        return self.f if self.batched else self.f[0]


def _as_batch(raw, width: int | None = None) -> tuple[np.ndarray, bool]:
    raw = np.asarray(raw, dtype=np.float64)
    batched = raw.ndim == 2
    if raw.ndim == 1:
        raw = raw[None, :]
    if raw.ndim != 2:
        raise ValueError(f"raw output must be 1-D or 2-D, got shape {raw.shape}")
    if width is not None and raw.shape[1] != width:
        raise ValueError(f"raw output width {raw.shape[1]} != expected {width}")
    return raw, batched


def strictly_increasing(f: np.ndarray) -> np.ndarray:
    """Raise each entry to at least one ulp above its left neighbour, row by row.

    Gaps far below the ulp of the quantiles themselves would otherwise round
    away to exact ties.
    """
    d = np.diff(f, axis=1)
    if np.all(d > 0):
        return f
    f = f.copy()
    for k in range(1, f.shape[1]):
        f[:, k] = np.maximum(f[:, k], np.nextafter(f[:, k - 1], np.inf))
    return f


# NQ head ---------------------------------------------------------------------

def nq_forward(v, g, activation: str = "elu") -> QuantileFan:
    """Non-crossing head: f_k = v - gbar + sum_{i<=k} sigma(g_i).

    ``gbar = (1/K) sum_j (K + 1 - j) sigma(g_j)`` centres the fan so that the
    average of the K outputs is exactly ``v`` and consecutive outputs differ
    by ``sigma(g_{k+1})``. With ``activation="relu"`` sigma is ReLU (gaps may
    collapse to zero).
    """
    g_arr = np.asarray(g, dtype=np.float64)
    batched = g_arr.ndim == 2
    g2 = g_arr if batched else g_arr[None, :]
    v2 = np.asarray(v, dtype=np.float64).reshape(-1)
    if g2.ndim != 2 or g2.shape[1] < 1:
        raise ValueError("g must be a non-empty vector or batch of vectors")
    if v2.shape[0] != g2.shape[0]:
        raise ValueError(f"got {v2.shape[0]} means for {g2.shape[0]} gap vectors")
    K = g2.shape[1]
    if activation == "elu":
        kind, sig = NQ_ELU, elu_plus_one(g2)
    elif activation == "relu":
        kind, sig = NQ_RELU, _relu(g2)
    else:
        raise ValueError(f"unknown gap activation {activation!r}")
    weights = (K + 1 - np.arange(1, K + 1)) / K
    gbar = sig @ weights
    f = (v2 - gbar)[:, None] + np.cumsum(sig, axis=1)
    if kind == NQ_ELU:
        f = strictly_increasing(f)
    raw = np.concatenate([v2[:, None], g2], axis=1)
    return QuantileFan(kind, f, raw, v2, g2, sig, batched)


def nq_backward(fan: QuantileFan, dL_df) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dL/dv, dL/dg) through the NQ head."""
    if fan.kind not in (NQ_ELU, NQ_RELU):
        raise ValueError(f"nq_backward needs an NQ fan, got {fan.kind}")
    d = np.asarray(dL_df, dtype=np.float64)
    if not fan.batched:
        d = d[None, :] if d.ndim == 1 else d
    if d.shape != fan.f.shape:
        raise ValueError(f"gradient shape {np.shape(dL_df)} does not match fan shape")
    K = fan.K
    dv = d.sum(axis=1)
    # df_k / dsigma_i = 1{i <= k} - (K + 1 - i) / K
    tail = np.cumsum(d[:, ::-1], axis=1)[:, ::-1]
    weights = (K + 1 - np.arange(1, K + 1)) / K
    dsig = tail - dv[:, None] * weights
    dsig_dg = elu_plus_one_grad(fan.g) if fan.kind == NQ_ELU else _relu_grad(fan.g)
    dg = dsig * dsig_dg
    if not fan.batched:
        return dv[0], dg[0]
    return dv, dg


# all heads -------------------------------------------------------------------

def head_forward(kind: str, raw) -> QuantileFan:
    """Apply head ``kind`` to raw network output(s)."""
    check_kind(kind)
    raw2, batched = _as_batch(raw)
    width = raw2.shape[1]
    K = width - _EXTRA_WIDTH[kind]
    if K < 1:
        raise ValueError(f"raw width {width} too small for head {kind}")
    if kind in (NQ_ELU, NQ_RELU):
        fan = nq_forward(raw2[:, 0], raw2[:, 1:], "elu" if kind == NQ_ELU else "relu")
        fan.batched = batched
        return fan
    if kind == DQR:
        f = raw2.copy()
    elif kind == DQR_STAR:
        f = raw2[:, :1] + np.concatenate(
            [np.zeros((raw2.shape[0], 1)), np.cumsum(softplus(raw2[:, 1:]), axis=1)], axis=1)
    else:
        alpha, beta, phi = raw2[:, 0], raw2[:, 1], raw2[:, 2:]
        p = np.exp(phi - phi.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        f = beta[:, None] + _relu(alpha)[:, None] * np.cumsum(p, axis=1)
    return QuantileFan(kind, f, raw2, batched=batched)


baseline_forward = head_forward


def head_backward(fan: QuantileFan, dL_df) -> np.ndarray:
    """Gradient of the loss w.r.t. the raw head input (same shape as ``fan.raw``)."""
    d = np.asarray(dL_df, dtype=np.float64)
    if not fan.batched and d.ndim == 1:
        d = d[None, :]
    if d.shape != fan.f.shape:
        raise ValueError(f"gradient shape {np.shape(dL_df)} does not match fan shape {fan.f.shape}")
    raw = fan.raw
    if fan.kind in (NQ_ELU, NQ_RELU):
        dv, dg = nq_backward(QuantileFan(fan.kind, fan.f, raw, fan.v, fan.g, fan.sigma_g, True), d)
        out = np.concatenate([dv[:, None], dg], axis=1)
    elif fan.kind == DQR:
        out = d.copy()
    elif fan.kind == DQR_STAR:
        tail = np.cumsum(d[:, ::-1], axis=1)[:, ::-1]
        out = np.concatenate([tail[:, :1], tail[:, 1:] * sigmoid(raw[:, 1:])], axis=1)
    else:
        alpha, phi = raw[:, 0], raw[:, 2:]
        p = np.exp(phi - phi.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        c = np.cumsum(p, axis=1)
        dbeta = d.sum(axis=1)
        dalpha = _relu_grad(alpha) * (d * c).sum(axis=1)
        dp = _relu(alpha)[:, None] * np.cumsum(d[:, ::-1], axis=1)[:, ::-1]
        dphi = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        out = np.concatenate([dalpha[:, None], dbeta[:, None], dphi], axis=1)
    return out if fan.batched else out[0]


def crossing_mask(f) -> np.ndarray:
    """True for every row with at least one strictly decreasing adjacent pair."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    return np.any(np.diff(f, axis=1) < 0, axis=1)
