"""Weight binarizers: hard sign with straight-through backward, scaled sign,
soft tanh, and the hook for the meta-quantizer.

Each binarized layer keeps full-precision shadow weights W and produces
soft or hard binarized weights W_q from them every forward pass:

  * sign_ste:  W_q = sign(W), clipped straight-through backward, scale 1.
  * xnor:      W_q = scale * sign(W) with scale = mean |W| (per output
               filter by default, layer-wide behind a switch).
  * tanh:      W_q = tanh(W), fully differentiable.
  * quantnet:  W_q = meta-network(W), fully differentiable (see quantnet.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from bqf import tensor as T
from bqf.tensor import Tensor


class BinarizerKind(Enum):
    SignSTE = "sign_ste"
    XnorScaled = "xnor"
    SelfBinarizingTanh = "tanh"
    QuantNetMeta = "quantnet"


def sign_binarize(w: Tensor) -> Tensor:
    """Elementwise sign into {-1, +1} with sign(0) = +1 (no gradient)."""
    return T.sign(w)


def ste_backward(upstream: np.ndarray, w: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Clipped straight-through rule: pass upstream where |w| <= threshold, else 0."""
    upstream = np.asarray(upstream)
    w = np.asarray(w)
    if upstream.shape != w.shape:
        raise T.ShapeError(f"ste_backward: shapes {upstream.shape} != {w.shape}")
    return upstream * (np.abs(w) <= threshold)


def xnor_scale(w: Tensor) -> Tensor:
    """Mean absolute value of w (non-negative, absolutely homogeneous)."""
    if w.size == 0:
        raise T.ShapeError("xnor_scale: empty weights")
    return T.abs_(w).mean()


def _xnor_scale_per_filter(w: Tensor) -> Tensor:
    """Mean |w| per output filter: last axis indexes filters for both
    (k, k, m, n) convolution kernels and (in, out) dense weights."""
    axes = tuple(range(w.data.ndim - 1))
    keep = T.abs_(w).mean(axis=axes, keepdims=True)
    return keep


def tanh_soft_binarize(w: Tensor) -> Tensor:
    """Soft binarization: elementwise tanh, range (-1, +1), differentiable."""
    return T.tanh(w)


@dataclass
class BinarizedLayerState:
    """Shadow weights plus everything needed to (re)binarize one layer."""

    W: Tensor                      # full-precision shadow weights (leaf)
    kind: BinarizerKind
    meta: object | None = None     # quantizer with .forward(W) -> W_q
    per_filter_scale: bool = True  # xnor: one scale per output filter
    ste_threshold: float = 1.0
    scale: np.ndarray | float = 1.0          # last computed scale factor(s)
    W_q: Tensor | None = field(default=None, repr=False)  # last binarized weights

    def binarized_values(self) -> np.ndarray:
        if self.W_q is None:
            binarize_weights(self)
        return self.W_q.data


def binarize_weights(state: BinarizedLayerState, update_running: bool = False) -> Tensor:
    """Produce W_q from the shadow weights, caching it and the scale."""
    if T.is_checked() and not np.all(np.isfinite(state.W.data)):
        raise T.DomainError("binarize_weights: non-finite shadow weights")
    kind = state.kind
    if kind is BinarizerKind.SignSTE:
        wq = T.sign_ste(state.W, threshold=state.ste_threshold)
        state.scale = 1.0
    elif kind is BinarizerKind.XnorScaled:
        s = _xnor_scale_per_filter(state.W) if state.per_filter_scale else xnor_scale(state.W)
        wq = s * T.sign_ste(state.W, threshold=state.ste_threshold)
        state.scale = np.array(s.data, copy=True)
    elif kind is BinarizerKind.SelfBinarizingTanh:
        wq = tanh_soft_binarize(state.W)
        state.scale = 1.0
    elif kind is BinarizerKind.QuantNetMeta:
        if state.meta is None:
            raise ValueError("binarize_weights: QuantNetMeta requires an attached quantizer")
        wq = state.meta.forward(state.W, update_running=update_running)
        state.scale = 1.0
    else:  # pragma: no cover
        raise ValueError(f"unknown binarizer kind {kind}")
    state.W_q = wq
    return wq


def discretize_values(state: BinarizedLayerState) -> np.ndarray:
    """Fixed-point weights: sign(W_q), times the xnor scale when applicable."""
    wq = state.binarized_values()
    hard = np.where(wq >= 0, 1.0, -1.0).astype(wq.dtype)
    if state.kind is BinarizerKind.XnorScaled:
        hard = hard * np.asarray(state.scale, dtype=wq.dtype)
    return hard
