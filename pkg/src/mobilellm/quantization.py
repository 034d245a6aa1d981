"""Simulated W8A8 post-training quantization with per-slice min-max affine maps."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DiffTensor

QMAX = 255


@dataclass
class QuantizedTensor:
    """Unsigned 8-bit payload plus one (scale, zero_point, offset) per slice.

    ``axis`` lists the axes that index slices; min/max are taken over the
    remaining axes. ``offset`` is nonzero only for constant slices, which
    dequantize to exactly that constant, and for slices whose zero point
    would overflow int32, which are shifted by their minimum.
    """

    q: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    offset: np.ndarray
    axis: tuple[int, ...]
    shape: tuple[int, ...]
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def n_slices(self) -> int:
        return int(self.scale.size)

    def _broadcast(self, a: np.ndarray) -> np.ndarray:
        bshape = [self.shape[i] if i in self.axis else 1 for i in range(len(self.shape))]
        return a.reshape(bshape)


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return ()
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def quantize_minmax(x, axis=None) -> QuantizedTensor:
    """Affine uint8 quantization, one range per slice along ``axis``.

    ``axis=None`` treats the whole tensor as one slice; ``axis=0`` on a
    ``[out, in]`` weight gives per-row ranges; ``axis=(0, 1)`` on ``[B, T, d]``
    activations gives per-token ranges.
    """
    arr = x.data if isinstance(x, DiffTensor) else np.asarray(x)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    axes = _norm_axis(axis, arr.ndim)
    reduce = tuple(i for i in range(arr.ndim) if i not in axes)
    a64 = arr.astype(np.float64)
    lo = a64.min(axis=reduce, keepdims=True) if arr.size else np.zeros([1] * arr.ndim)
    hi = a64.max(axis=reduce, keepdims=True) if arr.size else np.zeros([1] * arr.ndim)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        raw_scale = ((hi - lo) / QMAX).astype(dtype).astype(np.float64)
    if not np.all(np.isfinite(raw_scale)):
        raise ValueError("value range too wide to quantize")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        # a range too small to resolve in ``dtype`` is treated as constant
        degenerate = raw_scale == 0
        scale = np.where(degenerate, 1.0, raw_scale)
        zp = np.round(-lo / scale)
    # when -min/scale overflows int32 the slice is shifted by its minimum instead
    shifted = ~degenerate & ~(np.abs(zp) <= np.iinfo(np.int32).max)
    zp = np.where(degenerate | shifted, 0.0, zp)
    offset = np.where(degenerate | shifted, lo, 0.0)
    q = np.clip(np.round((a64 - offset) / scale) + zp, 0, QMAX)
    q = np.where(degenerate, 0, q).astype(np.uint8)
    slice_shape = tuple(arr.shape[i] for i in axes)
    return QuantizedTensor(
        q=q,
        scale=scale.astype(dtype).reshape(slice_shape),
        zero_point=zp.astype(np.int32).reshape(slice_shape),
        offset=offset.astype(dtype).reshape(slice_shape),
        axis=axes,
        shape=tuple(arr.shape),
        dtype=np.dtype(dtype),
    )


def dequantize_array(qt: QuantizedTensor) -> np.ndarray:
    scale = qt._broadcast(qt.scale.astype(np.float64))
    zp = qt._broadcast(qt.zero_point.astype(np.float64))
    off = qt._broadcast(qt.offset.astype(np.float64))
    return ((qt.q.astype(np.float64) - zp) * scale + off).astype(qt.dtype)


def dequantize(qt: QuantizedTensor) -> DiffTensor:
    return DiffTensor(dequantize_array(qt), dtype=qt.dtype)


def fake_quant_array(arr: np.ndarray, axis=None) -> np.ndarray:
    return dequantize_array(quantize_minmax(arr, axis))


def fake_quant_per_token(x: DiffTensor) -> DiffTensor:
    """Quantize-dequantize each position's feature vector; gradient passes straight through."""
    deq = fake_quant_array(x.data, axis=tuple(range(x.ndim - 1)))
    return nx.add_constant(x, deq - x.data)


def quantized_weight_names(model) -> list[str]:
    """Projection and embedding weights (norm scales stay in float)."""
    return [name for name, t in model.named_parameters() if t.ndim == 2]


def ptq_model(model):
    """W8A8-simulated copy of ``model``.

    Every 2-D weight is replaced by its per-row quantize/dequantize image;
    block inputs and FFN inner activations are fake-quantized per token at
    run time. Each physical tensor is quantized once, so tied embeddings and
    shared blocks stay shared. The returned model carries the integer form of
    each weight in ``model.quantized``.
    """
    qmodel = copy.deepcopy(model)
    qmodel.quantized = {}
    params = dict(qmodel.named_parameters())
    for name in quantized_weight_names(qmodel):
        t = params[name]
        qt = quantize_minmax(t.data, axis=0)
        t.data = dequantize_array(qt).astype(t.dtype)
        qmodel.quantized[name] = qt
    qmodel.act_quantizer = fake_quant_per_token
    return qmodel
