"""Neural-network building blocks on top of the tensor core.

Pointwise and 3x3 convolutions (im2col + GEMM), batch normalization,
half-pixel-center bilinear resize, global average pooling, hard-example-mined
cross entropy, the poly learning-rate schedule, and momentum SGD.

Resize convention, stated exactly: for output index d over ``out`` samples of
an axis with ``in`` samples, the source coordinate is
``s = (d + 0.5) * (in / out) - 0.5`` clamped to ``[0, in - 1]``; the output is
the bilinear blend of the two (per axis) neighbouring samples weighted by the
fractional part of ``s``.  Borders clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _record, log_softmax, mean


# -- convolution --------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights of one convolution: weight [C_out, C_in, k, k], optional bias
    [C_out].  k is 1 or 3; the default padding (k-1)//2 preserves spatial size
    at stride 1."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def conv_params(
    c_in: int,
    c_out: int,
    k: int,
    gen: np.random.Generator,
    stride: int = 1,
    bias: bool = True,
    init: str = "he",
    padding: int | None = None,
) -> ConvParams:
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    fan_in = c_in * k * k
    if init == "he":
        std = math.sqrt(2.0 / fan_in)
        w = gen.standard_normal((c_out, c_in, k, k)) * std
    elif init == "xavier":
        std = math.sqrt(1.0 / fan_in)
        w = gen.standard_normal((c_out, c_in, k, k)) * std
    elif init == "zero":
        w = np.zeros((c_out, c_in, k, k))
    else:
        raise ValueError(f"unknown init {init!r}")
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    pad = (k - 1) // 2 if padding is None else padding
    return ConvParams(
        weight=Tensor(w, requires_grad=True), bias=b, stride=stride, padding=pad
    )


def conv(x: Tensor, p: ConvParams) -> Tensor:
    """2-D convolution, NCHW.  H' = floor((H + 2*pad - k)/stride) + 1."""
    n, c_in, h, w = x.shape
    c_out, c_in_w, k, _ = p.weight.shape
    if c_in != c_in_w:
        raise ValueError(
            f"conv channel mismatch: input has {c_in}, weight expects {c_in_w}"
        )
    stride, pad = p.stride, p.padding
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv output would be empty for input {h}x{w}")

    weight, bias = p.weight, p.bias

    if k == 1 and stride == 1 and pad == 0:
        w2 = weight.data.reshape(c_out, c_in)
        out = np.matmul(w2, x.data.reshape(n, c_in, h * w)).reshape(
            n, c_out, h, w
        )
        if bias is not None:
            out += bias.data.reshape(1, c_out, 1, 1)

        def bw(g):
            gf = g.reshape(n, c_out, h * w)
            if weight.requires_grad:
                xf = x.data.reshape(n, c_in, h * w)
                dw = np.einsum("nol,ncl->oc", gf, xf)
                weight._accum(dw.reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accum(np.matmul(w2.T, gf).reshape(x.shape))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _record(out, parents, bw)

    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if pad
        else x.data
    )
    patches = np.empty((n, c_in, k, k, h_out, w_out))
    for i in range(k):
        for j in range(k):
            patches[:, :, i, j] = xp[
                :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
            ]
    cols = patches.reshape(n, c_in * k * k, h_out * w_out)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    def bw(g):
        gf = g.reshape(n, c_out, h_out * w_out)
        if weight.requires_grad:
            dw = np.einsum("nol,ncl->oc", gf, cols)
            weight._accum(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, gf).reshape(n, c_in, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[
                        :,
                        :,
                        i : i + stride * h_out : stride,
                        j : j + stride * w_out : stride,
                    ] += dcols[:, :, i, j]
            x._accum(dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw)


# -- bilinear resize -----------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix realizing half-pixel-center
    bilinear sampling along one axis."""
    d = np.arange(n_out)
    s = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = s - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (d, i0), 1.0 - f)
    np.add.at(m, (d, i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an NCHW tensor (convention in the module
    docstring).  Becomes the exact identity when sizes match."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    my = _interp_matrix(h, out_h)
    mx = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def bw(g):
        if x.requires_grad:
            x._accum(np.matmul(np.matmul(my.T, g), mx))

    return _record(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, kept as [N, C, 1, 1]."""
    return mean(x, axis=(2, 3), keepdims=True)


# -- batch normalization ---------------------------------------------------------


@dataclass
class NormParams:
    """Per-channel affine batch normalization.  Running statistics update as
    ``running = (1 - momentum) * running + momentum * batch`` with the biased
    batch variance; eval mode uses running statistics only."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def norm_params(channels: int) -> NormParams:
    return NormParams(
        scale=Tensor(np.ones(channels), requires_grad=True),
        shift=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )


def batch_norm(x: Tensor, p: NormParams, training: bool) -> Tensor:
    n, c, h, w = x.shape
    if c != p.scale.shape[0]:
        raise ValueError(
            f"batch_norm channel mismatch: input has {c}, params expect"
            f" {p.scale.shape[0]}"
        )
    scale = p.scale.reshape((1, c, 1, 1))
    shift = p.shift.reshape((1, c, 1, 1))
    if training:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        m = p.momentum
        p.running_mean[:] = (1.0 - m) * p.running_mean + m * mu.data.reshape(c)
        p.running_var[:] = (1.0 - m) * p.running_var + m * var.data.reshape(c)
        inv = (var + p.eps) ** -0.5
        return centered * inv * scale + shift
    rm = Tensor(p.running_mean.reshape(1, c, 1, 1))
    rstd = Tensor(1.0 / np.sqrt(p.running_var.reshape(1, c, 1, 1) + p.eps))
    return (x - rm) * rstd * scale + shift


# -- hard-example-mined cross entropy ---------------------------------------------


@dataclass
class OhemConfig:
    """Keep pixels whose true-class probability falls below prob_threshold,
    topped up with the highest-loss pixels so that at least
    ceil(min_kept_fraction * valid_pixels) always contribute."""

    prob_threshold: float = 0.7
    min_kept_fraction: float = 1.0 / 16.0

    def __post_init__(self):
        if not 0.0 < self.prob_threshold <= 1.0:
            raise ValueError("prob_threshold must be in (0, 1]")
        if not 0.0 < self.min_kept_fraction <= 1.0:
            raise ValueError("min_kept_fraction must be in (0, 1]")


def _check_labels(labels: np.ndarray, num_classes: int, ignore_index: int):
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        offender = int(labels[bad].flat[0])
        raise ValueError(
            f"label {offender} outside [0, {num_classes}) and not the ignore"
            f" index {ignore_index}"
        )


def _pixel_ce(logits_data: np.ndarray, labels: np.ndarray, valid: np.ndarray):
    """Per-pixel cross entropy of the true class, numpy only (no graph)."""
    m = logits_data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits_data - m).sum(axis=1, keepdims=True)) + m
    safe = np.where(valid, labels, 0)
    true_logit = np.take_along_axis(
        logits_data, safe[:, None, :, :], axis=1
    )[:, 0]
    return np.where(valid, lse[:, 0] - true_logit, 0.0)


def ohem_select(
    logits_data: np.ndarray,
    labels: np.ndarray,
    cfg: OhemConfig,
    ignore_index: int = 255,
) -> np.ndarray:
    """Boolean mask of the pixels that contribute to the mined loss."""
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    kept = np.zeros(labels.shape, dtype=bool)
    if n_valid == 0:
        return kept
    ce = _pixel_ce(logits_data, labels, valid)
    p_true = np.exp(-ce)
    hard = int((valid & (p_true < cfg.prob_threshold)).sum())
    min_kept = math.ceil(cfg.min_kept_fraction * n_valid)
    k = min(max(hard, min_kept), n_valid)
    flat = np.where(valid, ce, -np.inf).reshape(-1)
    top = np.argpartition(-flat, k - 1)[:k]
    kept.reshape(-1)[top] = True
    return kept


def ohem_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    cfg: OhemConfig,
    ignore_index: int = 255,
    kept_mask: np.ndarray | None = None,
) -> Tensor:
    """Softmax cross entropy averaged over the mined pixel set.

    ``kept_mask`` pins the selection (the mask is piecewise constant in the
    logits, so gradient checks freeze it across perturbations)."""
    labels = np.asarray(labels)
    n, num_classes, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    _check_labels(labels, num_classes, ignore_index)
    valid = labels != ignore_index
    if not valid.any():
        return (logits * 0.0).sum()
    if kept_mask is None:
        kept_mask = ohem_select(logits.data, labels, cfg, ignore_index)
    count = int(kept_mask.sum())
    lsm = log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape)
    nn, hh, ww = np.nonzero(valid)
    onehot[nn, labels[valid], hh, ww] = 1.0
    ce_map = -(lsm * Tensor(onehot)).sum(axis=1)
    return (ce_map * Tensor(kept_mask.astype(np.float64))).sum() * (1.0 / count)


# -- schedules and optimization -----------------------------------------------------


@dataclass
class LrSchedule:
    """Polynomial decay: lr(i) = lr0 * (1 - i/max_iter)^power."""

    lr0: float
    max_iter: int
    power: float = 0.9

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ValueError("max_iter must be positive")


def poly_lr(s: LrSchedule, it: int) -> float:
    if not 0 <= it <= s.max_iter:
        raise ValueError(f"iteration {it} outside [0, {s.max_iter}]")
    return s.lr0 * (1.0 - it / s.max_iter) ** s.power


def sgd_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    velocities: list[np.ndarray] | None = None,
):
    """One momentum step: v <- m*v + g + wd*theta; theta <- theta - lr*v.
    Parameters update in place; returns (params, velocities)."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if g.shape != p.data.shape:
            raise ValueError(
                f"grad shape {g.shape} does not match param {p.data.shape}"
            )
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    return params, velocities
