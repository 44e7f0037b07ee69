"""Online knowledge-distillation losses aligning the student to the
frozen teacher: normalized MSE, Gram-matrix, and channelwise-KL terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class DistillWeights:
    alpha: float = 100.0
    beta: float = 0.5
    gamma: float = 0.25


class DegenerateInputError(ValueError):
    pass


def _as_feature(x):
    f = x.f if hasattr(x, "f") else x
    if f.ndim != 4:
        raise T.ShapeError("expected [B, C, H, W] feature maps")
    return f


def loss_mse(f_tea, f_stu) -> Tensor:
    """Mean squared difference of globally L2-normalized features.

    Each sample's feature tensor is normalized by its full C*H*W L2 norm,
    making the loss invariant to positive global rescaling of either side.
    The sum of squared differences is averaged over the B*H*W spatial
    positions (each position contributing its C-vector squared norm).
    """
    f_tea, f_stu = _as_feature(f_tea), _as_feature(f_stu)
    if f_tea.shape != f_stu.shape:
        raise T.ShapeError("teacher/student shapes differ")
    b, c, h, w = f_tea.shape
    n = c * h * w
    ta = T.reshape(f_tea, (b, n))
    st = T.reshape(f_stu, (b, n))
    tnorm = T.sqrt(T.sum_(T.square(ta), axis=1, keepdims=True))
    snorm = T.sqrt(T.sum_(T.square(st), axis=1, keepdims=True))
    if float(tnorm.data.min()) <= 1e-12 or float(snorm.data.min()) <= 1e-12:
        raise DegenerateInputError("zero-norm feature map")
    diff = T.sub(T.div(ta, tnorm), T.div(st, snorm))
    return T.mean(T.sum_(T.square(diff), axis=1)) * (1.0 / (h * w))


def loss_gram(f_tea, f_stu) -> Tensor:
    """Mean squared difference of per-sample Gram matrices F F^T / (HW),
    averaged over the C^2 Gram entries and the batch."""
    f_tea, f_stu = _as_feature(f_tea), _as_feature(f_stu)
    if f_tea.shape != f_stu.shape:
        raise T.ShapeError("teacher/student shapes differ")
    b, c, h, w = f_tea.shape

    def gram(f):
        m = T.reshape(f, (b, c, h * w))
        return T.mul(T.matmul(m, T.swapaxes(m, -1, -2)), 1.0 / (h * w))

    diff = T.sub(gram(f_tea), gram(f_stu))
    return T.mean(T.sum_(T.square(diff), axis=(1, 2)), axis=0) * (1.0 / (c * c))


def loss_kl(f_tea, f_stu) -> Tensor:
    """KL(teacher || student) of channel-axis softmax distributions at each
    spatial position, averaged over positions and batch."""
    f_tea, f_stu = _as_feature(f_tea), _as_feature(f_stu)
    if f_tea.shape != f_stu.shape:
        raise T.ShapeError("teacher/student shapes differ")
    b, c, h, w = f_tea.shape
    logp = T.log_softmax(f_tea, axis=1)
    logq = T.log_softmax(f_stu, axis=1)
    p = T.softmax(f_tea, axis=1)
    kl = T.sum_(T.mul(p, T.sub(logp, logq)), axis=1)
    return T.mean(kl)


def loss_kd(f_tea, f_stu, w: DistillWeights | None = None) -> Tensor:
    """alpha * L_MSE + beta * L_Gram + gamma * L_KL."""
    w = w or DistillWeights()
    total = T.mul(loss_mse(f_tea, f_stu), w.alpha)
    total = T.add(total, T.mul(loss_gram(f_tea, f_stu), w.beta))
    return T.add(total, T.mul(loss_kl(f_tea, f_stu), w.gamma))
