"""LoG contrast loss and one-sided FFT magnitude loss, with analytic gradients.

Images are float arrays of shape (H, W) or (H, W, C); multi-channel losses
average over channels.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MismatchedInput


def log_kernel(sigma: float = 1.0) -> np.ndarray:
    """Sampled Laplacian of Gaussian, radius ceil(3 sigma), shifted to zero sum."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    r = int(math.ceil(3.0 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    r2 = x * x + y * y
    s2 = sigma * sigma
    g = np.exp(-r2 / (2.0 * s2)) / (2.0 * np.pi * s2)
    k = (r2 - 2.0 * s2) / (s2 * s2) * g
    return k - k.mean()


def _channels(img):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[..., None], True
    if a.ndim != 3:
        raise ValueError("expected an (H, W) or (H, W, C) image")
    return a, False


def _check_pair(pred, target):
    if np.shape(pred) != np.shape(target):
        raise MismatchedInput(f"shapes differ: {np.shape(pred)} vs {np.shape(target)}")


def log_response(img, sigma: float = 1.0) -> np.ndarray:
    """Convolve with :func:`log_kernel`; borders mirror the edge pixels."""
    k = log_kernel(sigma)
    r = k.shape[0] // 2
    a, flat = _channels(img)
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        p = np.pad(a[..., c], r, mode="symmetric")
        win = sliding_window_view(p, k.shape)
        # the kernel is symmetric, so correlation equals convolution
        out[..., c] = np.einsum("ijkl,kl->ij", win, k)
    return out[..., 0] if flat else out


def log_adjoint(g, sigma: float = 1.0) -> np.ndarray:
    """Transpose of :func:`log_response` applied to ``g``."""
    k = log_kernel(sigma)
    r = k.shape[0] // 2
    a, flat = _channels(g)
    H, W = a.shape[:2]
    idx = np.pad(np.arange(H * W).reshape(H, W), r, mode="symmetric").ravel()
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        acc = np.zeros((H + 2 * r, W + 2 * r))
        for dy in range(k.shape[0]):
            for dx in range(k.shape[1]):
                acc[dy:dy + H, dx:dx + W] += k[dy, dx] * a[..., c]
        out[..., c] = np.bincount(idx, acc.ravel(), minlength=H * W).reshape(H, W)
    return out[..., 0] if flat else out


def contrast_loss(pred, target, sigma: float = 1.0) -> float:
    _check_pair(pred, target)
    return float(np.mean(np.abs(log_response(pred, sigma) - log_response(target, sigma))))


def contrast_loss_grad(pred, target, sigma: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. ``pred``; sign(0) = 0 at the kink."""
    _check_pair(pred, target)
    d = log_response(pred, sigma) - log_response(target, sigma)
    return log_adjoint(np.sign(d) / d.size, sigma)


def magnitude_spectrum(img) -> np.ndarray:
    a, _ = _channels(img)
    return np.abs(np.fft.rfft2(a, axes=(0, 1)))


def _fftmax_parts(pred, target, eps, include_dc):
    _check_pair(pred, target)
    P, _ = _channels(pred)
    T, _ = _channels(target)
    FP = np.fft.rfft2(P, axes=(0, 1))
    XP, XT = np.abs(FP), np.abs(np.fft.rfft2(T, axes=(0, 1)))
    if eps is None:
        eps = 1e-8 * float(XT.max()) if XT.max() > 0 else 1e-8
    if eps <= 0:
        raise ValueError("eps must be > 0")
    den = np.maximum(XT, eps)
    over = XP > XT
    if not include_dc:
        over[0, 0] = False
    n_bins = XP.size - (0 if include_dc else XP.shape[2])
    return FP, XP, XT, den, over, n_bins


def fftmax_loss(pred, target, eps: float | None = None, reduction: str = "mean",
                include_dc: bool = True) -> float:
    """Mean over rfft bins of ((XP - XT) / max(XT, eps))^2 where XP > XT.

    ``eps`` defaults to 1e-8 times the largest target magnitude.
    """
    _, XP, XT, den, over, n = _fftmax_parts(pred, target, eps, include_dc)
    terms = np.where(over, ((XP - XT) / den) ** 2, 0.0)
    total = float(terms.sum())
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ValueError("reduction must be 'mean' or 'sum'")
    return total / n


def fftmax_loss_grad(pred, target, eps: float | None = None, reduction: str = "mean",
                     include_dc: bool = True) -> np.ndarray:
    FP, XP, XT, den, over, n = _fftmax_parts(pred, target, eps, include_dc)
    scale = 1.0 if reduction == "sum" else 1.0 / n
    g = np.where(over, 2.0 * (XP - XT) / den ** 2, 0.0) * scale  # dL/dXP
    safe = np.where(XP > 0, XP, 1.0)
    # dL/dp_n = Re(sum_k g_k conj(F_k)/|F_k| e^{-2 pi i k.n}) = Re(ifft2(g F/|F|)) * H W
    coef = g * FP / safe
    H, W = FP.shape[:2]
    full_w = np.shape(pred)[1]
    C = np.zeros((H, full_w, FP.shape[2]), dtype=np.complex128)
    C[:, :W] = coef
    grad = np.real(np.fft.ifft2(C, axes=(0, 1))) * (H * full_w)
    return grad[..., 0] if np.ndim(pred) == 2 else grad


_GRADS = {contrast_loss: contrast_loss_grad, fftmax_loss: fftmax_loss_grad}


def grad_check(loss_fn, pred, target, step: float = 1e-5, grad_fn=None, **kw) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error per pixel is |a - n| / max(|a|, |n|, 1e-3 * max|n|), the
    floor keeping near-zero entries from dominating.  At the |.| kink of the
    contrast loss (pred == target) both sides are 0 and the result is 0.
    """
    grad_fn = grad_fn or _GRADS.get(loss_fn)
    if grad_fn is None:
        raise ValueError("no analytic gradient known for this loss; pass grad_fn")
    p = np.asarray(pred, dtype=np.float64).copy()
    analytic = np.asarray(grad_fn(p, target, **kw))
    numeric = np.zeros_like(p)
    flat = p.reshape(-1)
    num = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn(p, target, **kw)
        flat[i] = old - step
        dn = loss_fn(p, target, **kw)
        flat[i] = old
        num[i] = (up - dn) / (2.0 * step)
    peak = float(np.abs(numeric).max())
    if not np.any(analytic) and (peak == 0 or loss_fn(p, target, **kw) == 0):
        # at a zero-loss kink the subgradient 0 is reported; nothing to compare
        return 0.0
    floor = max(1e-3 * peak, 1e-300)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den))
