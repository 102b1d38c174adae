"""Small channels-last layer toolkit with hand-written backward passes.

Arrays are [B, H, W, C]. A convolution is a list of integer taps (dy, dx):
output (i, j) reads input (i + dy, j + dx), zero outside the image. Causal
layers are plain convolutions whose tap lists never reach the future.
"""

import numpy as np

FULL3 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def _pad_of(taps):
    return max(max(abs(dy), abs(dx)) for dy, dx in taps)


def im2col(x, taps):
    """Stack shifted copies of ``x`` along channels: [B, H, W, T*C]."""
    b, h, w, c = x.shape
    p = _pad_of(taps)
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x
    out = np.empty((b, h, w, len(taps) * c), dtype=x.dtype)
    for t, (dy, dx) in enumerate(taps):
        out[..., t * c : (t + 1) * c] = xp[:, p + dy : p + dy + h, p + dx : p + dx + w]
    return out


def col2im(dcol, taps, c):
    """Adjoint of :func:`im2col`."""
    b, h, w, _ = dcol.shape
    p = _pad_of(taps)
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dcol.dtype)
    for t, (dy, dx) in enumerate(taps):
        dxp[:, p + dy : p + dy + h, p + dx : p + dx + w] += dcol[..., t * c : (t + 1) * c]
    return dxp[:, p : p + h, p : p + w]


def conv(x, taps, weight, bias=None):
    """Returns (output, column buffer for the backward pass)."""
    col = im2col(x, taps) if taps != ((0, 0),) else x
    out = col @ weight
    if bias is not None:
        out = out + bias
    return out, col


def conv_backward(dout, col, taps, weight, in_channels, need_input=True):
    """Returns (d input, d weight, d bias); d input is None if not need_input."""
    o = dout.shape[-1]
    dw = col.reshape(-1, col.shape[-1]).T @ dout.reshape(-1, o)
    db = dout.reshape(-1, o).sum(axis=0)
    if not need_input:
        return None, dw, db
    dcol = dout @ weight.T
    dx = dcol if taps == ((0, 0),) else col2im(dcol, taps, in_channels)
    return dx, dw, db


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(x.dtype)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=0.2):
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(d):
    b, h, w, c = d.shape
    return d.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Adam:
    """Adam over a dict of float64 master arrays, with global-norm clipping."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place; returns the pre-clip gradient norm."""
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k].astype(np.float64) * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm
