"""3x3 convolution layers with hand-written backward passes.

Activations are channels-last ``(B, H, W, C)``.  Kernels use the usual
``(out_ch, in_ch, 3, 3)`` layout and are applied as cross-correlation with
reflect padding of one pixel, so spatial size is preserved.
"""

import numpy as np


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _unpad_grad(gp):
    """Adjoint of :func:`_pad`: fold the reflected border back onto the interior."""
    g = gp[:, 1:-1].copy()
    g[:, 1] += gp[:, 0]
    g[:, -2] += gp[:, -1]
    out = g[:, :, 1:-1].copy()
    out[:, :, 1] += g[:, :, 0]
    out[:, :, -2] += g[:, :, -1]
    return out


def im2col(x):
    """(B, H, W, C) -> (B*H*W, 9*C) patch matrix, column order (dy, dx, c)."""
    b, h, w, c = x.shape
    xp = _pad(x)
    cols = np.concatenate([xp[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=-1)
    return cols.reshape(b * h * w, 9 * c)


def kernel_matrix(weight):
    """(O, C, 3, 3) kernel -> (9*C, O) matrix matching :func:`im2col` columns."""
    o, c = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(9 * c, o)


def conv_forward(x, weight, bias):
    b, h, w, _ = x.shape
    cols = im2col(x)
    out = cols @ kernel_matrix(weight) + bias
    return out.reshape(b, h, w, -1), cols


def conv_backward(dout, cols, weight, in_shape, need_input_grad=True):
    """Gradients of a conv layer: (d_input or None, d_weight, d_bias)."""
    o, c = weight.shape[:2]
    b, h, w, _ = in_shape
    dflat = dout.reshape(-1, o)
    dweight = (cols.T @ dflat).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    dbias = dflat.sum(axis=0)
    if not need_input_grad:
        return None, dweight, dbias
    dcols = (dflat @ kernel_matrix(weight).T).reshape(b, h, w, 9, c)
    gp = np.zeros((b, h + 2, w + 2, c), dtype=dout.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        gp[:, dy:dy + h, dx:dx + w] += dcols[:, :, :, k]
    return _unpad_grad(gp), dweight, dbias


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)
