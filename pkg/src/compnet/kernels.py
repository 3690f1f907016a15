"""Dense float64 tensor kernels for small convolutional networks.

Layout convention: a single image or feature map is channels-last,
(height, width, channels); batches carry the batch axis first,
(batch, height, width, channels), which keeps each sample contiguous in
memory (the batch-last alternative makes im2col gathers stride by the
batch count and thrashes the cache). Flattening order is row-major over
(h, w, c), which pins fully-connected dimensions unambiguously.

Every kernel here is a pure function over float64 arrays and is
bit-deterministic: reduction orders are fixed and independent of batch
chunking, so identical inputs always produce identical outputs.
"""

from __future__ import annotations

import numpy as np

# im2col scratch ceiling; conv2d chunks over the batch axis above this so
# peak memory stays bounded on large feature maps.
_SCRATCH_LIMIT_BYTES = 192 * 1024 * 1024


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _ensure_batch(x):
    """Return (x as rank-4 (b, h, w, c), had_batch_axis)."""
    if x.ndim == 3:
        return x[np.newaxis], False
    if x.ndim == 4:
        return x, True
    raise ValueError(f"expected rank-3 or rank-4 feature map, got shape {x.shape}")


def elementwise_mul(a, b):
    """Hadamard product of two same-shaped arrays."""
    a = as_f64(a)
    b = as_f64(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def relu(x):
    """max(0, x), elementwise."""
    return np.maximum(as_f64(x), 0.0)


def relu_backward(x, dy):
    """Gradient of relu; subgradient at 0 is 0.

    Gates on x > 0, where x may be the forward input or the forward
    output (the conditions coincide for relu).
    """
    return np.where(x > 0.0, dy, 0.0)


def _batch_chunks(nb, per_sample_bytes):
    step = max(1, int(_SCRATCH_LIMIT_BYTES // max(per_sample_bytes, 1)))
    for lo in range(0, nb, step):
        yield lo, min(lo + step, nb)


def _conv_cols(xp, kh, kw):
    # xp: padded (nb, hp, wp, cin) -> (nb*h*w, kh*kw*cin), rows ordered (nb, h, w)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (nb, h, w, cin, kh, kw) -> (nb, h, w, kh, kw, cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    cin = xp.shape[3]
    return np.ascontiguousarray(cols).reshape(-1, kh * kw * cin)


def _check_conv_args(x4, kernels, bias):
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be rank 4 (kh, kw, c_in, c_out), got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if x4.shape[3] != cin:
        raise ValueError(f"channel mismatch: input has {x4.shape[3]}, kernels expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    return kh, kw, cin, cout


def conv2d(x, kernels, bias):
    """Stride-1 cross-correlation with zero same-padding.

    x: (h, w, c_in) or (b, h, w, c_in); kernels: (kh, kw, c_in, c_out)
    with odd kh, kw; bias: (c_out,). Output spatial size equals input
    spatial size.
    """
    x = as_f64(x)
    kernels = as_f64(kernels)
    bias = as_f64(bias) if bias is not None else None
    x4, had_batch = _ensure_batch(x)
    kh, kw, cin, cout = _check_conv_args(x4, kernels, bias)
    nb, h, w, _ = x4.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wmat = kernels.reshape(kh * kw * cin, cout)
    out = np.empty((nb, h, w, cout))
    per_sample = h * w * kh * kw * cin * 8
    for lo, hi in _batch_chunks(nb, per_sample):
        cols = _conv_cols(xp[lo:hi], kh, kw)
        out[lo:hi] = (cols @ wmat).reshape(hi - lo, h, w, cout)
    if bias is not None:
        out += bias
    return out if had_batch else out[0]


def conv2d_grads(x, kernels, dy):
    """Gradients of conv2d w.r.t. input, kernels, and bias.

    dy matches the forward output shape. Returns (dx, dkernels, dbias).
    """
    x = as_f64(x)
    kernels = as_f64(kernels)
    dy = as_f64(dy)
    x4, had_batch = _ensure_batch(x)
    dy4, _ = _ensure_batch(dy)
    kh, kw, cin, cout = kernels.shape
    nb, h, w, _ = x4.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    dbias = dy4.sum(axis=(0, 1, 2))
    dkernels = np.zeros((kh * kw * cin, cout))
    per_sample = h * w * kh * kw * cin * 8
    for lo, hi in _batch_chunks(nb, per_sample):
        cols = _conv_cols(xp[lo:hi], kh, kw)
        dymat = dy4[lo:hi].reshape(-1, cout)
        dkernels += cols.T @ dymat
    dkernels = dkernels.reshape(kh, kw, cin, cout)

    # dx is the correlation of dy with the 180-degree-rotated kernels,
    # input/output channels swapped.
    wrot = kernels[::-1, ::-1].transpose(0, 1, 3, 2)
    dx = conv2d(dy4, wrot, None)
    return (dx if had_batch else dx[0]), dkernels, dbias


def maxpool2d(x):
    """2x2 max pooling with stride 2.

    Returns (pooled, argmax) where argmax records, per output position,
    the row-major index 0..3 of the winning element inside its window;
    ties resolve to the smallest index.
    """
    x = as_f64(x)
    x4, had_batch = _ensure_batch(x)
    nb, h, w, c = x4.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d requires even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    v = x4.reshape(nb, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(nb, h2, w2, c, 4)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., np.newaxis], axis=-1)[..., 0]
    arg = arg.astype(np.int8)  # window positions 0..3; int8 keeps the map small
    if not had_batch:
        return out[0], arg[0]
    return out, arg


def maxpool2d_backward(argmax, dy, in_shape):
    """Route pooled gradients back to the recorded argmax positions."""
    dy = as_f64(dy)
    dy4, had_batch = _ensure_batch(dy)
    arg4 = argmax if argmax.ndim == 4 else argmax[np.newaxis]
    nb, h2, w2, c = dy4.shape
    onehot = arg4[..., np.newaxis] == np.arange(4).reshape(1, 1, 1, 1, 4)
    dv = onehot * dy4[..., np.newaxis]
    dx = dv.reshape(nb, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(nb, 2 * h2, 2 * w2, c)
    if not had_batch:
        dx = dx[0]
    if dx.shape != tuple(in_shape):
        raise ValueError(f"maxpool2d_backward shape mismatch: {dx.shape} vs {in_shape}")
    return dx


def affine(x, weights, bias):
    """Fully-connected map: out = x^T W + b.

    x: (n,) for one sample or (b, n) for a batch; weights: (n, m);
    bias: (m,).
    """
    x = as_f64(x)
    weights = as_f64(weights)
    bias = as_f64(bias)
    if weights.ndim != 2:
        raise ValueError(f"weights must be rank 2, got {weights.shape}")
    n, m = weights.shape
    if x.ndim == 1:
        if x.shape[0] != n:
            raise ValueError(f"affine dimension mismatch: input length {x.shape[0]}, "
                             f"weights expect {n}")
        if bias.shape != (m,):
            raise ValueError(f"bias must have shape ({m},), got {bias.shape}")
        return weights.T @ x + bias
    if x.ndim == 2:
        if x.shape[1] != n:
            raise ValueError(f"affine dimension mismatch: input length {x.shape[1]}, "
                             f"weights expect {n}")
        if bias.shape != (m,):
            raise ValueError(f"bias must have shape ({m},), got {bias.shape}")
        return x @ weights + bias
    raise ValueError(f"affine input must be rank 1 or 2, got {x.shape}")


def affine_grads(x, weights, dy):
    """Gradients of affine: returns (dx, dweights, dbias)."""
    x = as_f64(x)
    weights = as_f64(weights)
    dy = as_f64(dy)
    if x.ndim == 1:
        dx = weights @ dy
        dw = np.outer(x, dy)
        db = dy.copy()
    else:
        dx = dy @ weights.T
        dw = x.T @ dy
        db = dy.sum(axis=0)
    return dx, dw, db


def flatten_features(x):
    """Row-major flatten of (h, w, c) into (h*w*c,), or (b, h, w, c)
    into (b, h*w*c)."""
    x = as_f64(x)
    if x.ndim == 3:
        return x.reshape(-1)
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"flatten_features expects rank 3 or 4, got {x.shape}")


def avg_downsample(mask, target):
    """Block-average a (H, W) map down to (h, w); H, W must be divisible."""
    mask = as_f64(mask)
    if mask.ndim != 2:
        raise ValueError(f"avg_downsample expects a rank-2 map, got {mask.shape}")
    big_h, big_w = mask.shape
    h, w = target
    if h <= 0 or w <= 0 or big_h % h or big_w % w:
        raise ValueError(
            f"avg_downsample target {target} does not evenly divide source {mask.shape}"
        )
    return mask.reshape(h, big_h // h, w, big_w // w).mean(axis=(1, 3))
