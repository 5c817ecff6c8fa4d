"""Forward/backward implementations of every layer primitive.

Each primitive is a pure function pair: `*_forward(...) -> (out, cache)` and
`*_backward(cache, dout) -> grads`. The fixed model graphs are composed
manually from these pairs; there is no autodiff graph.

All ops accept a leading batch axis N. Convolutions use channels-last
layout (`[N, H, W, Cin]`, kernels `[kh, kw, Cin, Cout]`) and are computed
as chunked im2col + one matrix product per chunk so the scratch buffer
stays bounded regardless of batch size.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ConfigError, NumericError, ShapeError

# Upper bound for a single im2col scratch buffer.
_COL_BYTES = 64 * 1024 * 1024


def _sigmoid(x):
    out = np.empty_like(x)
    np.negative(x, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask, dout):
    return np.where(mask, dout, 0.0)


# ---------------------------------------------------------------------------
# 2D convolution
# ---------------------------------------------------------------------------

def _conv2d_geometry(x, kernel, stride, pad):
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,H,W,Cin], got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [kh,kw,Cin,Cout], got shape {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    sh, sw = stride
    ph, pw = pad
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel Cin is {kcin}, input Cin is {cin}")
    if kh > h + 2 * ph:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    return n, h, w, cin, kh, kw, cout, sh, sw, ph, pw, ho, wo


def _chunk_rows(per_row_bytes, n):
    return max(1, min(n, _COL_BYTES // max(1, per_row_bytes)))


def conv2d_forward(x, kernel, bias, stride=(1, 1), pad=(0, 0), keep_cols=False):
    """out[n,y,x,co] = bias[co] + sum over (i,j,ci) of padded input * kernel.

    With keep_cols the im2col chunks are retained in the cache so the
    backward pass reuses them instead of re-gathering.
    """
    n, h, w, cin, kh, kw, cout, sh, sw, ph, pw, ho, wo = _conv2d_geometry(x, kernel, stride, pad)
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
    kmat = kernel.reshape(kh * kw * cin, cout)
    out = np.empty((n, ho, wo, cout), dtype=x.dtype)
    chunk = _chunk_rows(ho * wo * kh * kw * cin * x.itemsize, n)
    saved = [] if keep_cols else None
    s0, s1, s2, s3 = xp.strides
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        view = as_strided(
            xp[i0:i1],
            shape=(i1 - i0, ho, wo, kh, kw, cin),
            strides=(s0, sh * s1, sw * s2, s1, s2, s3),
        )
        cols = view.reshape((i1 - i0) * ho * wo, kh * kw * cin)
        if saved is not None:
            saved.append(cols)
        out[i0:i1] = (cols @ kmat).reshape(i1 - i0, ho, wo, cout)
    out += bias
    cache = (xp, x.shape, kernel, stride, pad, (ho, wo), chunk, saved)
    return out, cache


def conv2d_backward(cache, dout, need_dx=True):
    """Gradients w.r.t. input, kernel and bias (dx is None if not needed)."""
    xp, x_shape, kernel, stride, pad, (ho, wo), chunk, saved = cache
    n, h, w, cin = x_shape
    kh, kw, _, cout = kernel.shape
    sh, sw = stride
    ph, pw = pad
    db = dout.sum(axis=(0, 1, 2))
    kmat = kernel.reshape(kh * kw * cin, cout)
    dk = np.zeros_like(kmat)
    dxp = np.zeros_like(xp) if need_dx else None
    s0, s1, s2, s3 = xp.strides
    for ci, i0 in enumerate(range(0, n, chunk)):
        i1 = min(n, i0 + chunk)
        rows = (i1 - i0) * ho * wo
        if saved is not None:
            cols = saved[ci]
        else:
            view = as_strided(
                xp[i0:i1],
                shape=(i1 - i0, ho, wo, kh, kw, cin),
                strides=(s0, sh * s1, sw * s2, s1, s2, s3),
            )
            cols = view.reshape(rows, kh * kw * cin)
        dmat = dout[i0:i1].reshape(rows, cout)
        dk += cols.T @ dmat
        if need_dx:
            dcols = (dmat @ kmat.T).reshape(i1 - i0, ho, wo, kh, kw, cin)
            for i in range(kh):
                for j in range(kw):
                    dxp[i0:i1, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += dcols[:, :, :, i, j, :]
    if not need_dx:
        return None, dk.reshape(kernel.shape), db
    dx = dxp[:, ph:ph + h, pw:pw + w, :] if (ph or pw) else dxp
    return dx, dk.reshape(kernel.shape), db


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _conv3d_geometry(x, kernel, stride, pad):
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be [N,T,H,W,Cin], got shape {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [kt,kh,kw,Cin,Cout], got shape {kernel.shape}")
    n, t, h, w, cin = x.shape
    kt, kh, kw, kcin, cout = kernel.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    if kcin != cin:
        raise ShapeError(f"conv3d: kernel Cin is {kcin}, input Cin is {cin}")
    for name, k, d in (("temporal", kt, t + 2 * pt), ("height", kh, h + 2 * ph), ("width", kw, w + 2 * pw)):
        if k > d:
            raise ShapeError(f"conv3d: kernel {name} extent {k} exceeds padded input extent {d}")
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    return n, t, h, w, cin, kt, kh, kw, cout, st, sh, sw, pt, ph, pw, to, ho, wo


def conv3d_forward(x, kernel, bias, stride=(1, 1, 1), pad=(0, 0, 0)):
    """3D analogue of conv2d over [N,T,H,W,Cin]."""
    (n, t, h, w, cin, kt, kh, kw, cout,
     st, sh, sw, pt, ph, pw, to, ho, wo) = _conv3d_geometry(x, kernel, stride, pad)
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape}, expected ({cout},)")
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0))) if (pt or ph or pw) else x
    kmat = kernel.reshape(kt * kh * kw * cin, cout)
    out = np.empty((n, to, ho, wo, cout), dtype=x.dtype)
    chunk = _chunk_rows(to * ho * wo * kt * kh * kw * cin * x.itemsize, n)
    s0, s1, s2, s3, s4 = xp.strides
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        view = as_strided(
            xp[i0:i1],
            shape=(i1 - i0, to, ho, wo, kt, kh, kw, cin),
            strides=(s0, st * s1, sh * s2, sw * s3, s1, s2, s3, s4),
        )
        cols = view.reshape((i1 - i0) * to * ho * wo, kt * kh * kw * cin)
        out[i0:i1] = (cols @ kmat).reshape(i1 - i0, to, ho, wo, cout)
    out += bias
    cache = (xp, x.shape, kernel, stride, pad, (to, ho, wo))
    return out, cache


def conv3d_backward(cache, dout):
    xp, x_shape, kernel, stride, pad, (to, ho, wo) = cache
    n, t, h, w, cin = x_shape
    kt, kh, kw, _, cout = kernel.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    db = dout.sum(axis=(0, 1, 2, 3))
    kmat = kernel.reshape(kt * kh * kw * cin, cout)
    dk = np.zeros_like(kmat)
    dxp = np.zeros_like(xp)
    chunk = _chunk_rows(to * ho * wo * kt * kh * kw * cin * xp.itemsize, n)
    s0, s1, s2, s3, s4 = xp.strides
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        rows = (i1 - i0) * to * ho * wo
        view = as_strided(
            xp[i0:i1],
            shape=(i1 - i0, to, ho, wo, kt, kh, kw, cin),
            strides=(s0, st * s1, sh * s2, sw * s3, s1, s2, s3, s4),
        )
        cols = view.reshape(rows, kt * kh * kw * cin)
        dmat = dout[i0:i1].reshape(rows, cout)
        dk += cols.T @ dmat
        dcols = (dmat @ kmat.T).reshape(i1 - i0, to, ho, wo, kt, kh, kw, cin)
        for ti in range(kt):
            for i in range(kh):
                for j in range(kw):
                    dxp[i0:i1,
                        ti:ti + st * (to - 1) + 1:st,
                        i:i + sh * (ho - 1) + 1:sh,
                        j:j + sw * (wo - 1) + 1:sw, :] += dcols[:, :, :, :, ti, i, j, :]
    dx = dxp[:, pt:pt + t, ph:ph + h, pw:pw + w, :] if (pt or ph or pw) else dxp
    return dx, dk.reshape(kernel.shape), db


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, window, stride):
    """Valid max pooling; ties go to the lowest flat index of the window."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be [N,H,W,C], got shape {x.shape}")
    n, h, w, c = x.shape
    wh, ww = window
    sh, sw = stride
    if wh > h or ww > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    s0, s1, s2, s3 = x.strides
    view = as_strided(x, shape=(n, ho, wo, wh, ww, c), strides=(s0, sh * s1, sw * s2, s1, s2, s3))
    flat = view.reshape(n, ho, wo, wh * ww, c)
    # argmax returns the first maximum, i.e. the lowest row-major window offset
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    cache = (x.shape, window, stride, idx, x.dtype)
    return out, cache


def maxpool2d_backward(cache, dout):
    (n, h, w, c), (wh, ww), (sh, sw), idx, dtype = cache
    ho, wo = idx.shape[1], idx.shape[2]
    dx = np.zeros(n * h * w * c, dtype=dtype)
    di, dj = idx // ww, idx % ww
    # absolute input coordinates of each window's argmax
    yy = di + (np.arange(ho) * sh)[None, :, None, None]
    xx = dj + (np.arange(wo) * sw)[None, None, :, None]
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    flat_idx = ((nn * h + yy) * w + xx) * c + cc
    np.add.at(dx, flat_idx.ravel(), dout.ravel())
    return dx.reshape(n, h, w, c)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode, decay=0.9, eps=1e-5):
    """Normalize [N,F] features.

    Train mode normalizes by batch statistics and updates the running
    buffers in place (r <- decay*r + (1-decay)*batch). Infer mode uses the
    running statistics elementwise.
    """
    if x.ndim != 2:
        raise ShapeError(f"batchnorm: input must be [N,F], got shape {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: train mode needs N >= 2, got N={x.shape[0]}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * ivar
        out = gamma * xhat + beta
        running_mean *= decay
        running_mean += (1.0 - decay) * mu
        running_var *= decay
        running_var += (1.0 - decay) * var
        cache = ("train", xhat, ivar, gamma)
    elif mode == "infer":
        ivar = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * ivar
        out = gamma * xhat + beta
        cache = ("infer", xhat, ivar, gamma)
    else:
        raise ConfigError(f"batchnorm: unknown mode {mode!r}")
    return out, cache


def batchnorm_backward(cache, dout):
    """Full coupled derivative in train mode (batch stats are functions of x)."""
    mode, xhat, ivar, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * ivar, dgamma, dbeta
    n = xhat.shape[0]
    dx = (ivar / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense_forward(x, weight, bias):
    if x.ndim != 2:
        raise ShapeError(f"dense: input must be [N,F], got shape {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape}, expected ({weight.shape[1]},)")
    return x @ weight + bias, (x, weight)


def dense_backward(cache, dout):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------
# Gate layout: the input projection wx is [F, 3H] with columns ordered
# (update z | reset r | candidate c); uzr is [H, 2H] for (z | r) on the raw
# previous state and uc is [H, H] on the reset-gated state.

def gru_cell_forward(x, h_prev, wx, uzr, uc, b):
    """One GRU step.

    z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
    c = tanh(Wc x + Uc (r*h) + bc), h' = (1-z)*h + z*c.
    """
    hsz = h_prev.shape[-1]
    if wx.shape[0] != x.shape[-1] or wx.shape[1] != 3 * hsz:
        raise ShapeError(f"gru_cell: wx shape {wx.shape} inconsistent with input {x.shape[-1]} and hidden {hsz}")
    gx = x @ wx + b
    gh = h_prev @ uzr
    z = _sigmoid(gx[:, :hsz] + gh[:, :hsz])
    r = _sigmoid(gx[:, hsz:2 * hsz] + gh[:, hsz:])
    rh = r * h_prev
    c = np.tanh(gx[:, 2 * hsz:] + rh @ uc)
    h_new = (1.0 - z) * h_prev + z * c
    cache = (x, h_prev, z, r, c, rh)
    return h_new, cache


def gru_cell_backward(cache, wx, uzr, uc, dh_new):
    """Backward through one step; BPTT composes these right-to-left."""
    x, h_prev, z, r, c, rh = cache
    hsz = h_prev.shape[-1]
    dz = dh_new * (c - h_prev)
    dc = dh_new * z
    dh = dh_new * (1.0 - z)
    dac = dc * (1.0 - c * c)
    drh = dac @ uc.T
    duc = rh.T @ dac
    dr = drh * h_prev
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dzr = np.concatenate([daz, dar], axis=1)
    dgates = np.concatenate([daz, dar, dac], axis=1)
    dwx = x.T @ dgates
    db = dgates.sum(axis=0)
    duzr = h_prev.T @ dzr
    dh += dzr @ uzr.T
    dx = dgates @ wx.T
    return dx, dh, dwx, duzr, duc, db


def gru_sequence_forward(x, wx, uzr, uc, b):
    """Run a GRU left-to-right over [N,T,F]; initial hidden state is zero."""
    n, t, _ = x.shape
    hsz = uc.shape[0]
    hs = np.empty((n, t, hsz), dtype=x.dtype)
    h = np.zeros((n, hsz), dtype=x.dtype)
    caches = []
    for step in range(t):
        h, cache = gru_cell_forward(x[:, step, :], h, wx, uzr, uc, b)
        hs[:, step, :] = h
        caches.append(cache)
    return hs, caches


def gru_sequence_backward(caches, wx, uzr, uc, dhs):
    n, t, _ = dhs.shape
    f = wx.shape[0]
    dx = np.empty((n, t, f), dtype=dhs.dtype)
    dwx = np.zeros_like(wx)
    duzr = np.zeros_like(uzr)
    duc = np.zeros_like(uc)
    db = np.zeros(wx.shape[1], dtype=wx.dtype)
    dh = np.zeros((n, uc.shape[0]), dtype=dhs.dtype)
    for step in range(t - 1, -1, -1):
        dxs, dh, g_wx, g_uzr, g_uc, g_b = gru_cell_backward(caches[step], wx, uzr, uc, dhs[:, step, :] + dh)
        dx[:, step, :] = dxs
        dwx += g_wx
        duzr += g_uzr
        duc += g_uc
        db += g_b
    return dx, (dwx, duzr, duc, db)


def bigru_forward(x, fwd_weights, bwd_weights):
    """Bidirectional GRU over [N,T,F] -> [N,T,2H].

    Per-step output concatenates the forward hidden state at t with the
    backward hidden state at t (computed scanning from the end).
    """
    if x.ndim != 3:
        raise ShapeError(f"bigru: input must be [N,T,F], got shape {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("bigru: sequence length must be >= 1")
    hs_f, caches_f = gru_sequence_forward(x, *fwd_weights)
    hs_b_rev, caches_b = gru_sequence_forward(x[:, ::-1, :], *bwd_weights)
    out = np.concatenate([hs_f, hs_b_rev[:, ::-1, :]], axis=2)
    return out, (caches_f, caches_b)


def bigru_backward(cache, fwd_weights, bwd_weights, dout):
    caches_f, caches_b = cache
    hsz = dout.shape[2] // 2
    dx_f, grads_f = gru_sequence_backward(caches_f, *fwd_weights[:3], dout[:, :, :hsz])
    dx_b_rev, grads_b = gru_sequence_backward(caches_b, *bwd_weights[:3], dout[:, ::-1, hsz:])
    return dx_f + dx_b_rev[:, ::-1, :], grads_f, grads_b


# ---------------------------------------------------------------------------
# Softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax_xent_forward(logits, labels):
    """Mean cross-entropy with max-subtracted softmax.

    Returns (loss, probs, cache); backward is (p - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent: logits must be [N,C], got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("softmax_xent: non-finite logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_xent: labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"softmax_xent: labels must lie in [0,{c - 1}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    loge = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(loge)
    loss = -loge[np.arange(n), labels].mean()
    return loss, probs, (probs, labels)


def softmax_xent_backward(cache, dloss=1.0):
    probs, labels = cache
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= dloss / n
    return dlogits


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, mode, prng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must be in [0,1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    keep = (prng.uniform(size=x.shape) >= rate).astype(x.dtype)
    keep /= (1.0 - rate)
    return x * keep, keep


def dropout_backward(cache, dout):
    if cache is None:
        return dout
    return dout * cache
