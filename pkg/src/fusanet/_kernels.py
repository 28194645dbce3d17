"""Low-level convolution kernels.

The forward path fixes the per-element accumulation order (bias first, then
kernel taps in channel-major (ci, ki, kj) order) so results are reproducible
bit-for-bit regardless of tiling or thread count.  Backward kernels only
promise determinism, not a particular order, and lean on BLAS where they can.

numba is used when importable; a pure-numpy fallback with the identical
accumulation order is kept for environments without it
(set FUSANET_NO_NUMBA=1 to force the fallback).
"""

import os

import numpy as np

# On small work items two thread pools (BLAS + numba) thrash each other and
# cost an order of magnitude; default both to one thread, overridable with
# FUSANET_THREADS.  Results are identical at any thread count.
_N_THREADS = max(1, int(os.environ.get("FUSANET_THREADS", "1")))

try:
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=_N_THREADS, user_api="blas")
except ImportError:  # pragma: no cover
    _BLAS_LIMIT = None

_USE_NUMBA = os.environ.get("FUSANET_NO_NUMBA", "") != "1"
if _USE_NUMBA:
    try:
        import warnings

        from numba import NumbaWarning, njit, prange, set_num_threads

        warnings.filterwarnings("ignore", category=NumbaWarning)
        set_num_threads(_N_THREADS)
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False


def conv_geometry(h, w, kh, kw, stride, dilation, padding):
    """Output extents of a conv; raises if the dilated kernel does not fit."""
    eff_kh = (kh - 1) * dilation + 1
    eff_kw = (kw - 1) * dilation + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    if eff_kh > hp or eff_kw > wp:
        raise ValueError(
            f"kernel {kh}x{kw} (dilation {dilation}, effective {eff_kh}x{eff_kw}) "
            f"does not fit padded input {hp}x{wp}"
        )
    return (hp - eff_kh) // stride + 1, (wp - eff_kw) // stride + 1


if _USE_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(xpad, col, kh, kw, hout, wout, stride, dilation):
        n, cin = xpad.shape[0], xpad.shape[1]
        for k in prange(cin * kh * kw):
            ci = k // (kh * kw)
            r = k % (kh * kw)
            ki = r // kw
            kj = r % kw
            for b in range(n):
                for oy in range(hout):
                    iy = oy * stride + ki * dilation
                    base = (b * hout + oy) * wout
                    for ox in range(wout):
                        col[k, base + ox] = xpad[b, ci, iy, ox * stride + kj * dilation]

    @njit(cache=True, parallel=True)
    def _matmul_bias_rows_nb(w2, col, bias, out):
        cout, kdim = w2.shape
        p = col.shape[1]
        for co in prange(cout):
            o = out[co]
            b = bias[co]
            for j in range(p):
                o[j] = b
            for k in range(kdim):
                wv = w2[co, k]
                ck = col[k]
                for j in range(p):
                    o[j] += wv * ck[j]

    @njit(cache=True, parallel=True)
    def _col2im_add_nb(gcol, gxpad, kh, kw, hout, wout, stride, dilation):
        n, cin = gxpad.shape[0], gxpad.shape[1]
        for bc in prange(n * cin):
            b = bc // cin
            ci = bc % cin
            for ki in range(kh):
                for kj in range(kw):
                    k = (ci * kh + ki) * kw + kj
                    for oy in range(hout):
                        iy = oy * stride + ki * dilation
                        base = (b * hout + oy) * wout
                        for ox in range(wout):
                            gxpad[b, ci, iy, ox * stride + kj * dilation] += gcol[k, base + ox]


def _im2col_np(xpad, col, kh, kw, hout, wout, stride, dilation):
    n, cin = xpad.shape[0], xpad.shape[1]
    for ci in range(cin):
        for ki in range(kh):
            for kj in range(kw):
                k = (ci * kh + ki) * kw + kj
                patch = xpad[
                    :,
                    ci,
                    ki * dilation : ki * dilation + stride * hout : stride,
                    kj * dilation : kj * dilation + stride * wout : stride,
                ]
                col[k] = patch.reshape(n * hout * wout)


def _matmul_bias_rows_np(w2, col, bias, out):
    # += per tap keeps the (ci, ki, kj)-sequential order of the numba kernel
    out[:] = bias[:, None]
    for k in range(w2.shape[1]):
        out += w2[:, k : k + 1] * col[k][None, :]


def _col2im_add_np(gcol, gxpad, kh, kw, hout, wout, stride, dilation):
    n, cin = gxpad.shape[0], gxpad.shape[1]
    for ci in range(cin):
        for ki in range(kh):
            for kj in range(kw):
                k = (ci * kh + ki) * kw + kj
                gxpad[
                    :,
                    ci,
                    ki * dilation : ki * dilation + stride * hout : stride,
                    kj * dilation : kj * dilation + stride * wout : stride,
                ] += gcol[k].reshape(n, hout, wout)


def im2col(xpad, kh, kw, hout, wout, stride, dilation):
    n, cin = xpad.shape[0], xpad.shape[1]
    col = np.empty((cin * kh * kw, n * hout * wout))
    if _USE_NUMBA:
        _im2col_nb(xpad, col, kh, kw, hout, wout, stride, dilation)
    else:
        _im2col_np(xpad, col, kh, kw, hout, wout, stride, dilation)
    return col


def conv2d_forward(xpad, w, bias, stride, dilation):
    """Cross-correlation on an already padded input.

    Per output element: acc = bias, then acc += w[ci,ki,kj] * x[...] with
    (ci, ki, kj) advancing in C order.  Returns (out, col); col is handed
    back for the caller to reuse or drop.
    """
    n = xpad.shape[0]
    cout, cin, kh, kw = w.shape
    hout, wout = conv_geometry(
        xpad.shape[2] - 0, xpad.shape[3] - 0, kh, kw, stride, dilation, 0
    )
    col = im2col(xpad, kh, kw, hout, wout, stride, dilation)
    w2 = np.ascontiguousarray(w.reshape(cout, cin * kh * kw))
    b = bias if bias is not None else np.zeros(cout)
    out = np.empty((cout, n * hout * wout))
    if _USE_NUMBA:
        _matmul_bias_rows_nb(w2, col, b, out)
    else:
        _matmul_bias_rows_np(w2, col, b, out)
    out = np.ascontiguousarray(
        out.reshape(cout, n, hout, wout).transpose(1, 0, 2, 3)
    )
    return out, col


def conv2d_backward(g, xpad, w, col, stride, dilation, need_x, need_w):
    """Gradients w.r.t. padded input and weights; col from the forward pass
    (recomputed here if the caller dropped it)."""
    n, cout, hout, wout = g.shape
    _, cin, kh, kw = w.shape
    if col is None:
        col = im2col(xpad, kh, kw, hout, wout, stride, dilation)
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3).reshape(cout, n * hout * wout))
    grad_w = grad_xpad = None
    if need_w:
        grad_w = (g2 @ col.T).reshape(cout, cin, kh, kw)
    if need_x:
        w2 = w.reshape(cout, cin * kh * kw)
        gcol = w2.T @ g2
        grad_xpad = np.zeros_like(xpad)
        if _USE_NUMBA:
            _col2im_add_nb(gcol, grad_xpad, kh, kw, hout, wout, stride, dilation)
        else:
            _col2im_add_np(gcol, grad_xpad, kh, kw, hout, wout, stride, dilation)
    return grad_xpad, grad_w
