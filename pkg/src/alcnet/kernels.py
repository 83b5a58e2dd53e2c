"""Hot numeric kernels for 2-D convolution.

Two interchangeable backends: numba-jitted loops and a pure-numpy
(strided-window + einsum) path. The jitted path is used when numba is
importable and the environment flag ALCNET_NUMBA is not set to 0/false;
the numpy path always remains importable so tests and benchmarks can
exercise both. See benchmarks/bench_kernels.py for the comparison.
"""

import os

import numpy as np


def _flag(value: str) -> bool:
    return value.strip().lower() not in ("0", "false", "no", "off")


_WANT_NUMBA = _flag(os.environ.get("ALCNET_NUMBA", "1"))

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAS_NUMBA and _WANT_NUMBA


def conv2d_out_shape(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # read-only strided view of all kxk patches, shape (Cin, k, k, Ho, Wo)
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], k, k, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    _, h, win = x.shape
    k = w.shape[2]
    ho, wo = conv2d_out_shape(h, win, k, stride, padding)
    xp = _pad2d(x, padding)
    view = _windows(xp, k, stride, ho, wo)
    return np.einsum("oikl,iklhw->ohw", w, view, optimize=True)


def conv2d_grad_weight_numpy(gy: np.ndarray, x: np.ndarray, stride: int, padding: int,
                             k: int) -> np.ndarray:
    ho, wo = gy.shape[1:]
    xp = _pad2d(x, padding)
    view = _windows(xp, k, stride, ho, wo)
    return np.einsum("ohw,iklhw->oikl", gy, view, optimize=True)


def conv2d_grad_input_numpy(gy: np.ndarray, w: np.ndarray, stride: int, padding: int,
                            x_shape: tuple[int, int, int]) -> np.ndarray:
    cin, h, win = x_shape
    k = w.shape[2]
    ho, wo = gy.shape[1:]
    gxp = np.zeros((cin, h + 2 * padding, win + 2 * padding))
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(w[:, :, ki, kj], gy, axes=(0, 0))
            gxp[:, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += contrib
    if padding == 0:
        return gxp
    return gxp[:, padding:padding + h, padding:padding + win]


# ---------------------------------------------------------------------------
# numba backend; the stride-1 bodies keep the inner index affine (j + kj)
# because a runtime stride multiply in the inner loop defeats the vectorizer,
# and the hoisted 1-D row views avoid per-element 3-D index arithmetic
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv2d_forward_jit(xp, w, stride, ho, wo):  # pragma: no cover - compiled
    cout, cin, k, _ = w.shape
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for ci in range(cin):
            for ki in range(k):
                for kj in range(k):
                    wv = w[co, ci, ki, kj]
                    if stride == 1:
                        for i in range(ho):
                            row = xp[ci, i + ki]
                            orow = out[co, i]
                            for j in range(wo):
                                orow[j] += wv * row[j + kj]
                    else:
                        for i in range(ho):
                            row = xp[ci, i * stride + ki]
                            orow = out[co, i]
                            for j in range(wo):
                                orow[j] += wv * row[j * stride + kj]
    return out


@njit(cache=True)
def _conv2d_grad_input_jit(gy, w, stride, hp, wp):  # pragma: no cover - compiled
    cout, cin, k, _ = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gxp = np.zeros((cin, hp, wp))
    for co in range(cout):
        for ci in range(cin):
            for ki in range(k):
                for kj in range(k):
                    wv = w[co, ci, ki, kj]
                    if stride == 1:
                        for i in range(ho):
                            grow = gxp[ci, i + ki]
                            gyrow = gy[co, i]
                            for j in range(wo):
                                grow[j + kj] += wv * gyrow[j]
                    else:
                        for i in range(ho):
                            grow = gxp[ci, i * stride + ki]
                            gyrow = gy[co, i]
                            for j in range(wo):
                                grow[j * stride + kj] += wv * gyrow[j]
    return gxp


# fastmath licenses the reassociation a vectorized reduction needs; the
# summation order is fixed per build, so runs remain bit-reproducible
@njit(cache=True, fastmath=True)
def _conv2d_grad_weight_jit(gy, xp, stride, k):  # pragma: no cover - compiled
    cout = gy.shape[0]
    cin = xp.shape[0]
    ho, wo = gy.shape[1], gy.shape[2]
    gw = np.zeros((cout, cin, k, k))
    for co in range(cout):
        for ci in range(cin):
            for ki in range(k):
                for kj in range(k):
                    acc = 0.0
                    if stride == 1:
                        for i in range(ho):
                            row = xp[ci, i + ki]
                            gyrow = gy[co, i]
                            for j in range(wo):
                                acc += gyrow[j] * row[j + kj]
                    else:
                        for i in range(ho):
                            row = xp[ci, i * stride + ki]
                            gyrow = gy[co, i]
                            for j in range(wo):
                                acc += gyrow[j] * row[j * stride + kj]
                    gw[co, ci, ki, kj] = acc
    return gw


def conv2d_forward_jit(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    _, h, win = x.shape
    k = w.shape[2]
    ho, wo = conv2d_out_shape(h, win, k, stride, padding)
    xp = _pad2d(x, padding)
    return _conv2d_forward_jit(xp, np.ascontiguousarray(w), stride, ho, wo)


def conv2d_grad_input_jit(gy: np.ndarray, w: np.ndarray, stride: int, padding: int,
                          x_shape: tuple[int, int, int]) -> np.ndarray:
    cin, h, win = x_shape
    hp, wp = h + 2 * padding, win + 2 * padding
    gxp = _conv2d_grad_input_jit(np.ascontiguousarray(gy), np.ascontiguousarray(w), stride, hp, wp)
    if padding == 0:
        return gxp
    return gxp[:, padding:padding + h, padding:padding + win]


def conv2d_grad_weight_jit(gy: np.ndarray, x: np.ndarray, stride: int, padding: int,
                           k: int) -> np.ndarray:
    xp = _pad2d(x, padding)
    return _conv2d_grad_weight_jit(np.ascontiguousarray(gy), xp, stride, k)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    conv2d_forward = conv2d_forward_jit
    conv2d_grad_input = conv2d_grad_input_jit
    conv2d_grad_weight = conv2d_grad_weight_jit
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_grad_input = conv2d_grad_input_numpy
    conv2d_grad_weight = conv2d_grad_weight_numpy
