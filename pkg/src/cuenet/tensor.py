"""Dense tensor substrate: validated ndarray operations with work counting.

Tensors are plain numpy arrays in one of two supported precisions
(float32 or float64), row-major element order.  Every operation defined here
validates operand extents and precision agreement before computing, and the
operations that perform multiply-add work report it through
:mod:`cuenet.instrument` at execution time, so instrumented counts reflect the
shapes actually run.

Counting convention: one fused multiply-add pair is one unit.  A matrix
product of an m-by-k by a k-by-n operand therefore reports ``m*k*n``.
Comparisons, exponentials, normalization statistics, and plain additions
report nothing; this exclusion is deliberate and shared with the analytic
cost model in :mod:`cuenet.analysis`.

Reductions performed with a BLAS backend accumulate in a fixed order chosen
by the backend, so repeated runs on the same machine are bit-identical even
though the order is not literal left-to-right.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ParamError, ShapeError
from .instrument import add_macs

# Supported element precisions, keyed by their external names.
DTYPES = {"single": np.float32, "double": np.float64}
PRECISION_NAMES = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}


def dtype_of(precision):
    """Map a precision name to its numpy dtype."""
    try:
        return DTYPES[precision]
    except KeyError:
        raise ParamError(f"unknown precision {precision!r}; expected one of "
                         f"{sorted(DTYPES)}") from None


def precision_of(array):
    """Map an array's dtype back to its precision name."""
    try:
        return PRECISION_NAMES[array.dtype]
    except KeyError:
        raise ShapeError(f"unsupported element type {array.dtype}") from None


def check_tensor(array, rank=None, name="tensor"):
    """Validate that ``array`` is a supported-precision ndarray."""
    if not isinstance(array, np.ndarray):
        raise ShapeError(f"{name} is not an ndarray: {type(array).__name__}")
    if array.dtype not in PRECISION_NAMES:
        raise ShapeError(f"{name} has unsupported element type {array.dtype}")
    if rank is not None and array.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {array.shape}")
    return array


def _check_same_precision(a, b, op):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed precisions {precision_of(a)} and "
                         f"{precision_of(b)}")


# ---------------------------------------------------------------------------
# index arithmetic
# ---------------------------------------------------------------------------

def flat_index(shape, index):
    """Row-major flat offset of a multi-index."""
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} does not match shape rank "
                         f"{len(shape)}")
    flat = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise ShapeError(f"index {index} out of bounds for shape {shape}")
        flat = flat * extent + i
    return flat


def unflat_index(shape, flat):
    """Inverse of :func:`flat_index`."""
    total = 1
    for extent in shape:
        total *= extent
    if not 0 <= flat < total:
        raise ShapeError(f"flat offset {flat} out of bounds for shape {shape}")
    index = []
    for extent in reversed(shape):
        index.append(flat % extent)
        flat //= extent
    return tuple(reversed(index))


# ---------------------------------------------------------------------------
# counted operations
# ---------------------------------------------------------------------------

def matmul(a, b, threads=1):
    """Matrix product of 2-d operands; reports ``m*k*n`` multiply-adds.

    With ``threads > 1`` the output rows are split into contiguous spans
    computed concurrently.  Each row's reduction is unchanged, so the result
    matches the sequential product to within accumulation-order noise of the
    shared backend (and is typically bit-identical).
    """
    check_tensor(a, rank=2, name="matmul left operand")
    check_tensor(b, rank=2, name="matmul right operand")
    _check_same_precision(a, b, "matmul")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    add_macs(m * k * n)
    if threads > 1 and m >= 2 * threads:
        out = np.empty((m, n), dtype=a.dtype)
        bounds = [(m * i) // threads for i in range(threads + 1)]
        def run(lo, hi):
            np.matmul(a[lo:hi], b, out=out[lo:hi])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for future in [pool.submit(run, lo, hi)
                           for lo, hi in zip(bounds, bounds[1:]) if hi > lo]:
                future.result()
        return out
    return a @ b


def mul(a, b):
    """Elementwise (broadcast) product; reports one unit per output element."""
    check_tensor(a, name="mul left operand")
    check_tensor(b, name="mul right operand")
    _check_same_precision(a, b, "mul")
    out = a * b
    add_macs(out.size)
    return out


def scale(a, s):
    """Scalar multiple of a tensor; reports one unit per element."""
    check_tensor(a, name="scale operand")
    out = a * a.dtype.type(s)
    add_macs(out.size)
    return out


def mean_rows(x):
    """Column means of an n-by-d matrix as a 1-by-d row.

    Charged one unit per output element for the final scaling; the summation
    itself follows the addition exclusion.
    """
    check_tensor(x, rank=2, name="mean_rows operand")
    if x.shape[0] == 0:
        raise ShapeError("mean_rows of an empty matrix")
    out = x.mean(axis=0, keepdims=True)
    add_macs(x.shape[1])
    return out


def conv3d(x, kernel, stride, padding=(0, 0, 0)):
    """Valid cross-correlation of a (T,H,W,C) volume with a 5-d kernel.

    ``kernel`` has extents (kt,kh,kw,c_in,c_out); the input is zero-padded by
    ``padding`` per spatial-temporal axis before the valid sweep.  Output
    extents follow the floor convention ``(in + 2p - k)//s + 1``.  Reports
    ``out_elements * kt*kh*kw*c_in`` multiply-adds.
    """
    check_tensor(x, rank=4, name="conv3d input")
    check_tensor(kernel, rank=5, name="conv3d kernel")
    _check_same_precision(x, kernel, "conv3d")
    if len(stride) != 3 or any(int(s) != s or s <= 0 for s in stride):
        raise ParamError(f"conv3d stride must be three positive integers, got "
                         f"{stride}")
    if len(padding) != 3 or any(int(p) != p or p < 0 for p in padding):
        raise ParamError(f"conv3d padding must be three non-negative integers, "
                         f"got {padding}")
    kt, kh, kw, c_in, c_out = kernel.shape
    if c_in != x.shape[3]:
        raise ShapeError(f"conv3d kernel expects {c_in} input channels, "
                         f"input has {x.shape[3]}")
    pt, ph, pw = (int(p) for p in padding)
    padded = np.pad(x, ((pt, pt), (ph, ph), (pw, pw), (0, 0)))
    if kt > padded.shape[0] or kh > padded.shape[1] or kw > padded.shape[2]:
        raise ShapeError(f"conv3d kernel {kernel.shape[:3]} exceeds padded "
                         f"input {padded.shape[:3]}")
    st, sh, sw = (int(s) for s in stride)
    windows = sliding_window_view(padded, (kt, kh, kw), axis=(0, 1, 2))
    windows = windows[::st, ::sh, ::sw]
    out = np.einsum("thwcijk,ijkco->thwo", windows, kernel)
    add_macs(out.size * kt * kh * kw * c_in)
    return out


def dwconv3d(x, kernel):
    """Depthwise shape-preserving convolution of a (T,H,W,D) volume.

    ``kernel`` has extents (kt,kh,kw,D) with every window extent odd; the
    input is zero-padded so output extents equal input extents.  Channels
    never mix.  Reports ``elements * kt*kh*kw`` multiply-adds.
    """
    check_tensor(x, rank=4, name="dwconv3d input")
    check_tensor(kernel, rank=4, name="dwconv3d kernel")
    _check_same_precision(x, kernel, "dwconv3d")
    kt, kh, kw, d = kernel.shape
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ParamError(f"dwconv3d kernel extents must be odd, got "
                         f"{(kt, kh, kw)}")
    if d != x.shape[3]:
        raise ShapeError(f"dwconv3d kernel expects {d} channels, input has "
                         f"{x.shape[3]}")
    padded = np.pad(x, ((kt // 2, kt // 2), (kh // 2, kh // 2),
                        (kw // 2, kw // 2), (0, 0)))
    windows = sliding_window_view(padded, (kt, kh, kw), axis=(0, 1, 2))
    out = np.einsum("thwcijk,ijkc->thwc", windows, kernel)
    add_macs(out.size * kt * kh * kw)
    return out


# ---------------------------------------------------------------------------
# uncounted nonlinearities and statistics
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean, unit population variance.

    ``gamma`` and ``beta`` are per-feature affine terms of extent equal to
    the last axis.  Statistic work is excluded from multiply-add counts.
    """
    check_tensor(x, name="layer_norm input")
    check_tensor(gamma, rank=1, name="layer_norm gamma")
    check_tensor(beta, rank=1, name="layer_norm beta")
    d = x.shape[-1]
    if gamma.shape[0] != d or beta.shape[0] != d:
        raise ShapeError(f"layer_norm affine extent {gamma.shape[0]} vs "
                         f"feature extent {d}")
    _check_same_precision(x, gamma, "layer_norm")
    _check_same_precision(x, beta, "layer_norm")
    if eps <= 0:
        raise ParamError(f"layer_norm eps must be positive, got {eps}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + x.dtype.type(eps))
    return normed * gamma + beta


def gelu(x):
    """Exact Gaussian error linear unit, x * Phi(x) via the error function."""
    check_tensor(x, name="gelu input")
    half = x.dtype.type(0.5)
    inv_sqrt2 = x.dtype.type(1.0 / np.sqrt(2.0))
    return half * x * (1.0 + erf(x * inv_sqrt2))


def softmax_rows(x):
    """Row-wise softmax of a 2-d matrix, max-shifted for overflow safety."""
    check_tensor(x, rank=2, name="softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    """Elementwise logistic function."""
    check_tensor(x, name="sigmoid input")
    return expit(x)
