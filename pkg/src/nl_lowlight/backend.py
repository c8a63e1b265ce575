"""Hot-loop kernels, each in a numba and a pure-numpy implementation.

The active implementation is chosen once at import time: numba when it
is importable, numpy otherwise.  Setting NL_LOWLIGHT_NO_NUMBA=1 forces
the numpy path regardless.  `IMPLEMENTATIONS` keeps both families
addressable so the benchmark (`python -m nl_lowlight.bench`) can time
them side by side.

Randomness is counter-based rather than stateful: a 64-bit key plus an
element counter (plus a per-element draw counter where a variable
number of draws is needed) is hashed through the splitmix64 finalizer.
Any element's draws can therefore be produced in any order or on any
thread without changing the result, which is what makes batch
degradation parallel-safe.
"""

from __future__ import annotations

import math
import os

import numpy as np

_MASK64 = (1 << 64) - 1
_PHI = 0x9E3779B97F4A7C15  # splitmix64 increment
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_NEG52 = 2.0 ** -52

# Poisson sampling switches from Knuth multiplication to the Gaussian
# approximation at this mean.
KNUTH_MAX = 30.0

# Acklam's rational approximation to the inverse normal CDF
# (~1.15e-9 relative error, far below the statistical tolerances here).
_A0, _A1, _A2, _A3, _A4, _A5 = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B0, _B1, _B2, _B3, _B4 = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01)
_C0, _C1, _C2, _C3, _C4, _C5 = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D0, _D1, _D2, _D3 = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00)
_P_LOW = 0.02425
_P_HIGH = 1.0 - _P_LOW


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


FORCE_NUMPY = _env_flag("NL_LOWLIGHT_NO_NUMBA")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):  # pragma: no cover - numba always present in CI
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = NUMBA_AVAILABLE and not FORCE_NUMPY
BACKEND = "numba" if USE_NUMBA else "numpy"


def threads() -> int:
    """Worker cap from NL_LOWLIGHT_THREADS (0 or unset = auto)."""
    try:
        k = int(os.environ.get("NL_LOWLIGHT_THREADS", "0"))
    except ValueError:
        k = 0
    if k <= 0:
        return min(8, os.cpu_count() or 1)
    return k


# ---------------------------------------------------------------------------
# Stream derivation (scalar, python ints with explicit 64-bit wrap).
# ---------------------------------------------------------------------------

def finalize64(z: int) -> int:
    """splitmix64 output finalizer on a 64-bit value."""
    z &= _MASK64
    z ^= z >> 30
    z = (z * _M1) & _MASK64
    z ^= z >> 27
    z = (z * _M2) & _MASK64
    z ^= z >> 31
    return z


def derive_stream(*parts: int) -> int:
    """Fold integers (seed, tags, indices) into one 64-bit stream key.

    Keys for distinct purposes must use distinct tag parts: the key
    addresses a whole counter space, so reusing one across two fields
    would replay the same uniforms.
    """
    key = 0
    for p in parts:
        key = finalize64(key ^ (int(p) & _MASK64))
    return key


# ---------------------------------------------------------------------------
# numpy implementations.
# ---------------------------------------------------------------------------

def _finalize_np(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def _u01_np(bits: np.ndarray) -> np.ndarray:
    # 52 high bits -> (0,1) strictly, step 2^-52; never returns 0 or 1.
    return ((bits >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_NEG52


def _counters_np(key: int, start: int, n: int) -> np.ndarray:
    idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    return np.uint64(key) + idx * np.uint64(_PHI)


def _tail_poly_np(q: np.ndarray) -> np.ndarray:
    num = ((((_C0 * q + _C1) * q + _C2) * q + _C3) * q + _C4) * q + _C5
    den = (((_D0 * q + _D1) * q + _D2) * q + _D3) * q + 1.0
    return num / den


def _ndtri_np(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > _P_HIGH
    mid = ~(lo | hi)
    if lo.any():
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = _tail_poly_np(q)
    if hi.any():
        q = np.sqrt(-2.0 * np.log(1.0 - p[hi]))
        x[hi] = -_tail_poly_np(q)
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = ((((_A0 * r + _A1) * r + _A2) * r + _A3) * r + _A4) * r + _A5
        den = ((((_B0 * r + _B1) * r + _B2) * r + _B3) * r + _B4) * r + 1.0
        x[mid] = num * q / den
    return x


def _uniform_field_np(key: int, n: int, offset: int = 0) -> np.ndarray:
    return _u01_np(_finalize_np(_counters_np(key, offset, n)))


def _normal_field_np(key: int, n: int) -> np.ndarray:
    return _ndtri_np(_uniform_field_np(key, n))


def _poisson_field_np(lam: np.ndarray, key: int) -> np.ndarray:
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    n = lam.size
    out = np.zeros(n, dtype=np.int64)
    pk = _finalize_np(_counters_np(key, 0, n))

    big = lam >= KNUTH_MAX
    if big.any():
        u = _u01_np(_finalize_np(pk[big] + np.uint64(_PHI)))
        z = _ndtri_np(u)
        k = np.floor(lam[big] + np.sqrt(lam[big]) * z + 0.5)
        out[big] = np.maximum(k, 0.0).astype(np.int64)

    small = (lam > 0.0) & ~big
    if small.any():
        pks = pk[small]
        limit = np.exp(-lam[small])
        # Knuth in lockstep rounds: round r multiplies draw r into every
        # still-active product, matching the scalar loop's draw order.
        p = _u01_np(_finalize_np(pks + np.uint64(_PHI)))
        k = np.zeros(p.size, dtype=np.int64)
        draw = 1
        active = p > limit
        while active.any():
            k[active] += 1
            draw += 1
            step = np.uint64((draw * _PHI) & _MASK64)
            p[active] *= _u01_np(_finalize_np(pks[active] + step))
            active = p > limit
        out[small] = k
    return out


def _conv3x3_s2_forward_np(x, weight, bias):
    c_in, h, w = x.shape
    c_out = weight.shape[0]
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:h + 1, 1:w + 1] = x
    out = np.empty((c_out, ho, wo))
    for o in range(c_out):
        acc = np.full((ho, wo), bias[o])
        # fixed (c, kh, kw) tap order keeps sums bit-identical to the
        # numba kernel's scalar accumulation
        for c in range(c_in):
            for kh in range(3):
                for kw in range(3):
                    acc = acc + weight[o, c, kh, kw] * xp[c, kh:kh + 2 * ho - 1:2, kw:kw + 2 * wo - 1:2]
        out[o] = acc
    return out


def _conv3x3_s2_input_backward_np(dy, weight, h, w):
    c_out, ho, wo = dy.shape
    c_in = weight.shape[1]
    dxp = np.zeros((c_in, h + 2, w + 2))
    for o in range(c_out):
        for c in range(c_in):
            for kh in range(3):
                for kw in range(3):
                    dxp[c, kh:kh + 2 * ho - 1:2, kw:kw + 2 * wo - 1:2] += weight[o, c, kh, kw] * dy[o]
    return dxp[:, 1:h + 1, 1:w + 1]


def _interval_intersection_np(sa, ea, sb, eb):
    i = j = 0
    total = 0
    while i < sa.size and j < sb.size:
        lo = max(sa[i], sb[j])
        hi = min(ea[i], eb[j])
        if hi > lo:
            total += int(hi - lo)
        if ea[i] < eb[j]:
            i += 1
        else:
            j += 1
    return total


def _rasterize_polygon_np(xs, ys, h, w):
    out = np.zeros((h, w), dtype=np.uint8)
    x2 = np.roll(xs, -1)
    y2 = np.roll(ys, -1)
    for row in range(h):
        py = row + 0.5
        crossing = (ys > py) != (y2 > py)
        if not crossing.any():
            continue
        t = (py - ys[crossing]) / (y2[crossing] - ys[crossing])
        xc = np.sort(xs[crossing] + t * (x2[crossing] - xs[crossing]))
        for k in range(0, xc.size - 1, 2):
            # pixel centers col+0.5 in the half-open span [xc[k], xc[k+1])
            c0 = max(0, math.ceil(xc[k] - 0.5))
            c1 = min(w, math.ceil(xc[k + 1] - 0.5))
            if c1 > c0:
                out[row, c0:c1] = 1
    return out


# ---------------------------------------------------------------------------
# numba implementations (scalar twins of the above).
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:
    _PHI_U = np.uint64(_PHI)
    _M1_U = np.uint64(_M1)
    _M2_U = np.uint64(_M2)

    @njit(cache=True)
    def _finalize_nb(z):
        z ^= z >> np.uint64(30)
        z *= _M1_U
        z ^= z >> np.uint64(27)
        z *= _M2_U
        z ^= z >> np.uint64(31)
        return z

    @njit(cache=True)
    def _u01_nb(bits):
        return (np.float64(bits >> np.uint64(12)) + 0.5) * _TWO_NEG52

    @njit(cache=True)
    def _ndtri_nb(p):
        if p < _P_LOW:
            q = math.sqrt(-2.0 * math.log(p))
            num = ((((_C0 * q + _C1) * q + _C2) * q + _C3) * q + _C4) * q + _C5
            den = (((_D0 * q + _D1) * q + _D2) * q + _D3) * q + 1.0
            return num / den
        if p > _P_HIGH:
            q = math.sqrt(-2.0 * math.log(1.0 - p))
            num = ((((_C0 * q + _C1) * q + _C2) * q + _C3) * q + _C4) * q + _C5
            den = (((_D0 * q + _D1) * q + _D2) * q + _D3) * q + 1.0
            return -num / den
        q = p - 0.5
        r = q * q
        num = ((((_A0 * r + _A1) * r + _A2) * r + _A3) * r + _A4) * r + _A5
        den = ((((_B0 * r + _B1) * r + _B2) * r + _B3) * r + _B4) * r + 1.0
        return num * q / den

    @njit(cache=True)
    def _uniform_field_nb(key, n, offset):
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            ctr = key + np.uint64(offset + i + 1) * _PHI_U
            out[i] = _u01_nb(_finalize_nb(ctr))
        return out

    @njit(cache=True)
    def _normal_field_nb(key, n):
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            ctr = key + np.uint64(i + 1) * _PHI_U
            out[i] = _ndtri_nb(_u01_nb(_finalize_nb(ctr)))
        return out

    @njit(cache=True)
    def _poisson_field_nb(lam, key):
        n = lam.size
        out = np.zeros(n, dtype=np.int64)
        for i in range(n):
            lm = lam[i]
            if lm <= 0.0:
                continue
            pk = _finalize_nb(key + np.uint64(i + 1) * _PHI_U)
            if lm >= KNUTH_MAX:
                u = _u01_nb(_finalize_nb(pk + _PHI_U))
                z = _ndtri_nb(u)
                k = math.floor(lm + math.sqrt(lm) * z + 0.5)
                out[i] = np.int64(k) if k > 0.0 else np.int64(0)
            else:
                limit = math.exp(-lm)
                p = _u01_nb(_finalize_nb(pk + _PHI_U))
                k = 0
                d = 1
                while p > limit:
                    k += 1
                    d += 1
                    p *= _u01_nb(_finalize_nb(pk + np.uint64(d) * _PHI_U))
                out[i] = k
        return out

    @njit(cache=True)
    def _conv3x3_s2_forward_nb(x, weight, bias):
        c_in, h, w = x.shape
        c_out = weight.shape[0]
        ho = (h + 1) // 2
        wo = (w + 1) // 2
        out = np.empty((c_out, ho, wo))
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for c in range(c_in):
                        for kh in range(3):
                            y = 2 * i + kh - 1
                            if y < 0 or y >= h:
                                continue
                            for kw in range(3):
                                xx = 2 * j + kw - 1
                                if 0 <= xx < w:
                                    acc += weight[o, c, kh, kw] * x[c, y, xx]
                    out[o, i, j] = acc
        return out

    @njit(cache=True)
    def _conv3x3_s2_input_backward_nb(dy, weight, h, w):
        c_out, ho, wo = dy.shape
        c_in = weight.shape[1]
        dx = np.zeros((c_in, h, w))
        for o in range(c_out):
            for c in range(c_in):
                for kh in range(3):
                    for kw in range(3):
                        wv = weight[o, c, kh, kw]
                        for i in range(ho):
                            y = 2 * i + kh - 1
                            if y < 0 or y >= h:
                                continue
                            for j in range(wo):
                                xx = 2 * j + kw - 1
                                if 0 <= xx < w:
                                    dx[c, y, xx] += wv * dy[o, i, j]
        return dx

    @njit(cache=True)
    def _interval_intersection_nb(sa, ea, sb, eb):
        i = 0
        j = 0
        total = np.int64(0)
        while i < sa.size and j < sb.size:
            lo = max(sa[i], sb[j])
            hi = min(ea[i], eb[j])
            if hi > lo:
                total += hi - lo
            if ea[i] < eb[j]:
                i += 1
            else:
                j += 1
        return total

    @njit(cache=True)
    def _rasterize_polygon_nb(xs, ys, h, w):
        out = np.zeros((h, w), dtype=np.uint8)
        n = xs.size
        xc = np.empty(n, dtype=np.float64)
        for row in range(h):
            py = row + 0.5
            m = 0
            for k in range(n):
                y1 = ys[k]
                y2 = ys[(k + 1) % n]
                if (y1 > py) != (y2 > py):
                    x1 = xs[k]
                    x2 = xs[(k + 1) % n]
                    xc[m] = x1 + (py - y1) / (y2 - y1) * (x2 - x1)
                    m += 1
            if m == 0:
                continue
            span = np.sort(xc[:m])
            for k in range(0, m - 1, 2):
                c0 = int(math.ceil(span[k] - 0.5))
                c1 = int(math.ceil(span[k + 1] - 0.5))
                if c0 < 0:
                    c0 = 0
                if c1 > w:
                    c1 = w
                for c in range(c0, c1):
                    out[row, c] = 1
        return out


# ---------------------------------------------------------------------------
# Public dispatchers.
# ---------------------------------------------------------------------------

def uniform_field(key: int, n: int, offset: int = 0) -> np.ndarray:
    """n uniforms in (0,1) at counters offset+1 .. offset+n of a stream."""
    if USE_NUMBA:
        return _uniform_field_nb(np.uint64(key), n, offset)
    return _uniform_field_np(key, n, offset)


def normal_field(key: int, n: int) -> np.ndarray:
    """n standard normals, one per counter of the stream."""
    if USE_NUMBA:
        return _normal_field_nb(np.uint64(key), n)
    return _normal_field_np(key, n)


def poisson_field(lam: np.ndarray, key: int) -> np.ndarray:
    """Elementwise Poisson(lam[i]) counts addressed by (key, i, draw)."""
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    if USE_NUMBA:
        return _poisson_field_nb(lam, np.uint64(key))
    return _poisson_field_np(lam, key)


def ndtri(p) -> np.ndarray:
    """Inverse standard-normal CDF (rational approximation)."""
    return _ndtri_np(p)


def conv3x3_s2_forward(x, weight, bias) -> np.ndarray:
    """3x3 stride-2 convolution, zero padding 1; out spatial = ceil(in/2)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if USE_NUMBA:
        return _conv3x3_s2_forward_nb(x, weight, bias)
    return _conv3x3_s2_forward_np(x, weight, bias)


def conv3x3_s2_input_backward(dy, weight, h: int, w: int) -> np.ndarray:
    """Gradient of conv3x3_s2_forward w.r.t. its input."""
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if USE_NUMBA:
        return _conv3x3_s2_input_backward_nb(dy, weight, h, w)
    return _conv3x3_s2_input_backward_np(dy, weight, h, w)


def interval_intersection(sa, ea, sb, eb) -> int:
    """Total overlap of two sorted disjoint half-open interval lists."""
    sa = np.ascontiguousarray(sa, dtype=np.int64)
    ea = np.ascontiguousarray(ea, dtype=np.int64)
    sb = np.ascontiguousarray(sb, dtype=np.int64)
    eb = np.ascontiguousarray(eb, dtype=np.int64)
    if USE_NUMBA:
        return int(_interval_intersection_nb(sa, ea, sb, eb))
    return _interval_intersection_np(sa, ea, sb, eb)


def rasterize_polygon(xs, ys, h: int, w: int) -> np.ndarray:
    """Even-odd fill of one polygon sampled at pixel centers (x+0.5, y+0.5)."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if xs.size != ys.size or xs.size < 3:
        raise ValueError("polygon needs matching xs/ys with >= 3 vertices")
    if USE_NUMBA:
        return _rasterize_polygon_nb(xs, ys, h, w)
    return _rasterize_polygon_np(xs, ys, h, w)


IMPLEMENTATIONS = {
    "numpy": {
        "uniform_field": _uniform_field_np,
        "normal_field": _normal_field_np,
        "poisson_field": _poisson_field_np,
        "conv3x3_s2_forward": _conv3x3_s2_forward_np,
        "conv3x3_s2_input_backward": _conv3x3_s2_input_backward_np,
        "interval_intersection": _interval_intersection_np,
        "rasterize_polygon": _rasterize_polygon_np,
    },
}

if NUMBA_AVAILABLE:
    IMPLEMENTATIONS["numba"] = {
        "uniform_field": lambda key, n, offset=0: _uniform_field_nb(np.uint64(key), n, offset),
        "normal_field": lambda key, n: _normal_field_nb(np.uint64(key), n),
        "poisson_field": lambda lam, key: _poisson_field_nb(
            np.ascontiguousarray(lam, dtype=np.float64), np.uint64(key)),
        "conv3x3_s2_forward": _conv3x3_s2_forward_nb,
        "conv3x3_s2_input_backward": _conv3x3_s2_input_backward_nb,
        "interval_intersection": _interval_intersection_nb,
        "rasterize_polygon": _rasterize_polygon_nb,
    }
