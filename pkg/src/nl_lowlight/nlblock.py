"""Weighted non-local feature-denoising block.

Forward path: flatten spatial positions, build a pairwise similarity
matrix in one of three forms, average value embeddings under it,
project back through a 1x1 conv, then mix with the input via a
learnable scalar: z = w * y + (1 - w) * x.  At w = 0 the block is the
identity bit-for-bit; at w = 1 it is the pure denoised path.

Backward path: exact analytic gradients for every parameter and the
input, verified against central finite differences by gradcheck().
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import backend
from .errors import ArgumentError, ContractError, DimensionError, NumericError, ValidationError
from .tensor import as_tensor, conv1x1, flatten_spatial, softmax_rows, unflatten_spatial

W_INIT = 0.1  # near-identity start: the unmodified feature path dominates early


class NLForm(Enum):
    DOT_PRODUCT = "dot-product"
    GAUSSIAN = "gaussian"
    EMBEDDED_GAUSSIAN = "embedded-gaussian"


def parse_form(name: str) -> NLForm:
    for f in NLForm:
        if f.value == name:
            return f
    known = ", ".join(f.value for f in NLForm)
    raise ArgumentError(f"unknown NL form {name!r} (known: {known})")


@dataclass
class NLBlockParams:
    form: NLForm
    c_in: int
    c_mid: int
    theta_w: np.ndarray | None  # (c_mid, c_in); None for the Gaussian form
    phi_w: np.ndarray | None    # (c_mid, c_in); None for the Gaussian form
    g_w: np.ndarray             # (c_mid, c_in)
    wz_w: np.ndarray            # (c_in, c_mid)
    wz_b: np.ndarray            # (c_in,)
    w: float                    # mixing weight, kept in [0,1] by the optimizer


@dataclass
class NLGradients:
    theta_w: np.ndarray | None
    phi_w: np.ndarray | None
    g_w: np.ndarray
    wz_w: np.ndarray
    wz_b: np.ndarray
    w: float
    d_input: np.ndarray


@dataclass
class NLCache:
    params: NLBlockParams
    x: np.ndarray
    xm: np.ndarray       # flattened input, (N, c_in)
    q: np.ndarray | None
    k: np.ndarray | None
    g: np.ndarray        # value embedding, (N, c_mid)
    attention: np.ndarray
    ym: np.ndarray       # attention @ g, (N, c_mid)
    y: np.ndarray        # post-conv denoised path, same shape as x
    z: np.ndarray


@dataclass
class GradcheckReport:
    form: NLForm
    shape: tuple
    seed: int
    max_rel_err: float
    worst: str
    passed: bool


def _uniform_array(key: int, shape, low: float, high: float) -> np.ndarray:
    n = int(np.prod(shape))
    u = backend.uniform_field(key, n)
    return (low + (high - low) * u).reshape(shape)


def init_params(form: NLForm, c_in: int, reduction: int = 2, seed: int = 0) -> NLBlockParams:
    """Fresh block parameters; embeddings He-uniform, w = W_INIT.

    The output projection starts as a scaled right-inverse of the value
    embedding, so the denoised path opens as a gained smoother on the
    bottleneck subspace instead of noise.  Without the head start, the
    scalar gate w (whose gradient aggregates the whole stage) collapses
    to 0 before the projections can learn anything, and w = 0 gates
    their gradients off permanently.
    """
    if reduction not in (2, 4):
        raise ArgumentError(f"reduction must be 2 or 4, got {reduction}")
    if c_in % reduction != 0 or c_in // reduction < 1:
        raise ArgumentError(f"c_in={c_in} not divisible by reduction={reduction}")
    c_mid = c_in // reduction
    lim_in = float(np.sqrt(6.0 / c_in))
    key = lambda tag: backend.derive_stream(seed, 0x4E4C, tag)  # block-param stream
    needs_qk = form is not NLForm.GAUSSIAN
    theta = _uniform_array(key(1), (c_mid, c_in), -lim_in, lim_in) if needs_qk else None
    phi = _uniform_array(key(2), (c_mid, c_in), -lim_in, lim_in) if needs_qk else None
    g = _uniform_array(key(3), (c_mid, c_in), -lim_in, lim_in)
    wz = 2.0 * (c_in / c_mid) * np.linalg.pinv(g)
    wz_b = np.zeros(c_in)
    return NLBlockParams(form, c_in, c_mid, theta, phi, g, wz, wz_b, W_INIT)


def _forward_full(x, p: NLBlockParams) -> NLCache:
    x = as_tensor(x, rank=3)
    c, h, w = x.shape
    if c != p.c_in:
        raise DimensionError(f"block expects {p.c_in} channels, input has shape {x.shape}")
    xm = flatten_spatial(x)
    n = xm.shape[0]
    q = k = None
    try:
        if p.form is NLForm.GAUSSIAN:
            att = softmax_rows(xm @ xm.T)
        elif p.form is NLForm.EMBEDDED_GAUSSIAN:
            q = xm @ p.theta_w.T
            k = xm @ p.phi_w.T
            att = softmax_rows(q @ k.T)
        else:
            q = xm @ p.theta_w.T
            k = xm @ p.phi_w.T
            att = (q @ k.T) / n
    except NumericError as e:
        raise NumericError(f"{p.form.value}: {e}") from e
    g = xm @ p.g_w.T
    ym = att @ g
    y = conv1x1(unflatten_spatial(ym, h, w), p.wz_w, p.wz_b)
    if not np.isfinite(y).all():
        raise NumericError(f"{p.form.value}: non-finite denoised output")
    # exact short-circuits keep the w=0 / w=1 gates bit-true
    if p.w == 0.0:
        z = x.copy()
    elif p.w == 1.0:
        z = y.copy()
    else:
        z = p.w * y + (1.0 - p.w) * x
    return NLCache(p, x, xm, q, k, g, att, ym, y, z)


def nl_operation(x, p: NLBlockParams):
    """Denoised path y (post 1x1 conv) and the attention matrix."""
    cache = _forward_full(x, p)
    return cache.y, cache.attention


def block_forward(x, p: NLBlockParams):
    """z = w*y + (1-w)*x plus the cache block_backward needs."""
    cache = _forward_full(x, p)
    return cache.z, cache


def block_backward(cache: NLCache, d_z, p: NLBlockParams) -> NLGradients:
    """Analytic gradients of a scalar loss given upstream d_z."""
    if cache.params is not p:
        raise ContractError("cache was produced with different parameters")
    d_z = as_tensor(d_z, rank=3)
    if d_z.shape != cache.x.shape:
        raise DimensionError(f"d_z shape {d_z.shape} vs input {cache.x.shape}")
    xm, att, g = cache.xm, cache.attention, cache.g
    n = xm.shape[0]
    h, w = cache.x.shape[1], cache.x.shape[2]

    d_w = float(np.sum(d_z * (cache.y - cache.x)))
    dzm = flatten_spatial(d_z)
    dy = p.w * dzm                       # (N, c_in): gradient into the conv output
    d_wz = dy.T @ cache.ym               # (c_in, c_mid)
    d_wzb = dy.sum(axis=0)
    d_ym = dy @ p.wz_w                   # (N, c_mid)
    d_att = d_ym @ g.T                   # (N, N)
    d_g_emb = att.T @ d_ym               # (N, c_mid)
    d_gw = d_g_emb.T @ xm
    dxm = d_g_emb @ p.g_w

    if p.form is NLForm.DOT_PRODUCT:
        d_s = d_att / n
        d_q = d_s @ cache.k
        d_k = d_s.T @ cache.q
        d_theta = d_q.T @ xm
        d_phi = d_k.T @ xm
        dxm += d_q @ p.theta_w + d_k @ p.phi_w
    else:
        # softmax row jacobian: dS = A * (dA - rowsum(dA * A))
        rowdot = (d_att * att).sum(axis=1, keepdims=True)
        d_s = att * (d_att - rowdot)
        if p.form is NLForm.EMBEDDED_GAUSSIAN:
            d_q = d_s @ cache.k
            d_k = d_s.T @ cache.q
            d_theta = d_q.T @ xm
            d_phi = d_k.T @ xm
            dxm += d_q @ p.theta_w + d_k @ p.phi_w
        else:
            d_theta = d_phi = None
            dxm += (d_s + d_s.T) @ xm    # S = X X^T is symmetric in X

    d_input = unflatten_spatial(dxm, h, w) + (1.0 - p.w) * d_z
    return NLGradients(d_theta, d_phi, d_gw, d_wz, d_wzb, d_w, d_input)


def _param_arrays(p: NLBlockParams, x: np.ndarray):
    """(name, array) pairs gradcheck perturbs, input included."""
    pairs = [("input", x)]
    if p.theta_w is not None:
        pairs.append(("theta_w", p.theta_w))
        pairs.append(("phi_w", p.phi_w))
    pairs.extend([("g_w", p.g_w), ("wz_w", p.wz_w), ("wz_b", p.wz_b)])
    return pairs


def gradcheck(form: NLForm, shape, seed: int, reduction: int = 2,
              eps: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """Compare block_backward against central differences, loss = sum(z)."""
    c, h, w = shape
    p = init_params(form, c, reduction=reduction, seed=seed)
    # w away from the 0/1 short-circuits so both paths differentiate
    p.w = 0.37
    x = _uniform_array(backend.derive_stream(seed, 0x6763), (c, h, w), -1.0, 1.0)

    z, cache = block_forward(x, p)
    grads = block_backward(cache, np.ones_like(z), p)
    analytic = {
        "input": grads.d_input, "theta_w": grads.theta_w, "phi_w": grads.phi_w,
        "g_w": grads.g_w, "wz_w": grads.wz_w, "wz_b": grads.wz_b,
    }

    def loss() -> float:
        return float(block_forward(x, p)[0].sum())

    max_rel = 0.0
    worst = "none"

    def track(name, a, num):
        nonlocal max_rel, worst
        rel = abs(a - num) / max(1e-8, abs(a), abs(num))
        if rel > max_rel:
            max_rel = rel
            worst = name

    for name, arr in _param_arrays(p, x):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss()
            flat[i] = orig - eps
            f_minus = loss()
            flat[i] = orig
            track(f"{name}[{i}]", float(analytic[name].reshape(-1)[i]),
                  (f_plus - f_minus) / (2.0 * eps))

    w_orig = p.w
    p.w = w_orig + eps
    f_plus = loss()
    p.w = w_orig - eps
    f_minus = loss()
    p.w = w_orig
    track("w", grads.w, (f_plus - f_minus) / (2.0 * eps))

    return GradcheckReport(form, tuple(shape), seed, max_rel, worst, max_rel <= tol)


# ---------------------------------------------------------------------------
# Serialization: JSON header line + little-endian float64 arrays in
# declared order; round-trips bit-exactly.
# ---------------------------------------------------------------------------

_FORMAT = "nl-block-params-v1"


def params_to_bytes(p: NLBlockParams) -> bytes:
    arrays = []
    if p.theta_w is not None:
        arrays.append(("theta_w", p.theta_w))
        arrays.append(("phi_w", p.phi_w))
    arrays.extend([("g_w", p.g_w), ("wz_w", p.wz_w), ("wz_b", p.wz_b),
                   ("w", np.array([p.w]))])
    header = {
        "format": _FORMAT,
        "form": p.form.value,
        "c_in": p.c_in,
        "c_mid": p.c_mid,
        "reduction": p.c_in // p.c_mid,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    out = io.BytesIO()
    out.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    out.write(b"\n")
    for _, a in arrays:
        out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return out.getvalue()


def params_from_bytes(buf: bytes) -> NLBlockParams:
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValidationError("parameter container: missing header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"parameter container: bad header ({e})") from e
    if header.get("format") != _FORMAT:
        raise ValidationError(f"parameter container: unknown format {header.get('format')!r}")
    form = parse_form(header["form"])
    body = buf[nl + 1:]
    offset = 0
    values = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise ValidationError(f"parameter container: truncated at array {name!r}")
        a = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").astype(np.float64)
        values[name] = a.reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise ValidationError("parameter container: trailing bytes after declared arrays")
    needed = {"g_w", "wz_w", "wz_b", "w"}
    if form is not NLForm.GAUSSIAN:
        needed |= {"theta_w", "phi_w"}
    missing = needed - set(values)
    if missing:
        raise ValidationError(f"parameter container: missing arrays {sorted(missing)}")
    return NLBlockParams(
        form, int(header["c_in"]), int(header["c_mid"]),
        values.get("theta_w"), values.get("phi_w"),
        values["g_w"], values["wz_w"], values["wz_b"], float(values["w"][0]))


def save_params(p: NLBlockParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(p))


def load_params(path) -> NLBlockParams:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ArgumentError(f"cannot read block parameters {path}: {e}") from e
    return params_from_bytes(blob)
