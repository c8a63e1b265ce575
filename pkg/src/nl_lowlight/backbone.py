"""Toy four-stage backbone with one weighted NL block per stage.

Stages are 3x3 stride-2 convolutions (3 -> 8 -> 16 -> 32 -> 64
channels) followed by ReLU, initialized He-uniform from a fixed seed
and frozen permanently: a stand-in for pretrained weights.  Each stage
output passes through its NL block when use_nl is on, and the next
stage consumes the post-block output.

Training optimizes only the NL block parameters with plain SGD on the
feature-consistency loss between pyramids extracted from degraded
(with blocks) and clean (without) versions of the same image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ArgumentError, DimensionError, NumericError, ValidationError
from .nlblock import (NLBlockParams, NLForm, block_backward, block_forward, init_params,
                      params_from_bytes, params_to_bytes)

STAGE_CHANNELS = (8, 16, 32, 64)
REDUCTIONS = (4, 2, 2, 2)  # deepest bottleneck at the highest-resolution stage
MIN_SIZE = 16

_TAG_CONV = 0x4242
_TAG_BLOCK = 0x424C
_TAG_SHUFFLE = 0x53


@dataclass
class ToyBackbone:
    seed: int
    form: NLForm
    stage_w: list  # 4 arrays (c_out, c_in, 3, 3); frozen after init
    stage_b: list  # 4 arrays (c_out,); frozen after init
    nl_blocks: list  # 4 NLBlockParams


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 0.0005
    lr_decay: float = 0.1
    decay_at: tuple = (0.6, 0.9)  # fractions of total steps
    seed: int = 0


@dataclass
class CurveRow:
    step: int
    loss: float
    weights: tuple  # w1..w4 after this step's update
    lr: float


@dataclass
class TrainResult:
    backbone: ToyBackbone
    curve: list          # per-step batch losses and w values
    initial_loss: float  # whole-dataset loss before the first update
    final_loss: float    # whole-dataset loss after the last update


@dataclass
class AblationRow:
    form: NLForm
    initial_loss: float
    final_loss: float
    weights: tuple


def _he_uniform(key: int, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    u = backend.uniform_field(key, int(np.prod(shape)))
    return (-limit + 2.0 * limit * u).reshape(shape)


def build_backbone(form: NLForm, seed: int = 0) -> ToyBackbone:
    """Deterministic fresh backbone; conv init does not depend on form."""
    stage_w, stage_b, blocks = [], [], []
    c_prev = 3
    for s, c_out in enumerate(STAGE_CHANNELS):
        stage_w.append(_he_uniform(backend.derive_stream(seed, _TAG_CONV, s),
                                   (c_out, c_prev, 3, 3), fan_in=c_prev * 9))
        stage_b.append(np.zeros(c_out))
        blocks.append(init_params(form, c_out, reduction=REDUCTIONS[s],
                                  seed=backend.derive_stream(seed, _TAG_BLOCK, s)))
        c_prev = c_out
    return ToyBackbone(seed, form, stage_w, stage_b, blocks)


def _to_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ArgumentError(f"expected uint8 (H,W,3) image, got {img.dtype} {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ArgumentError(f"image too small: {img.shape[:2]}, need >= {MIN_SIZE}x{MIN_SIZE}")
    return np.ascontiguousarray(img.astype(np.float64).transpose(2, 0, 1) / 255.0)


@dataclass
class _StageTrace:
    in_hw: tuple
    pre_relu: np.ndarray
    nl_cache: object


def _forward_stages(x, bb: ToyBackbone, use_nl: bool, want_traces: bool):
    feats, traces = [], []
    for s in range(4):
        in_hw = x.shape[1:]
        pre = backend.conv3x3_s2_forward(x, bb.stage_w[s], bb.stage_b[s])
        x = np.maximum(pre, 0.0)
        cache = None
        if use_nl:
            x, cache = block_forward(x, bb.nl_blocks[s])
        feats.append(x)
        if want_traces:
            traces.append(_StageTrace(in_hw, pre, cache))
    return feats, traces


def extract(img, bb: ToyBackbone, use_nl: bool) -> list:
    """Four-stage feature pyramid for one uint8 RGB image."""
    feats, _ = _forward_stages(_to_chw(img), bb, use_nl, want_traces=False)
    return feats


def feature_consistency_loss(f_noisy: list, f_clean: list):
    """Global MSE over every element of every stage, plus d/df_noisy."""
    if len(f_noisy) != len(f_clean):
        raise DimensionError(f"pyramid sizes differ: {len(f_noisy)} vs {len(f_clean)}")
    for a, b in zip(f_noisy, f_clean):
        if a.shape != b.shape:
            raise DimensionError(f"stage shapes differ: {a.shape} vs {b.shape}")
    count = sum(a.size for a in f_noisy)
    loss = 0.0
    grads = []
    for a, b in zip(f_noisy, f_clean):
        diff = a - b
        loss += float((diff * diff).sum())
        grads.append(2.0 * diff / count)
    return loss / count, grads


def _zero_grads(blocks: list) -> list:
    acc = []
    for blk in blocks:
        acc.append({
            "theta_w": None if blk.theta_w is None else np.zeros_like(blk.theta_w),
            "phi_w": None if blk.phi_w is None else np.zeros_like(blk.phi_w),
            "g_w": np.zeros_like(blk.g_w),
            "wz_w": np.zeros_like(blk.wz_w),
            "wz_b": np.zeros_like(blk.wz_b),
            "w": 0.0,
        })
    return acc


def _backward_sample(bb: ToyBackbone, traces: list, stage_grads: list, acc: list) -> None:
    """Accumulate NL parameter gradients; convs only pass gradients through."""
    d_from_above = None
    for s in range(3, -1, -1):
        d_f = stage_grads[s] if d_from_above is None else stage_grads[s] + d_from_above
        g = block_backward(traces[s].nl_cache, d_f, bb.nl_blocks[s])
        a = acc[s]
        if a["theta_w"] is not None:
            a["theta_w"] += g.theta_w
            a["phi_w"] += g.phi_w
        a["g_w"] += g.g_w
        a["wz_w"] += g.wz_w
        a["wz_b"] += g.wz_b
        a["w"] += g.w
        d_pre = g.d_input * (traces[s].pre_relu > 0.0)
        h, w = traces[s].in_hw
        d_from_above = backend.conv3x3_s2_input_backward(d_pre, bb.stage_w[s], h, w)


def _index_stream(n: int, seed: int):
    epoch = 0
    while True:
        u = backend.uniform_field(backend.derive_stream(seed, _TAG_SHUFFLE, epoch), n)
        for i in np.argsort(u, kind="stable"):
            yield int(i)
        epoch += 1


def _lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    for frac in cfg.decay_at:
        if step > math.ceil(frac * cfg.steps):
            lr *= cfg.lr_decay
    return lr


def dataset_loss(bb: ToyBackbone, pairs: list) -> float:
    """Mean feature-consistency loss over the whole dataset."""
    if not pairs:
        raise ArgumentError("empty dataset")
    total = 0.0
    for clean, degraded in pairs:
        loss, _ = feature_consistency_loss(extract(degraded, bb, use_nl=True),
                                           extract(clean, bb, use_nl=False))
        total += loss
    return total / len(pairs)


def train_nl_blocks(bb: ToyBackbone, pairs: list, cfg: TrainConfig) -> TrainResult:
    """SGD on the NL blocks only; stage convolutions stay bit-frozen.

    pairs: list of (clean_img, degraded_img) uint8 arrays.  Clean
    pyramids are precomputed once (nothing upstream of them trains).
    Loss rows record the batch loss under the pre-update parameters and
    the w values after the update.
    """
    if not pairs:
        raise ArgumentError("empty dataset")
    if cfg.steps < 1:
        raise ArgumentError(f"steps must be >= 1, got {cfg.steps}")
    if cfg.batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.lr < 0.0:
        raise ArgumentError(f"lr must be >= 0, got {cfg.lr}")

    clean_feats = [extract(c, bb, use_nl=False) for c, _ in pairs]
    noisy_in = [_to_chw(d) for _, d in pairs]
    order = _index_stream(len(pairs), cfg.seed)
    initial = dataset_loss(bb, pairs)

    curve = []
    # divergence is reported via explicit non-finite checks; numpy's FP
    # warnings on the way there are redundant noise
    with np.errstate(all="ignore"):
        for step in range(1, cfg.steps + 1):
            lr = _lr_at(cfg, step)
            batch = [next(order) for _ in range(cfg.batch_size)]
            acc = _zero_grads(bb.nl_blocks)
            batch_loss = 0.0
            try:
                for idx in batch:  # fixed draw order keeps accumulation deterministic
                    feats, traces = _forward_stages(noisy_in[idx], bb, use_nl=True, want_traces=True)
                    loss, grads = feature_consistency_loss(feats, clean_feats[idx])
                    batch_loss += loss
                    _backward_sample(bb, traces, grads, acc)
            except NumericError as e:
                raise NumericError(f"step {step}: {e}") from e
            batch_loss /= len(batch)
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at step {step}")

            scale = lr / len(batch)
            for blk, a in zip(bb.nl_blocks, acc):
                if a["theta_w"] is not None:
                    blk.theta_w = blk.theta_w - scale * a["theta_w"]
                    blk.phi_w = blk.phi_w - scale * a["phi_w"]
                blk.g_w = blk.g_w - scale * a["g_w"]
                blk.wz_w = blk.wz_w - scale * a["wz_w"]
                blk.wz_b = blk.wz_b - scale * a["wz_b"]
                blk.w = min(1.0, max(0.0, blk.w - scale * a["w"]))

            curve.append(CurveRow(step, batch_loss,
                                  tuple(b.w for b in bb.nl_blocks), lr))

    return TrainResult(bb, curve, initial, dataset_loss(bb, pairs))


def ablate_forms(pairs: list, cfg: TrainConfig, backbone_seed: int = 0) -> list:
    """Train each NL form from the same seeds/data; rows in fixed form order."""
    rows = []
    for form in (NLForm.DOT_PRODUCT, NLForm.GAUSSIAN, NLForm.EMBEDDED_GAUSSIAN):
        bb = build_backbone(form, seed=backbone_seed)
        result = train_nl_blocks(bb, pairs, cfg)
        rows.append(AblationRow(form, result.initial_loss, result.final_loss,
                                tuple(b.w for b in bb.nl_blocks)))
    return rows


def write_curve(path, curve: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,w1,w2,w3,w4,lr\n")
        for row in curve:
            ws = ",".join(f"{w:.12g}" for w in row.weights)
            fh.write(f"{row.step},{row.loss:.12g},{ws},{row.lr:.12g}\n")


# ---------------------------------------------------------------------------
# Checkpoints: JSON index line + the per-block parameter containers.
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "nl-backbone-ckpt-v1"


def save_checkpoint(bb: ToyBackbone, path) -> None:
    blobs = [params_to_bytes(blk) for blk in bb.nl_blocks]
    index = {
        "format": _CKPT_FORMAT,
        "seed": bb.seed,
        "form": bb.form.value,
        "stage_channels": list(STAGE_CHANNELS),
        "reductions": list(REDUCTIONS),
        "block_bytes": [len(b) for b in blobs],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(index, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ToyBackbone:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise ArgumentError(f"cannot read checkpoint {path}: {e}") from e
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValidationError("checkpoint: missing index line")
    try:
        index = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"checkpoint: bad index ({e})") from e
    if index.get("format") != _CKPT_FORMAT:
        raise ValidationError(f"checkpoint: unknown format {index.get('format')!r}")
    if tuple(index.get("stage_channels", ())) != STAGE_CHANNELS:
        raise ValidationError(f"checkpoint: stage channels {index.get('stage_channels')} unsupported")
    if tuple(index.get("reductions", ())) != REDUCTIONS:
        raise ValidationError(f"checkpoint: reductions {index.get('reductions')} unsupported")
    body = buf[nl + 1:]
    blocks = []
    offset = 0
    for nbytes in index["block_bytes"]:
        blocks.append(params_from_bytes(body[offset:offset + nbytes]))
        offset += nbytes
    if len(blocks) != 4 or offset != len(body):
        raise ValidationError("checkpoint: block payload does not match index")
    # convs are regenerated, bit-identical, from the recorded seed
    bb = build_backbone(blocks[0].form, seed=int(index["seed"]))
    bb.nl_blocks = blocks
    return bb
