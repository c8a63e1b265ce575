"""COCO-style instance segmentation evaluation.

Masks travel as uncompressed column-major RLE (first run counts
zeros).  Matching is greedy per (image, category) at the ten IoU
thresholds 0.50:0.05:0.95; precision-recall uses 101-point
interpolation; AP averages over categories that have ground truth, and
the small/medium/large slices restrict both ground truth and
unmatched-prediction penalties by pixel area.

Threshold comparisons are exact: every threshold is the rational k/20,
so "IoU >= t" is evaluated as 20*intersection >= k*union in integers.
Ties in score break by input order; ties in IoU break by ground-truth
input order.  Crowd ground truths never match directly and never count
toward any slice's ground-truth total; an unmatched prediction whose
intersection with a same-category crowd covers >= t of the prediction
is ignored rather than counted as a false positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .backend import interval_intersection, rasterize_polygon
from .errors import ArgumentError, ValidationError

THRESHOLD_NUMERATORS = tuple(range(10, 20))  # t = k/20: 0.50 .. 0.95
RECALL_GRID = np.array([j / 100.0 for j in range(101)])
AREA_RANGES = {
    "all": (0, math.inf),
    "small": (0, 32 ** 2),
    "medium": (32 ** 2, 96 ** 2),
    "large": (96 ** 2, math.inf),
}


@dataclass
class RLEMask:
    height: int
    width: int
    counts: tuple

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"mask dims must be positive, got {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise ValidationError("RLE counts must be non-negative")
        total = sum(self.counts)
        if total != self.height * self.width:
            raise ValidationError(
                f"RLE counts sum {total} != {self.height}x{self.width} pixels")

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])


@dataclass
class InstanceAnnotation:
    image_id: int
    category_id: int
    mask: RLEMask
    area: int = -1  # filled from the mask when negative
    iscrowd: bool = False

    def __post_init__(self):
        if self.area < 0:
            self.area = self.mask.area


@dataclass
class InstancePrediction:
    image_id: int
    category_id: int
    mask: RLEMask
    score: float


@dataclass
class CategoryResult:
    category_id: int
    ap: float
    ap50: float
    ap75: float


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    per_category: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "AP_S": self.ap_s, "AP_M": self.ap_m, "AP_L": self.ap_l,
            "per_category": [
                {"category_id": c.category_id, "AP": c.ap, "AP50": c.ap50, "AP75": c.ap75}
                for c in self.per_category
            ],
        }


# ---------------------------------------------------------------------------
# RLE codec and IoU.
# ---------------------------------------------------------------------------

def encode_mask(mask: np.ndarray) -> RLEMask:
    """Binary (H,W) array -> column-major RLE starting with a zeros run."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ArgumentError(f"expected (H,W) mask, got shape {mask.shape}")
    flat = mask.astype(bool).ravel(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RLEMask(mask.shape[0], mask.shape[1], tuple(runs))


def decode_mask(rle: RLEMask) -> np.ndarray:
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise ValidationError(f"RLE counts must be non-negative, got {rle.counts}")
    if counts.sum() != rle.height * rle.width:
        raise ValidationError(
            f"RLE counts sum to {counts.sum()}, expected {rle.height * rle.width} "
            f"for {rle.height}x{rle.width}")
    values = (np.arange(counts.size, dtype=np.int64) % 2).astype(bool)
    flat = np.repeat(values, counts)
    return flat.reshape((rle.height, rle.width), order="F")


def _one_runs(rle: RLEMask):
    cum = np.concatenate(([0], np.cumsum(np.asarray(rle.counts, dtype=np.int64))))
    starts = cum[1::2]
    ends = cum[2::2]
    return starts[:ends.size], ends


def mask_intersection(a: RLEMask, b: RLEMask) -> int:
    if (a.height, a.width) != (b.height, b.width):
        raise ArgumentError(
            f"mask dims differ: {a.height}x{a.width} vs {b.height}x{b.width}")
    sa, ea = _one_runs(a)
    sb, eb = _one_runs(b)
    if sa.size == 0 or sb.size == 0:
        return 0
    return interval_intersection(sa, ea, sb, eb)


def mask_iou(a: RLEMask, b: RLEMask) -> float:
    """|a & b| / |a | b|; 0.0 when both masks are empty."""
    inter = mask_intersection(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Matching and AP.
# ---------------------------------------------------------------------------

def _in_range(area: int, rng) -> bool:
    lo, hi = rng
    return lo <= area < hi


@dataclass
class _Unit:
    """One (image, category) matching problem with precomputed overlaps."""
    ranks: list          # global score-order rank per dt
    dt_area: list
    gt_area: list        # non-crowd gts, input order
    inter_gt: list       # [dt][gt] intersection pixels
    union_gt: list       # [dt][gt] union pixels
    inter_crowd: list    # [dt][crowd] intersection pixels


def _match_unit(u: _Unit, k: int, rng) -> list:
    """Status per dt (unit order): 0 TP, 1 FP, 2 ignored."""
    gt_ignore = [not _in_range(a, rng) for a in u.gt_area]
    matched = [False] * len(u.gt_area)
    statuses = []
    for di in range(len(u.ranks)):
        best = -1
        for j in range(len(u.gt_area)):
            if matched[j]:
                continue
            inter = u.inter_gt[di][j]
            union = u.union_gt[di][j]
            # IoU < k/20, exact in integers; empty-vs-empty has IoU 0
            if union == 0 or 20 * inter < k * union:
                continue
            if best < 0:
                best = j
            elif gt_ignore[best] and not gt_ignore[j]:
                best = j
            elif gt_ignore[best] == gt_ignore[j] and \
                    inter * u.union_gt[di][best] > u.inter_gt[di][best] * union:
                best = j
        if best >= 0:
            matched[best] = True
            statuses.append(2 if gt_ignore[best] else 0)
            continue
        if not _in_range(u.dt_area[di], rng):
            statuses.append(2)
            continue
        absorbed = u.dt_area[di] > 0 and any(
            20 * inter >= k * u.dt_area[di] for inter in u.inter_crowd[di])
        statuses.append(2 if absorbed else 1)
    return statuses


def _ap_101(statuses: list, npos: int) -> float:
    """statuses in global score order; npos > 0."""
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for st in statuses:
        if st == 2:
            continue
        if st == 0:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / npos)
        precisions.append(tp / (tp + fp))
    if not recalls:
        return 0.0
    for i in range(len(precisions) - 1, 0, -1):
        if precisions[i - 1] < precisions[i]:
            precisions[i - 1] = precisions[i]
    idx = np.searchsorted(np.asarray(recalls), RECALL_GRID, side="left")
    q = np.zeros(RECALL_GRID.size)
    valid = idx < len(recalls)
    q[valid] = np.take(np.asarray(precisions), idx[valid])
    return float(q.mean())


def _validate_inputs(gts, preds, images):
    dims = {}

    def check_dims(image_id, mask, kind):
        got = (mask.height, mask.width)
        if images is not None and image_id in images and tuple(images[image_id]) != got:
            raise ValidationError(
                f"{kind} mask {got} does not match image {image_id} dims {tuple(images[image_id])}")
        if dims.setdefault(image_id, got) != got:
            raise ValidationError(
                f"{kind} mask {got} disagrees with earlier masks {dims[image_id]} on image {image_id}")

    if images is not None:
        unknown = sorted({p.image_id for p in preds} - set(images))
        if unknown:
            raise ValidationError(f"predictions reference unknown images: {unknown}")
        unknown_gt = sorted({g.image_id for g in gts} - set(images))
        if unknown_gt:
            raise ValidationError(f"annotations reference unknown images: {unknown_gt}")
    for g in gts:
        check_dims(g.image_id, g.mask, "ground-truth")
    for p in preds:
        if not (0.0 <= p.score <= 1.0):
            raise ValidationError(f"score {p.score} outside [0,1] on image {p.image_id}")
        check_dims(p.image_id, p.mask, "prediction")


def evaluate(gts: list, preds: list, images: dict | None = None) -> EvalReport:
    """Full AP report; `images` (id -> (h, w)) enables unknown-image checks."""
    _validate_inputs(gts, preds, images)

    categories = sorted({g.category_id for g in gts})
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))

    gt_bucket = {}
    for g in gts:
        gt_bucket.setdefault((g.image_id, g.category_id), []).append(g)
    dt_bucket = {}
    for rank, i in enumerate(order):
        p = preds[i]
        dt_bucket.setdefault((p.image_id, p.category_id), []).append((rank, p))

    n_k = len(THRESHOLD_NUMERATORS)
    cat_ap = {}       # cat -> {rng_name: ndarray of AP(t) or None when undefined}
    for cat in categories:
        involved = sorted({img for (img, c) in gt_bucket if c == cat} |
                          {img for (img, c) in dt_bucket if c == cat})
        units = []
        for img in involved:
            anns = gt_bucket.get((img, cat), [])
            real = [a for a in anns if not a.iscrowd]
            crowd = [a for a in anns if a.iscrowd]
            dts = dt_bucket.get((img, cat), [])
            inter_gt = [[mask_intersection(p.mask, g.mask) for g in real] for _, p in dts]
            union_gt = [[p.mask.area + g.mask.area - inter_gt[di][j]
                         for j, g in enumerate(real)] for di, (_, p) in enumerate(dts)]
            inter_crowd = [[mask_intersection(p.mask, c.mask) for c in crowd] for _, p in dts]
            units.append(_Unit([r for r, _ in dts], [p.mask.area for _, p in dts],
                               [g.area for g in real], inter_gt, union_gt, inter_crowd))

        result = {}
        for rng_name, rng in AREA_RANGES.items():
            npos = sum(1 for u in units for a in u.gt_area if _in_range(a, rng))
            if npos == 0:
                result[rng_name] = None
                continue
            aps = np.empty(n_k)
            for ki, k in enumerate(THRESHOLD_NUMERATORS):
                pairs = []
                for u in units:
                    pairs.extend(zip(u.ranks, _match_unit(u, k, rng)))
                pairs.sort()
                aps[ki] = _ap_101([st for _, st in pairs], npos)
            result[rng_name] = aps
        cat_ap[cat] = result

    def slice_mean(rng_name, ki=None):
        vals = [cat_ap[c][rng_name] for c in categories if cat_ap[c][rng_name] is not None]
        if not vals:
            return -1.0
        return float(np.mean([a.mean() if ki is None else a[ki] for a in vals]))

    per_category = []
    for cat in categories:
        arr = cat_ap[cat]["all"]
        if arr is None:  # category had only crowd regions
            per_category.append(CategoryResult(cat, -1.0, -1.0, -1.0))
        else:
            per_category.append(CategoryResult(
                cat, float(arr.mean()), float(arr[0]), float(arr[5])))
    return EvalReport(
        ap=slice_mean("all"),
        ap50=slice_mean("all", 0),
        ap75=slice_mean("all", 5),
        ap_s=slice_mean("small"),
        ap_m=slice_mean("medium"),
        ap_l=slice_mean("large"),
        per_category=per_category,
    )


# ---------------------------------------------------------------------------
# File ingestion (COCO JSON layout) and report output.
# ---------------------------------------------------------------------------

@dataclass
class AnnotationSet:
    annotations: list
    images: dict      # id -> (height, width)
    categories: list  # [{"id": ..., "name": ...}]


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ArgumentError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: JSON parse error at offset {e.pos}: {e.msg}") from e


def _mask_from_segmentation(seg, h: int, w: int, where: str) -> RLEMask:
    if isinstance(seg, dict):
        size = seg.get("size")
        counts = seg.get("counts")
        if (not isinstance(size, (list, tuple)) or len(size) != 2
                or not isinstance(counts, (list, tuple))):
            raise ValidationError(f"{where}: RLE needs size [h,w] and integer counts")
        if (int(size[0]), int(size[1])) != (h, w):
            raise ValidationError(f"{where}: RLE size {size} vs image dims ({h}, {w})")
        return RLEMask(h, w, tuple(counts))
    if isinstance(seg, (list, tuple)) and seg and all(isinstance(p, (list, tuple)) for p in seg):
        merged = np.zeros((h, w), dtype=bool)
        for poly in seg:
            if len(poly) < 6 or len(poly) % 2 != 0:
                raise ValidationError(f"{where}: polygon needs >= 3 (x,y) pairs")
            xs = np.asarray(poly[0::2], dtype=np.float64)
            ys = np.asarray(poly[1::2], dtype=np.float64)
            merged |= rasterize_polygon(xs, ys, h, w).astype(bool)
        return encode_mask(merged)
    raise ValidationError(f"{where}: segmentation must be an RLE dict or polygon list")


def load_annotations(path) -> AnnotationSet:
    """COCO-layout ground truth; polygons are rasterized to RLE."""
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object at top level")
    images = {}
    for rec in doc.get("images", []):
        images[rec["id"]] = (int(rec["height"]), int(rec["width"]))
    categories = [{"id": c["id"], "name": c.get("name", str(c["id"]))}
                  for c in doc.get("categories", [])]
    annotations = []
    for rec in doc.get("annotations", []):
        where = f"{path}: annotation id {rec.get('id', '?')}"
        img_id = rec["image_id"]
        if img_id not in images:
            raise ValidationError(f"{where}: unknown image_id {img_id}")
        h, w = images[img_id]
        mask = _mask_from_segmentation(rec["segmentation"], h, w, where)
        annotations.append(InstanceAnnotation(
            image_id=img_id,
            category_id=rec["category_id"],
            mask=mask,
            area=mask.area,  # popcount invariant, recomputed on load
            iscrowd=bool(rec.get("iscrowd", 0)),
        ))
    return AnnotationSet(annotations, images, categories)


def load_predictions(path, images: dict | None = None) -> list:
    """JSON array of {image_id, category_id, segmentation (RLE), score}."""
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: expected a JSON array of predictions")
    preds = []
    for i, rec in enumerate(doc):
        where = f"{path}: prediction {i}"
        seg = rec.get("segmentation")
        if not isinstance(seg, dict):
            raise ValidationError(f"{where}: segmentation must be an RLE dict")
        if images is not None and rec["image_id"] not in images:
            raise ValidationError(f"{where}: unknown image_id {rec['image_id']}")
        if images is not None:
            h, w = images[rec["image_id"]]
        else:
            h, w = int(seg["size"][0]), int(seg["size"][1])
        mask = _mask_from_segmentation(seg, h, w, where)
        score = float(rec["score"])
        if not (0.0 <= score <= 1.0):
            raise ValidationError(f"{where}: score {score} outside [0,1]")
        preds.append(InstancePrediction(rec["image_id"], rec["category_id"], mask, score))
    return preds


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
