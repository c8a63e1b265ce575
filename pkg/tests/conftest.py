import numpy as np
import pytest

from nl_lowlight import lowlight, segeval


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flat_color_image(rng, size=32):
    """A single flat-color uint8 image; the feature gap it induces is
    low-rank, which the bottlenecked NL path can actually express."""
    return np.clip(np.tile(rng.uniform(120, 230, size=3), (size, size, 1)),
                   0, 255).astype(np.uint8)


def make_training_pairs(n=20, size=32, data_seed=7, degrade_seed=11):
    cfg = lowlight.DegradationConfig(seed=degrade_seed)
    gen = np.random.default_rng(data_seed)
    pairs = []
    for i in range(n):
        clean = flat_color_image(gen, size)
        cfg_i = lowlight.per_image_config(cfg, lowlight.DEFAULT_JITTER, i)
        pairs.append((clean, lowlight.degrade(clean, cfg_i)))
    return pairs


def random_rect_mask(rng, h, w, allow_empty=True):
    m = np.zeros((h, w), dtype=bool)
    if allow_empty and rng.random() < 0.06:
        return m
    for _ in range(int(rng.integers(1, 3))):
        r0 = int(rng.integers(0, h))
        r1 = int(rng.integers(r0 + 1, h + 1))
        c0 = int(rng.integers(0, w))
        c1 = int(rng.integers(c0 + 1, w + 1))
        m[r0:r1, c0:c1] = True
    return m


def _shift(mask, dr, dc):
    h, w = mask.shape
    out = np.zeros_like(mask)
    out[max(0, dr):min(h, h + dr), max(0, dc):min(w, w + dc)] = \
        mask[max(0, -dr):min(h, h - dr), max(0, -dc):min(w, w - dc)]
    return out


def random_eval_instance(rng):
    """Micro dataset: <= 4 images, <= 5 objects, <= 2 categories.

    Predictions are mostly jittered copies of ground truths so matches at
    varied IoU happen often; crowds, empty masks, score ties, and
    wrong-category predictions are all sprinkled in.
    """
    n_images = int(rng.integers(1, 5))
    big = rng.random() < 0.25  # occasionally reach the medium/large slices
    images = {}
    for img in range(1, n_images + 1):
        lo, hi = (64, 150) if big else (4, 24)
        images[img] = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
    cats = [1, 7][: int(rng.integers(1, 3))]

    gts = []
    for _ in range(int(rng.integers(0, 6))):
        img = int(rng.integers(1, n_images + 1))
        h, w = images[img]
        gts.append(segeval.InstanceAnnotation(
            image_id=img, category_id=int(rng.choice(cats)),
            mask=segeval.encode_mask(random_rect_mask(rng, h, w)),
            iscrowd=bool(rng.random() < 0.15)))

    preds = []
    for _ in range(int(rng.integers(0, 6))):
        if gts and rng.random() < 0.65:
            src = gts[int(rng.integers(0, len(gts)))]
            img, cat = src.image_id, src.category_id
            if rng.random() < 0.1 and len(cats) == 2:
                cat = cats[0] if cat == cats[1] else cats[1]
            mask = _shift(segeval.decode_mask(src.mask),
                          int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
        else:
            img = int(rng.integers(1, n_images + 1))
            h, w = images[img]
            mask = random_rect_mask(rng, h, w)
            cat = int(rng.choice(cats))
        score = float(rng.random())
        if rng.random() < 0.3:
            score = round(score, 1)  # exercise the score-tie rule
        preds.append(segeval.InstancePrediction(
            image_id=img, category_id=cat,
            mask=segeval.encode_mask(mask), score=score))
    return gts, preds, images


def pytest_terminal_summary(terminalreporter):
    """One visible pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in name:
                lines.append((name.split("::")[-1], status.upper()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{name}: {status}")
