import json
import math

import numpy as np
import pytest

from nl_lowlight import lowlight
from nl_lowlight.errors import ArgumentError
from nl_lowlight.lowlight import (DEFAULT_JITTER, DegradationConfig,
                                  JitterRanges, degrade, degrade_dataset,
                                  noise_autocorrelation, per_image_config,
                                  read_image, write_image)

NO_NOISE = dict(photons_full_scale=math.inf, read_sigma=0.0, demosaic=False)


def all_codes_image():
    """Every 8-bit value appears in every channel."""
    v = np.arange(256, dtype=np.uint8).reshape(16, 16)
    return np.stack([v, v, v], axis=2)


class TestDegrade:
    def test_identity_configuration_exact(self):
        img = all_codes_image()
        cfg = DegradationConfig(exposure=1.0, gamma=2.2, **NO_NOISE)
        assert np.array_equal(degrade(img, cfg), img)

    def test_quarter_exposure_scalar_oracle(self):
        img = all_codes_image()
        cfg = DegradationConfig(exposure=0.25, gamma=2.0, **NO_NOISE)
        out = degrade(img, cfg)
        for v in range(256):
            expected = round(255.0 * math.sqrt(0.25 * (v / 255.0) ** 2))
            assert out[v // 16, v % 16, 0] == expected, f"code {v}"

    def test_monotone_in_exposure(self, rng):
        img = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        prev = None
        for exposure in (1.0, 0.7, 0.4, 0.15, 0.05):
            out = degrade(img, DegradationConfig(exposure=exposure, **NO_NOISE))
            if prev is not None:
                assert np.all(out <= prev)
            prev = out

    def test_shot_noise_variance_law(self):
        img = np.full((192, 192, 3), 128, dtype=np.uint8)
        cfg = DegradationConfig(exposure=1.0, gamma=2.0, photons_full_scale=1000.0,
                                read_sigma=0.0, demosaic=False, seed=5)
        out = degrade(img, cfg)
        lin = (out.astype(np.float64) / 255.0) ** 2.0
        assert lin.size >= 10 ** 5
        signal = (128.0 / 255.0) ** 2.0
        assert abs(lin.var() / (signal / 1000.0) - 1.0) < 0.10

    def test_deterministic_per_seed(self, rng):
        img = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        cfg = DegradationConfig(seed=3)
        assert np.array_equal(degrade(img, cfg), degrade(img, cfg))
        assert not np.array_equal(degrade(img, cfg),
                                  degrade(img, DegradationConfig(seed=4)))

    def test_zero_sized_image(self):
        with pytest.raises(ArgumentError):
            degrade(np.zeros((0, 4, 3), dtype=np.uint8), DegradationConfig())

    def test_wrong_layout(self):
        with pytest.raises(ArgumentError):
            degrade(np.zeros((4, 4), dtype=np.uint8), DegradationConfig())

    def test_demosaic_needs_2x2(self):
        img = np.zeros((1, 5, 3), dtype=np.uint8)
        with pytest.raises(ArgumentError, match="2x2"):
            degrade(img, DegradationConfig(demosaic=True))
        degrade(img, DegradationConfig(demosaic=False))  # fine without it

    @pytest.mark.parametrize("bad", [
        dict(exposure=0.0), dict(exposure=1.5), dict(gamma=0.0),
        dict(photons_full_scale=0.0), dict(read_sigma=-0.1),
        dict(wb_gains=(1.0, 0.0, 1.0)),
    ])
    def test_config_validation(self, bad):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(ArgumentError):
            degrade(img, DegradationConfig(**bad))


class TestNoiseAutocorrelation:
    def test_iid_noise_uncorrelated(self):
        img = np.full((256, 256, 3), 120, dtype=np.uint8)
        cfg = DegradationConfig(exposure=0.8, photons_full_scale=math.inf,
                                read_sigma=0.01, demosaic=False, seed=2)
        report = noise_autocorrelation(img, degrade(img, cfg), cfg)
        for chan in report:
            assert chan.defined
            assert abs(chan.horizontal) < 0.02 and abs(chan.vertical) < 0.02

    def test_demosaic_correlates_green(self):
        img = np.full((256, 256, 3), 120, dtype=np.uint8)
        cfg = DegradationConfig(exposure=0.8, photons_full_scale=math.inf,
                                read_sigma=0.01, demosaic=True, seed=2)
        report = noise_autocorrelation(img, degrade(img, cfg), cfg)
        green = report[1]
        assert green.defined
        assert green.horizontal > 0.1 and green.vertical > 0.1

    def test_no_noise_flagged_undefined(self):
        img = np.full((32, 32, 3), 90, dtype=np.uint8)
        cfg = DegradationConfig(exposure=1.0, **NO_NOISE)
        for chan in noise_autocorrelation(img, degrade(img, cfg), cfg):
            assert not chan.defined
            assert chan.horizontal == 0.0 and chan.vertical == 0.0

    def test_dimension_mismatch(self):
        a = np.zeros((8, 8, 3), dtype=np.uint8)
        b = np.zeros((8, 9, 3), dtype=np.uint8)
        with pytest.raises(ArgumentError, match="mismatch"):
            noise_autocorrelation(a, b, DegradationConfig())


def write_corpus(root, rng, n=3, size=16):
    root.mkdir(exist_ok=True)
    for i in range(n):
        img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        write_image(root / f"img_{i}.png", img)
    return sorted(root.iterdir())


class TestDegradeDataset:
    def test_matches_individual_degrade(self, rng, tmp_path):
        src = tmp_path / "clean"
        paths = write_corpus(src, rng)
        cfg = DegradationConfig(seed=9)
        out = tmp_path / "dark"
        degrade_dataset(src, out, cfg, jitter=None)
        for index, path in enumerate(paths):
            expected = degrade(read_image(path), per_image_config(cfg, None, index))
            assert np.array_equal(read_image(out / path.name), expected)

    def test_rerun_byte_identical(self, rng, tmp_path):
        src = tmp_path / "clean"
        write_corpus(src, rng)
        cfg = DegradationConfig(seed=9)
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            degrade_dataset(src, out, cfg, jitter=DEFAULT_JITTER)
            blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert blobs[0] == blobs[1]

    def test_manifest_records(self, rng, tmp_path):
        src = tmp_path / "clean"
        paths = write_corpus(src, rng)
        out = tmp_path / "dark"
        records = degrade_dataset(src, out, DegradationConfig(seed=1), DEFAULT_JITTER)
        lines = [json.loads(l) for l in
                 (out / "manifest.jsonl").read_text().splitlines()]
        assert lines == records and len(records) == len(paths)
        for rec, path in zip(records, paths):
            assert rec["file"] == path.name
            assert set(rec) == {"file", "exposure", "photons_full_scale",
                                "read_sigma", "wb_gains", "seed"}

    def test_unreadable_file_warned_not_fatal(self, rng, tmp_path, capsys):
        src = tmp_path / "clean"
        write_corpus(src, rng, n=2)
        (src / "broken.png").write_bytes(b"not a png")
        records = degrade_dataset(src, tmp_path / "dark", DegradationConfig())
        bad = [r for r in records if "error" in r]
        assert len(bad) == 1 and bad[0]["file"] == "broken.png"
        assert "broken.png" in capsys.readouterr().err
        assert len([r for r in records if "error" not in r]) == 2

    def test_empty_dir_rejected(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        with pytest.raises(ArgumentError, match="no .png"):
            degrade_dataset(empty, tmp_path / "out", DegradationConfig())


class TestJitter:
    def test_exposure_log_uniform_stats(self):
        cfg = DegradationConfig(seed=0)
        draws = np.array([per_image_config(cfg, DEFAULT_JITTER, i).exposure
                          for i in range(1000)])
        assert draws.min() >= 0.05 and draws.max() <= 0.3
        assert 0.10 <= np.median(draws) <= 0.15

    def test_none_ranges_keep_config(self):
        cfg = DegradationConfig(exposure=0.42, read_sigma=0.007)
        out = per_image_config(cfg, JitterRanges(None, (500, 5000), None), 0)
        assert out.exposure == 0.42 and out.read_sigma == 0.007
        assert 500 <= out.photons_full_scale <= 5000

    def test_bad_range_rejected(self):
        with pytest.raises(ArgumentError, match="range"):
            per_image_config(DegradationConfig(),
                             JitterRanges((0.3, 0.05), None, None), 0)


class TestImageIO:
    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_round_trip(self, rng, tmp_path, suffix):
        img = rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)
        path = tmp_path / ("img" + suffix)
        write_image(path, img)
        assert np.array_equal(read_image(path), img)

    def test_unreadable_path(self, tmp_path):
        with pytest.raises(ArgumentError, match="cannot read"):
            read_image(tmp_path / "missing.png")
