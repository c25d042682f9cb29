"""Via detectors: thresholding with erosion, and superlevel-set persistence."""

import numpy as np
import pytest

from viascope.extraction import (
    METHOD_PERSISTENCE,
    METHOD_THRESHOLD,
    ExtractionConfig,
    GrayImage,
    detect_vias,
    detect_vias_persistence,
    detect_vias_threshold,
    pixels_to_units,
    units_to_pixels,
)
from viascope.geometry import ViaSet


def disk_image(shape, centers, radius=5, fg=220, bg=10):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    arr = np.full(shape, bg, dtype=float)
    for cx, cy in centers:
        arr[np.hypot(xx - cx, yy - cy) <= radius] = fg
    return GrayImage(arr.astype(np.uint8))


def gaussian_peaks_image(shape, peaks, sigma=6.0, bg=5.0):
    """Radial bumps composed by max; each peak's exact apex value is forced."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    arr = np.full(shape, bg, dtype=float)
    for cx, cy, amp in peaks:
        bump = amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        arr = np.maximum(arr, bump)
    img = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    for cx, cy, amp in peaks:
        img[int(cy), int(cx)] = int(amp)
    return GrayImage(img)


class TestGrayImage:
    def test_validates_shape_and_range(self):
        with pytest.raises(ValueError):
            GrayImage(np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            GrayImage(np.full((2, 2), 300.0))

    def test_png_round_trip(self, tmp_path):
        img = disk_image((30, 40), [(20, 15)])
        img.save(tmp_path / "x.png")
        loaded = GrayImage.load(tmp_path / "x.png")
        assert np.array_equal(loaded.data, img.data)

    def test_tiff_round_trip(self, tmp_path):
        from PIL import Image

        arr = np.arange(200, dtype=np.uint8).reshape(10, 20)
        Image.fromarray(arr).save(tmp_path / "x.tif")
        loaded = GrayImage.load(tmp_path / "x.tif")
        assert np.array_equal(loaded.data, arr)

    def test_rejects_color(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (8, 8)).save(tmp_path / "c.png")
        with pytest.raises(ValueError):
            GrayImage.load(tmp_path / "c.png")


class TestPixelUnitMapping:
    def test_basic(self):
        cfg = ExtractionConfig(pixels_per_unit=10.0)
        assert pixels_to_units([(10, 10)], cfg).tolist() == [[1, 1]]
        assert pixels_to_units([(0, 0)], cfg).tolist() == [[0, 0]]

    def test_round_trip(self, rng):
        cfg = ExtractionConfig(pixels_per_unit=12.5, origin_offset=(7.0, 3.0))
        pts = rng.uniform(-50, 50, (20, 2))
        back = units_to_pixels(pixels_to_units(pts, cfg), cfg)
        assert np.allclose(back, pts, atol=1e-9)


class TestThresholdDetector:
    def test_constant_image_is_empty(self):
        img = GrayImage(np.full((30, 30), 10, dtype=np.uint8))
        assert len(detect_vias_threshold(img, ExtractionConfig())) == 0

    def test_zero_sized_rejected(self):
        with pytest.raises(ValueError):
            detect_vias_threshold(GrayImage(np.zeros((0, 0), np.uint8)), ExtractionConfig())

    def test_single_disk_centroid(self):
        # One bright disk of radius 5 px at (20, 20); its intensity-weighted
        # centroid is the center by symmetry, 2.0 units at 10 px/unit.
        img = disk_image((40, 40), [(20, 20)])
        vias = detect_vias_threshold(img, ExtractionConfig(pixels_per_unit=10.0))
        assert len(vias) == 1
        assert vias.points[0] == pytest.approx((2.0, 2.0), abs=0.05)

    def test_salt_noise_eroded_away(self, rng):
        img = disk_image((50, 80), [(20, 25), (60, 25)])
        arr = img.data.copy()
        noisy_px = rng.choice(50 * 80, size=15, replace=False)
        for p in noisy_px:
            y, x = divmod(int(p), 80)
            if min(np.hypot(x - 20, y - 25), np.hypot(x - 60, y - 25)) > 12:
                arr[y, x] = 255
        vias = detect_vias_threshold(GrayImage(arr), ExtractionConfig(erosion_radius=1))
        assert len(vias) == 2

    def test_small_components_never_change_output(self, rng):
        # Adding isolated blobs below the area floor leaves the result
        # identical, not merely similar.
        cfg = ExtractionConfig(erosion_radius=0, min_blob_area=4)
        base = disk_image((50, 80), [(20, 25), (60, 25)])
        reference = detect_vias_threshold(base, cfg)
        for _ in range(10):
            arr = base.data.copy()
            for _ in range(6):
                x = int(rng.integers(0, 80))
                y = int(rng.integers(0, 50))
                if min(np.hypot(x - 20, y - 25), np.hypot(x - 60, y - 25)) > 14:
                    arr[y, x] = 255  # area-1 component < min_blob_area
            assert detect_vias_threshold(GrayImage(arr), cfg) == reference

    def test_centroid_uses_preerosion_pixels(self):
        # An asymmetric bright skirt below erosion survival still pulls the
        # centroid, since localization reads the pre-erosion component.
        arr = np.full((30, 30), 10, dtype=np.uint8)
        yy, xx = np.mgrid[0:30, 0:30]
        arr[np.hypot(xx - 15, yy - 15) <= 4] = 200
        arr[(yy == 15) & (xx >= 15) & (xx <= 23)] = 200  # one-pixel tail to the right
        vias = detect_vias_threshold(
            GrayImage(arr), ExtractionConfig(erosion_radius=1, pixels_per_unit=10.0)
        )
        assert len(vias) == 1
        assert vias.points[0][0] > 1.5  # pulled right of the disk center x=1.5


class TestPersistenceDetector:
    def test_constant_image_is_empty(self):
        img = GrayImage(np.full((20, 20), 77, dtype=np.uint8))
        cfg = ExtractionConfig(method=METHOD_PERSISTENCE)
        assert len(detect_vias_persistence(img, cfg)) == 0

    def test_zero_sized_rejected(self):
        cfg = ExtractionConfig(method=METHOD_PERSISTENCE)
        with pytest.raises(ValueError):
            detect_vias_persistence(GrayImage(np.zeros((0, 5), np.uint8)), cfg)

    def test_two_peak_landscape(self):
        # Two bumps with apexes 200 and 180. The saddle between them is far
        # below both, so the lifetimes are (200 - minimum) and
        # (180 - saddle), both beyond the threshold of 50: two vias, located
        # at the apexes.
        img = gaussian_peaks_image((30, 60), [(15, 15, 200), (45, 15, 180)])
        mid_col_max = img.data[:, 29:32].max()
        assert mid_col_max < 130  # the saddle really is well below both births
        cfg = ExtractionConfig(
            method=METHOD_PERSISTENCE, persistence_threshold=50, pixels_per_unit=10.0
        )
        vias = detect_vias_persistence(img, cfg)
        assert len(vias) == 2
        assert vias.points[0] == pytest.approx((1.5, 1.5), abs=0.1)
        assert vias.points[1] == pytest.approx((4.5, 1.5), abs=0.1)

    def test_stable_under_bounded_noise(self, rng):
        base = gaussian_peaks_image((30, 60), [(15, 15, 200), (45, 15, 180)])
        cfg = ExtractionConfig(method=METHOD_PERSISTENCE, persistence_threshold=50)
        clean_count = len(detect_vias_persistence(base, cfg))
        for _ in range(5):
            noise = rng.integers(-15, 16, base.data.shape)
            noisy = np.clip(base.data.astype(int) + noise, 0, 255).astype(np.uint8)
            assert len(detect_vias_persistence(GrayImage(noisy), cfg)) == clean_count

    def test_invariant_under_intensity_shift(self):
        # A uniform shift is monotone and preserves every lifetime exactly.
        base = gaussian_peaks_image((30, 60), [(15, 15, 200), (45, 15, 180)])
        shifted = GrayImage(np.clip(base.data.astype(int) + 10, 0, 255).astype(np.uint8))
        cfg = ExtractionConfig(method=METHOD_PERSISTENCE, persistence_threshold=50)
        assert len(detect_vias_persistence(base, cfg)) == len(
            detect_vias_persistence(shifted, cfg)
        )

    def test_deterministic_bit_identical(self, rng):
        arr = rng.integers(0, 255, (40, 40)).astype(np.uint8)
        cfg = ExtractionConfig(method=METHOD_PERSISTENCE, persistence_threshold=30)
        first = detect_vias_persistence(GrayImage(arr), cfg)
        second = detect_vias_persistence(GrayImage(arr.copy()), cfg)
        assert np.array_equal(first.points, second.points)

    def test_threshold_filters_weak_peak(self):
        # Raising the threshold above the weaker lifetime must drop exactly
        # that peak.
        img = gaussian_peaks_image((30, 60), [(15, 15, 200), (45, 15, 120)])
        saddle = int(img.data[:, 29:32].max())
        weak_persistence = 120 - saddle
        cfg = ExtractionConfig(
            method=METHOD_PERSISTENCE, persistence_threshold=weak_persistence + 10
        )
        assert len(detect_vias_persistence(img, cfg)) == 1


class TestDispatch:
    def test_detect_vias_routes_by_method(self):
        img = disk_image((40, 40), [(20, 20)])
        thr = detect_vias(img, ExtractionConfig(method=METHOD_THRESHOLD))
        per = detect_vias(
            img, ExtractionConfig(method=METHOD_PERSISTENCE, persistence_threshold=50)
        )
        assert len(thr) == 1 and len(per) == 1

    def test_source_tag_propagates(self):
        img = disk_image((40, 40), [(20, 20)])
        vias = detect_vias(img, ExtractionConfig(), source="inst7")
        assert vias.source == "inst7"

    def test_no_duplicate_centers(self, rng):
        arr = rng.integers(0, 255, (50, 50)).astype(np.uint8)
        for method in (METHOD_THRESHOLD, METHOD_PERSISTENCE):
            cfg = ExtractionConfig(method=method, persistence_threshold=25)
            vias = detect_vias(GrayImage(arr), cfg)
            if len(vias) > 1:
                assert vias.min_separation() > 1e-6
