import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staincycle.imaging import (
    CalibrationRequiredError,
    ClassSchema,
    DegenerateHistogramError,
    Image,
    ImagingError,
    LabelMap,
    TilingSpec,
    apply_geometric,
    augment_pair,
    denormalize,
    normalize,
    otsu_threshold,
    rgb_to_gray,
    sample_augment_params,
    tessellate,
    tissue_mask,
)


def solid(color, size=8, mpp=None):
    arr = np.full((size, size, 3), color, dtype=np.float64)
    return Image(arr, mpp=mpp)


class TestRgbToGray:
    def test_white(self):
        assert rgb_to_gray(solid([1.0, 1.0, 1.0])).values[0, 0] == pytest.approx(1.0)

    def test_black(self):
        assert rgb_to_gray(solid([0.0, 0.0, 0.0])).values[0, 0] == pytest.approx(0.0)

    def test_pure_red(self):
        assert rgb_to_gray(solid([1.0, 0.0, 0.0])).values[0, 0] == pytest.approx(0.299)

    def test_rejects_single_channel(self):
        gray = Image(np.zeros((4, 4)))
        with pytest.raises(ImagingError):
            rgb_to_gray(gray)


def otsu_oracle(values, bins=256):
    """Exhaustive search over all bin boundaries for max between-class variance."""
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2
    best_k, best_var = None, -np.inf
    total = counts.sum()
    for k in range(1, bins):
        w0 = counts[:k].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (counts[:k] * centers[:k]).sum() / w0
        mu1 = (counts[k:] * centers[k:]).sum() / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_k, best_var = k, var
    return edges[best_k]


class TestOtsu:
    def test_two_delta_peaks(self):
        vals = np.concatenate([np.full(50, 50.5 / 256), np.full(50, 200.5 / 256)])
        img = Image(vals.reshape(10, 10))
        thr = otsu_threshold(img)
        assert thr == pytest.approx(51 / 256)
        assert thr == pytest.approx(otsu_oracle(vals))

    def test_half_low_half_high(self):
        vals = np.concatenate([np.full(32, 0.1), np.full(32, 0.9)])
        img = Image(vals.reshape(8, 8))
        thr = otsu_threshold(img)
        assert 0.1 < thr <= 0.9
        assert thr == pytest.approx(otsu_oracle(vals))

    def test_mass_scaling_invariance(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0, 1, 100)
        small = Image(vals.reshape(10, 10))
        big = Image(np.tile(vals, 10).reshape(100, 10))
        assert otsu_threshold(small) == pytest.approx(otsu_threshold(big))

    def test_constant_image_degenerate(self):
        with pytest.raises(DegenerateHistogramError):
            otsu_threshold(Image(np.full((4, 4), 0.5)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=16, max_size=64))
    def test_matches_exhaustive_oracle(self, raw):
        vals = np.asarray(raw)
        img = Image(vals.reshape(1, -1))
        counts, _ = np.histogram(vals, bins=256, range=(0, 1))
        if np.count_nonzero(counts) < 2:
            with pytest.raises(DegenerateHistogramError):
                otsu_threshold(img)
            return
        assert otsu_threshold(img) == pytest.approx(otsu_oracle(vals))


class TestTissueMask:
    def test_all_background_degenerate(self):
        with pytest.raises(DegenerateHistogramError):
            tissue_mask(Image(np.full((8, 8), 0.95)))

    def test_dark_disk_on_white(self):
        arr = np.full((32, 32), 0.95)
        yy, xx = np.mgrid[0:32, 0:32]
        disk = (yy - 16) ** 2 + (xx - 16) ** 2 <= 8**2
        arr[disk] = 0.2
        img = Image(arr)
        mask = tissue_mask(img)
        thr = otsu_threshold(img)
        np.testing.assert_array_equal(mask, arr < thr)
        np.testing.assert_array_equal(mask, disk)

    def test_polarity_flag_complements(self):
        arr = np.where(np.arange(64).reshape(8, 8) < 32, 0.2, 0.9)
        img = Image(arr)
        np.testing.assert_array_equal(
            tissue_mask(img, dark_tissue=False), ~tissue_mask(img, dark_tissue=True)
        )


class TestTessellate:
    def test_full_tissue_grid_count(self):
        # 2160 µm slide at 1 µm/px, 216 µm patches -> 10 x 10 grid
        img = Image(np.random.default_rng(0).uniform(0, 1, (2160, 2160)), mpp=1.0)
        mask = np.ones((2160, 2160), dtype=bool)
        spec = TilingSpec(patch_physical_size=216, output_px=640, tissue_fraction_min=0.5)
        patches = tessellate(img, mask, spec)
        assert len(patches) == 100
        assert all(p.values.shape == (640, 640) for p, _ in patches)

    def test_strict_fraction_half_empty(self):
        img = Image(np.zeros((100, 100)), mpp=1.0)
        mask = np.zeros((100, 100), dtype=bool)
        mask[:, :50] = True  # left half tissue
        spec = TilingSpec(patch_physical_size=25, output_px=16, tissue_fraction_min=1.0)
        patches = tessellate(img, mask, spec)
        # only windows fully inside the left half qualify
        assert len(patches) == 8
        assert all(x + 25 <= 50 for _, (x, y) in patches)

    def test_window_arithmetic_mpp(self):
        assert 216 / 0.44 == pytest.approx(490.909, abs=1e-3)
        size = 496
        img = Image(np.zeros((size, size)), mpp=0.44)
        mask = np.ones((size, size), dtype=bool)
        spec = TilingSpec(patch_physical_size=216, output_px=640)
        patches = tessellate(img, mask, spec)  # window rounds to 491 px, upsampled
        assert len(patches) == 1
        assert patches[0][0].values.shape == (640, 640)

    def test_missing_mpp(self):
        img = Image(np.zeros((64, 64)))
        with pytest.raises(CalibrationRequiredError):
            tessellate(img, np.ones((64, 64), bool), TilingSpec(output_px=16))

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(3)
        img = Image(rng.uniform(0, 1, (60, 60)), mpp=1.0)
        mask = rng.uniform(0, 1, (60, 60)) < 0.4
        spec = TilingSpec(patch_physical_size=20, output_px=20, tissue_fraction_min=0.5)
        got = [(x, y) for _, (x, y) in tessellate(img, mask, spec)]
        expected = []
        for y in range(0, 41, 20):
            for x in range(0, 41, 20):
                if mask[y : y + 20, x : x + 20].mean() >= 0.5:
                    expected.append((x, y))
        assert got == expected


def tiny_schema():
    return ClassSchema(("bg", "fg"), background_index=0)


class TestAugmentPair:
    def test_identity_params_possible(self):
        img = Image(np.random.default_rng(0).uniform(0, 1, (8, 8, 3)))
        # drive rng until the identity transform comes out
        for seed in range(200):
            rng = np.random.default_rng(seed)
            params = sample_augment_params(rng, gamma_range=(1.0, 1.0))
            if not params.flip_h and not params.flip_v and params.k_rot90 == 0:
                rng = np.random.default_rng(seed)
                out, _ = augment_pair(img, None, rng, gamma_range=(1.0, 1.0))
                np.testing.assert_allclose(out.values, img.values)
                return
        pytest.fail("no identity draw in 200 seeds")

    def test_gamma_two_on_half(self):
        img = Image(np.full((4, 4, 3), 0.5))
        out, _ = augment_pair(img, None, np.random.default_rng(0), gamma_range=(2.0, 2.0))
        np.testing.assert_allclose(out.values, 0.25)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_label_moves_with_image(self, seed):
        rng = np.random.default_rng(seed)
        # encode the label into the image so co-movement is directly checkable
        labels = np.random.default_rng(seed + 1).integers(0, 2, (8, 8))
        img = Image(labels.astype(np.float64) * 0.5)
        # gamma on {0, 0.5} keeps 0 fixed and maps 0.5 to a unique value
        out_img, out_lab = augment_pair(
            Image(np.stack([img.values] * 3, axis=-1)),
            LabelMap(labels, tiny_schema()),
            rng,
        )
        np.testing.assert_array_equal(out_img.values[:, :, 0] > 0, out_lab.labels == 1)

    def test_joint_transform_oracle(self):
        labels = np.arange(16).reshape(4, 4) % 2
        img_vals = np.random.default_rng(5).uniform(0.1, 1.0, (4, 4, 3))
        rng = np.random.default_rng(11)
        params = sample_augment_params(rng)
        out_i = apply_geometric(img_vals, params)
        out_l = apply_geometric(labels, params)
        # same coordinate permutation on both rasters
        idx = np.arange(16).reshape(4, 4)
        perm = apply_geometric(idx, params)
        np.testing.assert_array_equal(out_l.ravel(), labels.ravel()[perm.ravel()])
        np.testing.assert_array_equal(
            out_i.reshape(-1, 3), img_vals.reshape(-1, 3)[perm.ravel()]
        )


class TestNormalize:
    def test_endpoints(self):
        img = Image(np.array([[0.0, 1.0]]))
        out = normalize(img)
        np.testing.assert_allclose(out.values, [[-1.0, 1.0]])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0, 1, (10, 100))
        back = denormalize(normalize(Image(vals)))
        assert np.abs(back.values - vals).max() <= 1e-6

    def test_out_of_range_rejected(self):
        with pytest.raises(ImagingError):
            Image(np.array([[1.5]]))


class TestClassSchema:
    def test_composite_with_border_rejected(self):
        with pytest.raises(ImagingError):
            ClassSchema(
                ("bg", "border", "a"),
                border_index=1,
                composites={"bad": frozenset({1, 2})},
            )

    def test_empty_composite_rejected(self):
        with pytest.raises(ImagingError):
            ClassSchema(("bg", "a"), composites={"bad": frozenset()})

    def test_label_exceeding_schema_rejected(self):
        with pytest.raises(ImagingError):
            LabelMap(np.array([[5]]), tiny_schema())
