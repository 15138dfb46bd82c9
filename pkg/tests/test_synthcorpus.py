import numpy as np
import pytest
from scipy import ndimage

from staincycle.imaging import LabelMap
from staincycle.synthcorpus import (
    CorpusManifest,
    PlacementFailureError,
    RefuseOverwriteError,
    SceneSpec,
    build_corpus,
    default_schema,
    generate_scene,
    marker_mask,
    render_a,
    render_p,
    PALETTE_P,
    BORDER,
)


def small_spec(**kwargs):
    defaults = dict(
        canvas_px=64,
        n_bodies=(1, 1),
        n_ducts=(2, 2),
        n_vessels=(1, 1),
        n_channels=(1, 1),
    )
    defaults.update(kwargs)
    return SceneSpec(**defaults)


class TestGenerateScene:
    def test_zero_counts_all_background(self):
        spec = small_spec(n_bodies=(0, 0), n_ducts=(0, 0), n_vessels=(0, 0), n_channels=(0, 0))
        label, geometry = generate_scene(spec, 0)
        assert geometry == []
        assert (label.labels == spec.schema.background_index).all()

    def test_single_body_one_component(self):
        spec = small_spec(n_ducts=(0, 0), n_vessels=(0, 0), n_channels=(0, 0), border_width_px=2)
        label, _ = generate_scene(spec, 1)
        names = spec.schema.class_names
        support = np.isin(label.labels, [names.index("core"), names.index("rim")])
        _, count = ndimage.label(support, structure=np.ones((3, 3), int))
        assert count == 1

    def test_determinism(self):
        spec = small_spec()
        a, _ = generate_scene(spec, 7)
        b, _ = generate_scene(spec, 7)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_border_rings_surround_instances(self):
        spec = small_spec()
        label, _ = generate_scene(spec, 3)
        fg = label.labels >= 2
        dilated = ndimage.binary_dilation(fg, structure=np.ones((3, 3), bool))
        ring = dilated & ~fg
        inside = ring[1:-1, 1:-1]
        ring_labels = label.labels[1:-1, 1:-1][inside]
        assert (ring_labels == BORDER).all()

    def test_placement_failure_on_tiny_canvas(self):
        spec = SceneSpec(canvas_px=16, n_bodies=(30, 30))
        with pytest.raises(PlacementFailureError):
            generate_scene(spec, 0)


class TestRenderers:
    def test_empty_scene_background_texture(self):
        spec = small_spec(n_bodies=(0, 0), n_ducts=(0, 0), n_vessels=(0, 0), n_channels=(0, 0))
        label, _ = generate_scene(spec, 0)
        img = render_p(label, spec, 0)
        mean = img.values.reshape(-1, 3).mean(axis=0)
        np.testing.assert_allclose(mean, PALETTE_P["background"], atol=0.05)

    def test_render_determinism(self):
        spec = small_spec()
        label, _ = generate_scene(spec, 4)
        np.testing.assert_array_equal(
            render_p(label, spec, 4).values, render_p(label, spec, 4).values
        )
        np.testing.assert_array_equal(
            render_a(label, spec, 4).values, render_a(label, spec, 4).values
        )

    def test_class_mean_color_near_palette(self):
        spec = small_spec(texture_amp=0.02)
        label, _ = generate_scene(spec, 9)
        img = render_p(label, spec, 9)
        names = spec.schema.class_names
        for cls in ("duct", "channel"):
            sel = label.labels == names.index(cls)
            assert sel.sum() > 0
            mean = img.values[sel].mean(axis=0)
            np.testing.assert_allclose(mean, PALETTE_P[cls], atol=0.05)

    def test_zero_density_pure_recoloring(self):
        spec = small_spec(marker_density=0.0)
        label, _ = generate_scene(spec, 2)
        assert not marker_mask(spec, 2).any()

    def test_marker_fraction_tracks_density(self):
        spec = small_spec(marker_density=0.2)
        fracs = [marker_mask(spec, seed).mean() for seed in range(50)]
        assert np.mean(fracs) == pytest.approx(0.2, abs=0.02)

    def test_markers_independent_of_p_rendering(self):
        # correlation between blob support and P pixel intensity over many seeds
        spec = small_spec(marker_density=0.3)
        blob_vals, p_vals = [], []
        for seed in range(40):
            label, _ = generate_scene(spec, seed)
            p = render_p(label, spec, seed).values.mean(axis=2).ravel()
            blobs = marker_mask(spec, seed).ravel().astype(float)
            blob_vals.append(blobs)
            p_vals.append(p)
        rho = np.corrcoef(np.concatenate(blob_vals), np.concatenate(p_vals))[0, 1]
        assert abs(rho) < 0.05


class TestBuildCorpus:
    def test_file_counts(self, tmp_path):
        spec = small_spec()
        manifests = build_corpus(spec, 2, 2, 1, tmp_path)
        pngs = sorted(tmp_path.rglob("*.png"))
        assert len([p for p in pngs if "label" not in p.name]) == 5
        assert len([p for p in pngs if "label" in p.name]) == 5
        assert len(list(tmp_path.glob("*.csv"))) == 3
        assert len(manifests["p_train"].entries) == 2

    def test_disjoint_seed_sets(self, tmp_path):
        manifests = build_corpus(small_spec(), 3, 3, 2, tmp_path)
        p = manifests["p_train"].seeds()
        a = manifests["a_train"].seeds()
        e = manifests["a_eval"].seeds()
        assert not (p & a) and not (p & e) and not (a & e)

    def test_rerun_identical_manifests(self, tmp_path):
        build_corpus(small_spec(), 2, 2, 1, tmp_path / "one")
        build_corpus(small_spec(), 2, 2, 1, tmp_path / "two")
        one = (tmp_path / "one" / "p_train.csv").read_text().replace("one", "X")
        two = (tmp_path / "two" / "p_train.csv").read_text().replace("two", "X")
        assert one == two
        img_one = (tmp_path / "one" / "p_train" / "p_00000.png").read_bytes()
        img_two = (tmp_path / "two" / "p_train" / "p_00000.png").read_bytes()
        assert img_one == img_two

    def test_refuse_overwrite(self, tmp_path):
        build_corpus(small_spec(), 1, 1, 1, tmp_path)
        with pytest.raises(RefuseOverwriteError):
            build_corpus(small_spec(), 1, 1, 1, tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        manifests = build_corpus(small_spec(), 2, 1, 1, tmp_path)
        back = CorpusManifest.read(tmp_path / "p_train.csv")
        assert back.entries == manifests["p_train"].entries
        assert back.domain == "P" and back.split == "train"
