import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoqa import distortion as dist
from panoqa.distortion import DistortionSpec, Region


H, W = 128, 256
CORE = Region(lon=0.3, lat=0.05)


def core_pixels(mask_region, shrink=0.85):
    d = dist.angular_distance_map(H, W, mask_region)
    return d < mask_region.radius * shrink


def outside_pixels(spec):
    m = dist.region_mask(H, W, spec.regions)
    return m == 0.0


def test_pristine_spec_is_exact_copy():
    img = dist.procedural_panorama(0, H, W)
    spec = DistortionSpec(dist_type=None, level=0)
    out = dist.apply_distortion(img, spec)
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_global_with_regions_rejected():
    with pytest.raises(ValueError):
        DistortionSpec(dist_type="GN", level=1, regions=(CORE,), global_flag=True)


def test_bad_type_and_level_rejected():
    with pytest.raises(ValueError):
        DistortionSpec(dist_type="XX", level=1)
    with pytest.raises(ValueError):
        DistortionSpec(dist_type="GN", level=4)


def test_determinism_bit_exact():
    img = dist.procedural_panorama(1, H, W)
    spec = DistortionSpec(dist_type="GN", level=2, regions=(CORE,), seed=99)
    a = dist.apply_distortion(img, spec)
    b = dist.apply_distortion(img, spec)
    np.testing.assert_array_equal(a, b)


def test_gn_noise_statistics_oracle():
    # flat gray panorama: the sample std of the residual inside the region
    # core must land on the configured sigma (clipping at [0,1] barely bites
    # at 0.5 +- 2.5 sigma)
    img = np.full((H, W, 3), 0.5)
    spec = DistortionSpec(dist_type="GN", level=3, regions=(CORE,), seed=7)
    out = dist.apply_distortion(img, spec)
    resid = (out - img)[core_pixels(CORE)]
    assert abs(resid.std() - 0.20) < 0.020
    assert abs(resid.mean()) < 0.01


def test_gn_levels_scale_noise():
    img = np.full((H, W, 3), 0.5)
    stds = []
    for level in (1, 2, 3):
        out = dist.apply_distortion(
            img, DistortionSpec(dist_type="GN", level=level, regions=(CORE,), seed=11)
        )
        stds.append((out - img)[core_pixels(CORE)].std())
    assert stds[0] < stds[1] < stds[2]
    assert abs(stds[0] - 0.05) < 0.005


def test_gb_kills_high_frequency_detail():
    img = dist.procedural_panorama(3, H, W)
    spec = DistortionSpec(dist_type="GB", level=3, regions=(CORE,), seed=0)
    out = dist.apply_distortion(img, spec)
    sel = core_pixels(CORE)
    # variance of column-to-column differences collapses under an 8 px blur
    orig_detail = np.diff(img, axis=1)[sel[:, 1:]].var()
    blur_detail = np.diff(out, axis=1)[sel[:, 1:]].var()
    assert blur_detail < 0.2 * orig_detail


def test_bd_multiplies_luminance_exactly():
    img = np.full((H, W, 3), 0.4)
    out = dist.apply_distortion(
        img, DistortionSpec(dist_type="BD", level=3, regions=(CORE,), seed=0)
    )
    sel = core_pixels(CORE)
    np.testing.assert_allclose(out[sel], 0.8, atol=1e-12)


def test_bd_clamps_at_one():
    img = np.full((H, W, 3), 0.7)
    out = dist.apply_distortion(
        img, DistortionSpec(dist_type="BD", level=3, regions=(CORE,), seed=0)
    )
    assert out.max() <= 1.0
    np.testing.assert_allclose(out[core_pixels(CORE)], 1.0, atol=1e-12)


def test_st_shifts_rows_below_seam():
    img = dist.procedural_panorama(5, H, W)
    spec = DistortionSpec(dist_type="ST", level=3, regions=(CORE,), seed=0)
    out = dist.apply_distortion(img, spec)
    rolled = np.roll(img, dist.ST_SHIFT[3], axis=1)
    lon, lat = dist.erp_grid(H, W)
    below = core_pixels(CORE) & (lat < CORE.lat)
    above = core_pixels(CORE) & (lat >= CORE.lat)
    np.testing.assert_array_equal(out[below], rolled[below])
    np.testing.assert_array_equal(out[above], img[above])


def test_st_global_uses_equator_seam():
    img = dist.procedural_panorama(6, H, W)
    out = dist.apply_distortion(
        img, DistortionSpec(dist_type="ST", level=1, global_flag=True, seed=0)
    )
    rolled = np.roll(img, dist.ST_SHIFT[1], axis=1)
    np.testing.assert_array_equal(out[: H // 2], img[: H // 2])
    np.testing.assert_array_equal(out[H // 2 :], rolled[H // 2 :])


@settings(max_examples=20, deadline=None)
@given(
    dtype=st.sampled_from(dist.TYPES),
    level=st.integers(1, 3),
    lon=st.floats(-3.0, 3.0),
    lat=st.floats(-0.4, 0.4),
    seed=st.integers(0, 1000),
)
def test_mask_locality_property(dtype, level, lon, lat, seed):
    img = dist.procedural_panorama(2, 64, 128)
    region = Region(lon=lon, lat=lat)
    spec = DistortionSpec(dist_type=dtype, level=level, regions=(region,), seed=seed)
    out = dist.apply_distortion(img, spec)
    far = dist.region_mask(64, 128, [region]) == 0.0
    np.testing.assert_array_equal(out[far], img[far])


def test_region_mask_values():
    m = dist.region_mask(H, W, [CORE])
    assert m.max() == 1.0
    assert m.min() == 0.0
    d = dist.angular_distance_map(H, W, CORE)
    assert (m[d <= CORE.radius] == 1.0).all()
    assert (m[d >= CORE.radius + dist.FALLOFF] == 0.0).all()
    rim = (d > CORE.radius) & (d < CORE.radius + dist.FALLOFF)
    assert ((m[rim] > 0.0) & (m[rim] < 1.0)).all()


# ---------------------------------------------------------------------------
# pseudo quality score


def test_pseudo_mos_frozen_values():
    r5 = (1.0, 5.0)
    one = (Region(0.0, 0.0),)
    two = (Region(0.0, 0.0), Region(2.0, 0.0))
    assert dist.pseudo_mos(DistortionSpec("GN", 3, global_flag=True), r5) == pytest.approx(1.0, abs=1e-12)
    assert dist.pseudo_mos(DistortionSpec("GN", 3, regions=one), r5) == pytest.approx(
        4.391036260090294, abs=1e-12
    )
    assert dist.pseudo_mos(DistortionSpec("GB", 2, regions=two), r5) == pytest.approx(
        4.2692435121083525, abs=1e-12
    )
    assert dist.pseudo_mos(DistortionSpec("BD", 1, regions=one), r5) == pytest.approx(
        4.857908460687735, abs=1e-12
    )
    assert dist.pseudo_mos(DistortionSpec("ST", 1, global_flag=True), (1.0, 3.0)) == pytest.approx(
        2.466666666666667, abs=1e-12
    )
    assert dist.pseudo_mos(DistortionSpec(None, 0), (1.0, 3.0)) == 3.0


@settings(max_examples=50, deadline=None)
@given(
    dtype=st.sampled_from(dist.TYPES),
    level=st.integers(1, 2),
    n_regions=st.integers(1, 2),
)
def test_pseudo_mos_monotone(dtype, level, n_regions):
    regions = tuple(Region(lon=-2.0 + 1.5 * i, lat=0.0) for i in range(n_regions))
    rng = (1.0, 5.0)
    base = dist.pseudo_mos(DistortionSpec(dtype, level, regions=regions), rng)
    worse_level = dist.pseudo_mos(DistortionSpec(dtype, level + 1, regions=regions), rng)
    assert worse_level <= base
    more = regions + (Region(lon=2.5, lat=0.0),)
    worse_cover = dist.pseudo_mos(DistortionSpec(dtype, level, regions=more), rng)
    assert worse_cover <= base
    assert rng[0] <= base <= rng[1]


def test_coverage_saturates():
    big = tuple(Region(lon=-3.0 + i * 1.2, lat=0.0, radius=0.9) for i in range(5))
    assert dist.coverage_factor(DistortionSpec("GN", 1, regions=big)) == 1.0


# ---------------------------------------------------------------------------
# dataset generation


def test_taxonomy_cells():
    jufe = dist.taxonomy_cells(dist.JUFE_STYLE)
    assert len(jufe) == 24
    assert len(set(jufe)) == 24
    oiq = dist.taxonomy_cells(dist.OIQ_STYLE)
    assert len(oiq) == 37
    assert {c[0] for c in oiq[:4]} == {0, 1, 2, 3}


def test_generate_dataset_jufe(tmp_path):
    bases = [(f"img{i}", dist.procedural_panorama(i, 64, 128)) for i in range(3)]
    man = dist.generate_dataset(bases, dist.JUFE_STYLE, tmp_path, n_per_image=24, seed=7)
    assert len(man.records) == 72
    cells = {(r.range_label, r.spec.dist_type, r.spec.level) for r in man.records}
    assert len(cells) == 24
    assert {r.split for r in man.records} == {"train", "test"}
    for r in man.records[:8]:
        assert (tmp_path / r.path).exists()
    # regions of two-region records stay separated
    for r in man.records:
        if len(r.spec.regions) == 2:
            a, b = r.spec.regions
            cos_d = np.sin(a.lat) * np.sin(b.lat) + np.cos(a.lat) * np.cos(b.lat) * np.cos(
                a.lon - b.lon
            )
            assert np.arccos(np.clip(cos_d, -1, 1)) > 2 * dist.REGION_RADIUS


def test_generate_dataset_oiq_labels(tmp_path):
    bases = [("img0", dist.procedural_panorama(0, 64, 128))]
    man = dist.generate_dataset(bases, dist.OIQ_STYLE, tmp_path, n_per_image=8, seed=1)
    assert {r.range_label for r in man.records} == {0, 1, 2, 3}
    pristine = [r for r in man.records if r.range_label == 0]
    for r in pristine:
        assert r.type_label == dist.NOT_APPLICABLE
        assert r.degree_label == dist.NOT_APPLICABLE
        assert r.pseudo_mos == 3.0
        assert r.spec.pristine
    glob = [r for r in man.records if r.range_label == 3]
    assert all(r.spec.global_flag for r in glob)


def test_generate_dataset_reruns_byte_identical(tmp_path):
    bases = [("img0", dist.procedural_panorama(4, 64, 128))]
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    dist.generate_dataset(bases, dist.JUFE_STYLE, a_dir, n_per_image=6, seed=3)
    dist.generate_dataset(bases, dist.JUFE_STYLE, b_dir, n_per_image=6, seed=3)
    assert (a_dir / "manifest.json").read_bytes() == (b_dir / "manifest.json").read_bytes()
    for p in sorted(a_dir.glob("*.png")):
        assert p.read_bytes() == (b_dir / p.name).read_bytes()


def test_manifest_round_trip(tmp_path):
    bases = [("img0", dist.procedural_panorama(8, 64, 128))]
    man = dist.generate_dataset(bases, dist.JUFE_STYLE, tmp_path, n_per_image=4, seed=5)
    back = dist.Manifest.load(tmp_path / "manifest.json")
    assert back.to_dict() == man.to_dict()
    assert back.taxonomy == dist.JUFE_STYLE
    assert back.score_range == (1.0, 5.0)


def test_png_round_trip_8bit(tmp_path):
    img = dist.procedural_panorama(9, 32, 64)
    dist.save_png(tmp_path / "x.png", img)
    back = dist.load_png(tmp_path / "x.png")
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-9


def test_procedural_panorama_properties():
    a = dist.procedural_panorama(0, 64, 128)
    b = dist.procedural_panorama(0, 64, 128)
    c = dist.procedural_panorama(1, 64, 128)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (64, 128, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.std() > 0.05
