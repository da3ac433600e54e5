import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcaseg.data import (LV, MYO, RV, Sample, SynthConfig, apply_transform, augment, build_synthetic_split,
                         draw_transform, generate_synthetic, invert_transform, load_dataset, normalize,
                         one_hot, quantize, read_pgm, save_dataset, split, write_pgm)
from pcaseg.errors import ConfigurationError
from pcaseg.numcore import RngStream


def test_noise_free_pixels_equal_band_values():
    cfg = SynthConfig(count=5, noise_sigma=0.0, seed=3)
    for s in generate_synthetic(cfg):
        labels = s.labels
        for c, band in enumerate(cfg.bands):
            assert np.all(s.image[0][labels == c] == band)
        assert np.all(s.mask.sum(axis=0) == 1)


def test_generation_is_deterministic():
    cfg = SynthConfig(count=6, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    c = generate_synthetic(SynthConfig(count=6, seed=12))
    assert not np.array_equal(a[0].image, c[0].image)


def test_structures_nest():
    for s in generate_synthetic(SynthConfig(count=30, noise_sigma=0.0, seed=4)):
        labels = s.labels
        lv = np.argwhere(labels == LV)
        assert len(lv) > 0
        # every LV pixel is surrounded by non-background within one pixel
        for r, c in lv:
            assert np.all(labels[r - 1:r + 2, c - 1:c + 2] != 0)


def _uniform_moments(lo, hi):
    m1 = (lo + hi) / 2
    m2 = (hi ** 3 - lo ** 3) / (3 * (hi - lo))
    return m1, m2


def _rv_area_monte_carlo(cfg, n=1500, seed=0):
    """Mean continuous RV area from independent parameter draws and a fine sample grid."""
    rng = np.random.default_rng(seed)
    g = np.linspace(-12, 12, 241)
    yy, xx = np.meshgrid(g, g, indexing="ij")
    cell = (g[1] - g[0]) ** 2
    total = 0.0
    for _ in range(n):
        r_lv = rng.uniform(*cfg.lv_radius)
        r_myo = r_lv + rng.uniform(*cfg.myo_thickness)
        r_rv = rng.uniform(*cfg.rv_radius)
        dist = r_myo + rng.uniform(*cfg.rv_offset)
        d = np.hypot(yy, xx)
        d_rv = np.hypot(yy - dist, xx)
        total += np.count_nonzero((d_rv < r_rv) & (d >= r_myo)) * cell
    return total / n


def test_class_areas_match_monte_carlo_oracle():
    cfg = SynthConfig(count=500, noise_sigma=0.0, seed=21)
    counts = np.array([[np.count_nonzero(s.labels == c) for c in (LV, MYO, RV)]
                       for s in generate_synthetic(cfg)], dtype=float)
    mean = counts.mean(axis=0)
    se = counts.std(axis=0) / math.sqrt(len(counts))

    e_r, e_r2 = _uniform_moments(*cfg.lv_radius)
    e_t, e_t2 = _uniform_moments(*cfg.myo_thickness)
    lv_expected = math.pi * e_r2
    myo_expected = math.pi * (2 * e_r * e_t + e_t2)
    rv_expected = _rv_area_monte_carlo(cfg)

    # pixel-centre rasterisation adds a small bias on top of the sampling error
    for got, want, err in zip(mean, (lv_expected, myo_expected, rv_expected), se):
        assert abs(got - want) < 4 * err + 0.02 * want, (got, want)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SynthConfig(hw=16, lv_radius=(5, 7)).validate()
    with pytest.raises(ConfigurationError):
        SynthConfig(hw=24).validate()
    with pytest.raises(ConfigurationError):
        SynthConfig(lv_radius=(4, 3)).validate()
    with pytest.raises(ConfigurationError):
        generate_synthetic(SynthConfig(count=0))


def test_config_dict_round_trip():
    cfg = SynthConfig(noise_sigma=0.2, seed=9)
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unit_range_normalization():
    img = np.array([[[0.0, 0.5], [1.0, 0.25]]])
    s = Sample(img, None, "a")
    assert np.array_equal(normalize(s, "unit_range").image, img)
    out = normalize(Sample(img * 3 + 2, None, "b"), "unit_range").image
    assert out.min() == 0.0 and out.max() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_zscore_statistics_and_affine_invariance(seed, scale, shift):
    img = RngStream(seed).normal((1, 8, 8))
    a = normalize(Sample(img, None, "a"), "zscore").image
    b = normalize(Sample(img * scale + shift, None, "b"), "zscore").image
    assert abs(a.mean()) < 1e-10
    assert abs(a.std() - 1) < 1e-10
    assert np.allclose(a, b, atol=1e-9)


def test_zscore_constant_image_warns():
    with pytest.warns(RuntimeWarning):
        out = normalize(Sample(np.full((1, 4, 4), 2.0), None, "c"), "zscore")
    assert np.all(out.image == 0)


def test_unknown_normalization_mode():
    with pytest.raises(ConfigurationError):
        normalize(Sample(np.zeros((1, 2, 2)), None, "x"), "minmax")


def test_identity_transform_leaves_sample_unchanged():
    s = generate_synthetic(SynthConfig(count=1, seed=2))[0]
    assert np.array_equal(apply_transform(s.image, (0, False, False)), s.image)


def test_all_eight_transforms_are_distinct_and_invertible():
    arr = np.arange(16.0).reshape(1, 4, 4)
    seen = set()
    for k in range(4):
        for fh in (False, True):
            for fv in (False, True):
                t = (k, fh, fv)
                out = apply_transform(arr, t)
                seen.add(out.tobytes())
                assert np.array_equal(invert_transform(out, t), arr)
    # flips combined with rotations cover the dihedral group of order 8
    assert len(seen) == 8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_augment_preserves_class_counts_and_inverts(seed):
    s = generate_synthetic(SynthConfig(count=1, seed=seed % 1000))[0]
    rng_a, rng_b = RngStream(seed), RngStream(seed)
    out = augment(s, rng_a)
    t = draw_transform(rng_b)
    assert np.array_equal(out.mask.sum(axis=(1, 2)), s.mask.sum(axis=(1, 2)))
    assert np.all(out.mask.sum(axis=0) == 1)
    assert np.array_equal(invert_transform(out.image, t), s.image)
    assert np.array_equal(invert_transform(out.mask, t), s.mask)


def _samples(n):
    return [Sample(np.zeros((1, 4, 4)), one_hot(np.zeros((4, 4), int), 4), f"s{i:03d}") for i in range(n)]


def test_split_paper_count_and_disjointness():
    data = _samples(150)
    sp = split(data, 0.1, seed=5, n_val=30, n_test=50)
    assert len(sp.train) == 70
    assert len(sp.labeled) == 7
    ids = sp.ids()
    all_ids = sum(ids.values(), [])
    assert len(all_ids) == len(set(all_ids)) == 150


def test_split_full_fraction_and_determinism():
    data = _samples(100)
    sp = split(data, 1.0, seed=1)
    assert sp.unlabeled == []
    assert split(data, 0.3, seed=4).ids() == split(data, 0.3, seed=4).ids()
    assert split(data, 0.3, seed=4).ids() != split(data, 0.3, seed=5).ids()


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([0.05, 0.1, 0.25, 0.5, 1.0]), st.integers(0, 1000))
def test_val_test_independent_of_fraction(frac, seed):
    data = _samples(120)
    ref = split(data, 1.0, seed)
    sp = split(data, frac, seed)
    assert sp.ids()["val"] == ref.ids()["val"]
    assert sp.ids()["test"] == ref.ids()["test"]
    assert set(sp.ids()["labeled"]) | set(sp.ids()["unlabeled"]) == set(ref.ids()["labeled"])


def test_split_errors():
    data = _samples(100)
    with pytest.raises(ConfigurationError):
        split(data, 0.0, 1)
    with pytest.raises(ConfigurationError):
        split(data, 0.001, 1)
    with pytest.raises(ConfigurationError):
        split(data, 0.5, 1, n_val=60, n_test=50)


def test_pgm_known_byte_sequence(tmp_path):
    path = tmp_path / "g.pgm"
    write_pgm(path, np.array([[0, 1], [256, 65535]]))
    assert path.read_bytes() == b"P5\n2 2\n65535\n\x00\x00\x00\x01\x01\x00\xff\xff"
    grid, maxval = read_pgm(path)
    assert maxval == 65535
    assert grid.tolist() == [[0, 1], [256, 65535]]


def test_pgm_eight_bit_and_header_comments(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n# a comment\n3 1\n255\n\x00\x02\x03")
    grid, maxval = read_pgm(path)
    assert maxval == 255 and grid.tolist() == [[0, 2, 3]]


def test_pgm_errors(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="magic"):
        read_pgm(bad)
    short = tmp_path / "short.pgm"
    short.write_bytes(b"P5\n2 2\n65535\n\x00\x00\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(short)
    header_only = tmp_path / "h.pgm"
    header_only.write_bytes(b"P5\n2")
    with pytest.raises(ValueError):
        read_pgm(header_only)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "neg.pgm", np.array([[-1]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_pgm_round_trip(tmp_path_factory, h, w, seed):
    grid = np.random.default_rng(seed).integers(0, 65536, size=(h, w))
    path = tmp_path_factory.mktemp("pgm") / "r.pgm"
    write_pgm(path, grid)
    assert np.array_equal(read_pgm(path)[0], grid)


def test_dataset_directory_round_trip(tmp_path):
    data = build_synthetic_split(SynthConfig(count=40, seed=1), 0.5, split_seed=2, n_val=5, n_test=5)
    save_dataset(tmp_path, data)
    assert (tmp_path / "manifest.json").exists()
    back = load_dataset(tmp_path)
    assert back.ids() == data.ids()
    for a, b in zip(data.train + data.val + data.test, back.train + back.val + back.test):
        assert np.array_equal(quantize(a.image[0]), quantize(b.image[0]))
        assert np.array_equal(a.mask, b.mask)
        assert np.all(b.mask.sum(axis=0) == 1)


def test_load_dataset_without_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path)
