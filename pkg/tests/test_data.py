import logging

import numpy as np
import pytest
from PIL import Image

from dpaseg.data import (
    PALETTE,
    DomainSet,
    RasterScene,
    SynthSpec,
    area_downsample,
    build_multiscale_source,
    generate_domain,
    load_domain,
    load_scene,
    majority_downsample,
    save_domain,
    save_label_png,
    save_rgb_png,
    save_scene,
    stitch_inference,
)
from dpaseg.errors import ConfigurationError, DataError, FormatError
from dpaseg.tensor import no_grad
from dpaseg.unet import MicroUNet, UNetConfig, predict_classes


def small_model(seed=0, k=5):
    return MicroUNet(UNetConfig(depth=3, base_width=4, num_classes=k, seed=seed))


def direct_labels(model, bands):
    with no_grad():
        return predict_classes(model.forward(bands[None]))[0] + 1


def test_generation_is_reproducible():
    spec = SynthSpec(seed=4, gain=1.1, noise=0.02)
    a, _ = generate_domain(spec, 3)
    b, _ = generate_domain(SynthSpec(seed=4, gain=1.1, noise=0.02), 3)
    for x, y in zip(a.tiles, b.tiles):
        assert x.bands.tobytes() == y.bands.tobytes() and x.labels.tobytes() == y.labels.tobytes()
    t1, truth1 = generate_domain(spec, 3, "target")
    t2, truth2 = generate_domain(spec, 3, "target")
    assert all(x.labels is None for x in t1.tiles)
    assert all(np.array_equal(x, y) for x, y in zip(truth1.open(), truth2.open()))
    assert truth1.ids == [t.geo_id for t in t1.tiles]


def test_null_shift_domains_match_in_distribution():
    spec = SynthSpec(num_classes=6, seed=1)
    assert spec.is_null_shift
    src, _ = generate_domain(spec, 40, "source")
    tgt, truth = generate_domain(spec, 40, "target")
    np.testing.assert_allclose(src.bands().mean(axis=(0, 2, 3)), tgt.bands().mean(axis=(0, 2, 3)), atol=0.02)
    fs = np.bincount(src.labels().ravel(), minlength=7)[1:] / src.labels().size
    ft = np.bincount(np.stack(truth.open()).ravel(), minlength=7)[1:] / src.labels().size
    np.testing.assert_allclose(fs, ft, atol=0.02)


def test_gain_scales_band_means():
    # stay below the clip for most pixels by using dark class means
    means = np.full((4, 4), 0.2) + np.arange(4)[:, None] * 0.1
    spec = SynthSpec(num_classes=4, class_means=means, frequencies=[0.25] * 4, gain=1.3, seed=2)
    src, _ = generate_domain(spec, 30, "source")
    tgt, _ = generate_domain(spec, 30, "target")
    expected = np.clip(1.3 * src.bands(), 0, 1).mean(axis=(0, 2, 3))
    got = tgt.bands().mean(axis=(0, 2, 3))
    np.testing.assert_allclose(got, expected, rtol=0.02)
    ratio = got / src.bands().mean(axis=(0, 2, 3))
    assert np.all(np.abs(ratio - 1.3) < 0.03)


def test_two_equal_frequencies():
    src, _ = generate_domain(SynthSpec(num_classes=2, frequencies=[0.5, 0.5], seed=3), 20)
    counts = np.bincount(src.labels().ravel(), minlength=3)[1:]
    assert np.all(np.abs(counts / counts.sum() - 0.5) <= 0.02 * 0.5)


def test_unlabeled_fraction_hides_whole_segments():
    src, _ = generate_domain(SynthSpec(num_classes=4, frequencies=[0.25] * 4, unlabeled_fraction=0.3, seed=1), 10)
    assert (src.labels() == 0).any() and (src.labels() > 0).any()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(frequencies=[0.5, 0.6]),
        dict(frequencies=[0.5, 0.5, 0.0]),
        dict(num_classes=25),
        dict(gain=(1.0, 2.0)),
        dict(noise=-1.0),
        dict(tile_size=2),
    ],
)
def test_bad_spec_is_rejected(kwargs):
    kwargs = {"num_classes": 2, **kwargs}
    with pytest.raises(ConfigurationError):
        SynthSpec(**kwargs)


def test_checkerboard_downsample_is_uniform():
    board = np.indices((8, 8)).sum(0) % 2
    np.testing.assert_allclose(area_downsample(board, 4, 4), 0.5, atol=1e-15)


def test_majority_downsample_keeps_present_labels():
    rng = np.random.default_rng(0)
    labels = rng.integers(1, 6, size=(20, 20))
    out = majority_downsample(labels, 8, 8)
    assert set(np.unique(out)) <= set(np.unique(labels))
    block = np.repeat(np.repeat(np.array([[1, 2], [3, 4]]), 4, 0), 4, 1)
    np.testing.assert_array_equal(majority_downsample(block, 2, 2), [[1, 2], [3, 4]])


def big_scene(size=160, seed=0):
    spec = SynthSpec(num_classes=5, frequencies=[0.2] * 5, tile_size=size, region_count=40, seed=seed)
    return generate_domain(spec, 1)[0].tiles[0]


def test_multiscale_ratio_and_tags():
    out = build_multiscale_source([big_scene()], 400, out_size=64)
    tags = [t.resolution_tag for t in out.tiles]
    assert (tags.count("native"), tags.count("x2"), tags.count("x2.5")) == (200, 100, 100)
    assert all(t.shape == (64, 64) for t in out.tiles)
    assert all(set(np.unique(t.labels)) <= set(range(1, 6)) for t in out.tiles)


def test_multiscale_skips_sizes_that_do_not_fit(caplog):
    with caplog.at_level(logging.WARNING):
        out = build_multiscale_source([big_scene(128)], 30, out_size=64)
    tags = [t.resolution_tag for t in out.tiles]
    assert (tags.count("native"), tags.count("x2")) == (20, 10)
    assert "160" in caplog.text


def test_multiscale_constant_scene():
    scene = RasterScene(np.full((4, 160, 160), 0.3), np.full((160, 160), 2))
    for t in build_multiscale_source([scene], 8).tiles:
        np.testing.assert_allclose(t.bands, 0.3, atol=1e-12)
        assert (t.labels == 2).all()


def test_stitch_single_tile_equals_direct():
    model = small_model()
    scene = big_scene(32)
    np.testing.assert_array_equal(stitch_inference(model, scene, 32), direct_labels(model, scene.bands))


def test_stitch_constant_scene_is_constant():
    # keeping only the centre taps removes zero-padding effects, so the model is pointwise
    model = small_model(1)
    for name, p in model.params.items():
        if name.endswith("weight") and p.shape[2] == 3:
            centre = p.data[:, :, 1, 1].copy()
            p.data[:] = 0.0
            p.data[:, :, 1, 1] = centre
    scene = RasterScene(np.full((4, 40, 40), 0.6))
    outs = [stitch_inference(model, scene, 16, overlap) for overlap in (0.0, 0.25, 0.5, 0.75)]
    for out in outs:
        assert out.shape == (40, 40)
        assert (out == outs[0][0, 0]).all()


def test_stitch_without_overlap_partitions_the_scene():
    model = small_model(2)
    scene = big_scene(64, seed=3)
    out = stitch_inference(model, scene, 32, 0.0)
    for r in (0, 32):
        for c in (0, 32):
            np.testing.assert_array_equal(out[r : r + 32, c : c + 32], direct_labels(model, scene.bands[:, r : r + 32, c : c + 32]))


def test_stitch_pads_ragged_scenes_and_warns_on_small_ones(caplog):
    model = small_model()
    assert stitch_inference(model, big_scene(40), 16, 0.5).shape == (40, 40)
    with caplog.at_level(logging.WARNING):
        assert stitch_inference(model, RasterScene(np.full((4, 12, 12), 0.5)), 16).shape == (12, 12)
    assert "larger than scene" in caplog.text
    with pytest.raises(ConfigurationError):
        stitch_inference(model, big_scene(32), 18)
    with pytest.raises(ConfigurationError):
        stitch_inference(model, big_scene(32), 16, 1.0)


def test_msr_round_trip(tmp_path):
    scene = big_scene(16)
    scene.geo_id, scene.resolution_tag = "tile-7", "x2"
    save_scene(scene, tmp_path / "a.msr")
    loaded = load_scene(tmp_path / "a.msr")
    save_scene(loaded, tmp_path / "b.msr")
    assert (tmp_path / "a.msr").read_bytes() == (tmp_path / "b.msr").read_bytes()
    assert loaded.geo_id == "tile-7" and loaded.resolution_tag == "x2"
    np.testing.assert_array_equal(loaded.labels, scene.labels)
    save_scene(RasterScene(scene.bands), tmp_path / "c.msr")
    assert load_scene(tmp_path / "c.msr").labels is None


def test_msr_errors_name_offsets(tmp_path):
    path = tmp_path / "a.msr"
    save_scene(big_scene(16), path)
    data = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError, match="offset 0"):
        load_scene(path)
    path.write_bytes(data[:8] + (9).to_bytes(4, "little") + data[12:])
    with pytest.raises(FormatError, match="version 9 at offset 8"):
        load_scene(path)
    path.write_bytes(data[:100])
    with pytest.raises(FormatError, match="truncated"):
        load_scene(path)


def test_domain_directory_round_trip(tmp_path):
    src, _ = generate_domain(SynthSpec(num_classes=3, frequencies=[0.3, 0.3, 0.4]), 3)
    save_domain(src, tmp_path / "d" / "source")
    back = load_domain(str(tmp_path / "d" / "source"), "source")
    assert len(back) == 3 and back.name == "d"
    as_target = load_domain(str(tmp_path / "d" / "source"), "target")
    assert all(t.labels is None for t in as_target.tiles)
    with pytest.raises(DataError):
        load_domain(str(tmp_path / "missing"), "source")


def test_scene_validation():
    with pytest.raises(DataError):
        RasterScene(np.full((4, 2, 2), 1.5))
    with pytest.raises(DataError):
        RasterScene(np.zeros((4, 2, 2)), np.zeros((3, 2)))
    with pytest.raises(DataError):
        DomainSet([RasterScene(np.zeros((4, 2, 2)))], "source")


def test_unlabeled_map_gives_black_png(tmp_path):
    save_label_png(np.zeros((5, 7), int), tmp_path / "a.png")
    rgb = np.asarray(Image.open(tmp_path / "a.png").convert("RGB"))
    assert rgb.shape == (5, 7, 3) and not rgb.any()


def test_palette_colors_are_distinct(tmp_path):
    assert len(PALETTE) == 25 and PALETTE[0] == (0, 0, 0)
    assert len(set(PALETTE[1:])) == 24 and (0, 0, 0) not in PALETTE[1:]
    labels = np.arange(25).reshape(5, 5)
    save_label_png(labels, tmp_path / "p.png")
    rgb = np.asarray(Image.open(tmp_path / "p.png").convert("RGB")).reshape(-1, 3)
    assert [tuple(int(v) for v in c) for c in rgb] == list(PALETTE)
    with pytest.raises(DataError):
        save_label_png(np.full((2, 2), 25), tmp_path / "x.png")


def test_rgb_png(tmp_path):
    bands = np.zeros((4, 2, 2))
    bands[2] = 1.0
    save_rgb_png(RasterScene(bands), tmp_path / "r.png")
    assert (np.asarray(Image.open(tmp_path / "r.png")) == [255, 0, 0]).all()
