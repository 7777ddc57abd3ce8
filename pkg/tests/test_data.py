import numpy as np
import pytest

from nerdseg import (
    Blob,
    SynthConfig,
    Volume,
    center_crop,
    concat_modalities,
    generate_border_bias,
    load_dataset,
    normalize_intensity,
    rasterize_blobs,
    restack_slices,
    save_synth_dataset,
    slice_volume,
)
from nerdseg.data import in_border_band, resolve_rule, save_dataset
from nerdseg.errors import ConfigError, GenerationError, ShapeError


def test_slice_restack_roundtrip(rng):
    volume = Volume(values=rng.normal(size=(5, 6, 7)), spacing=(2.0, 1.0, 1.0),
                    volume_id="v1")
    slices = slice_volume(volume)
    assert [s.index for s in slices] == list(range(5))
    assert all(s.volume_id == "v1" for s in slices)
    shuffled = [slices[i] for i in (3, 0, 4, 1, 2)]
    assert np.array_equal(restack_slices(shuffled), volume.values)


def test_restack_validates_indices_and_shapes(rng):
    volume = Volume(values=rng.normal(size=(3, 4, 4)))
    slices = slice_volume(volume)
    with pytest.raises(ShapeError, match="indices"):
        restack_slices(slices[:2] + slices[:1] * 0 + [slices[2]._replace(index=5)])
    with pytest.raises(ShapeError, match="shape"):
        restack_slices([np.zeros((4, 4)), np.zeros((4, 5))])
    with pytest.raises(ShapeError):
        restack_slices([])


def test_center_crop_even_and_odd_margins():
    arr = np.arange(30).reshape(5, 6)
    # odd margin: extra row/column dropped from the bottom/right
    out = center_crop(arr, 4, 4)
    assert np.array_equal(out, arr[0:4, 1:5])
    out = center_crop(arr, 3, 2)
    assert np.array_equal(out, arr[1:4, 2:4])
    assert np.array_equal(center_crop(arr, 5, 6), arr)
    multi = np.stack([arr, arr], axis=-1)
    assert center_crop(multi, 4, 4).shape == (4, 4, 2)
    with pytest.raises(ShapeError, match="height"):
        center_crop(arr, 6, 4)
    with pytest.raises(ShapeError, match="width"):
        center_crop(arr, 4, 7)


def test_normalize_minmax():
    arr = np.array([2.0, 4.0, 10.0])
    out = normalize_intensity(arr, "minmax")
    assert np.allclose(out, [0.0, 0.25, 1.0])
    assert out.min() == 0.0 and out.max() == 1.0


def test_normalize_zscore_uses_population_std():
    out = normalize_intensity(np.array([1.0, 2.0, 3.0]), "zscore")
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
    assert np.allclose(out, expected)  # +-1.2247 for the endpoints
    assert abs(out.mean()) < 1e-12
    assert abs(out.std() - 1.0) < 1e-12


def test_normalize_constant_input_maps_to_zeros():
    arr = np.full((3, 3), 7.0)
    for mode in ("minmax", "zscore"):
        assert np.array_equal(normalize_intensity(arr, mode), np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        normalize_intensity(arr, "robust")


def test_concat_modalities(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    out = concat_modalities([a, b])
    assert out.shape == (4, 5, 2)
    assert np.array_equal(out[..., 0], a)
    assert np.array_equal(out[..., 1], b)
    with pytest.raises(ShapeError, match="modality 1"):
        concat_modalities([a, rng.normal(size=(4, 6))])
    with pytest.raises(ShapeError):
        concat_modalities([])


def _tiny_synth(**kw):
    base = dict(height=48, width=48, train=6, val=3, test=3, blob_count=(2, 4),
                blob_radius=(2.0, 4.0), band=12, seed=7)
    base.update(kw)
    return SynthConfig(**base)


def test_synth_is_deterministic_and_split_sized():
    a = generate_border_bias(_tiny_synth())
    b = generate_border_bias(_tiny_synth())
    assert a.rule == b.rule
    for split, count in (("train", 6), ("val", 3), ("test", 3)):
        assert len(a.splits[split]) == count
        for sa, sb in zip(a.splits[split], b.splits[split]):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.label, sb.label)
            assert sa.meta == sb.meta
    # different seed changes the data
    c = generate_border_bias(_tiny_synth(seed=8))
    assert not np.array_equal(a.splits["train"][0].image, c.splits["train"][0].image)


def test_synth_labels_rederive_from_blob_geometry():
    dataset = generate_border_bias(_tiny_synth())
    config = dataset.config
    for split_samples in dataset.splits.values():
        for sample in split_samples:
            blobs = [Blob.from_dict(d) for d in sample.meta["blobs"]]
            mask = rasterize_blobs(blobs, config.height, config.width,
                                   foreground_only=True)
            assert np.array_equal(mask, sample.label.astype(bool))
            # the foreground flag matches the positional rule
            for blob in blobs:
                inside = in_border_band(blob.row, blob.col, config.height,
                                        config.width, config.band)
                expected = inside if dataset.rule == "border" else not inside
                assert blob.foreground == expected


def test_synth_blob_texture_is_position_blind():
    # intensity distribution inside blobs must not depend on the label side
    dataset = generate_border_bias(_tiny_synth(train=40, seed=3))
    fg_vals, bg_vals = [], []
    for sample in dataset.splits["train"]:
        blobs = [Blob.from_dict(d) for d in sample.meta["blobs"]]
        for blob in blobs:
            single = rasterize_blobs([blob], 48, 48)
            values = sample.image[..., 0][single]
            (fg_vals if blob.foreground else bg_vals).append(values)
    fg = np.concatenate(fg_vals)
    bg = np.concatenate(bg_vals)
    assert abs(fg.mean() - bg.mean()) < 0.01
    assert abs(fg.std() - bg.std()) < 0.01


def test_synth_rule_resolution():
    assert resolve_rule(_tiny_synth(rule="border")) == "border"
    assert resolve_rule(_tiny_synth(rule="center")) == "center"
    auto = resolve_rule(_tiny_synth(rule="auto"))
    assert auto in ("border", "center")
    assert resolve_rule(_tiny_synth(rule="auto")) == auto  # coin is seeded
    rules = {resolve_rule(_tiny_synth(rule="auto", seed=s)) for s in range(12)}
    assert rules == {"border", "center"}  # both directions occur across seeds


def test_synth_images_live_in_unit_range():
    dataset = generate_border_bias(_tiny_synth(noise=0.3))
    for sample in dataset.splits["train"]:
        assert sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0
        assert sample.image.max() <= 1.0
        assert sample.image.shape == (48, 48, 1)
        assert set(np.unique(sample.label)) <= {0, 1}


def test_synth_placement_failure_raises():
    # a board too crowded for non-overlapping blobs
    config = _tiny_synth(height=20, width=20, blob_count=(8, 8),
                         blob_radius=(4.0, 4.0), band=6)
    with pytest.raises(GenerationError, match="blob"):
        generate_border_bias(config)


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        _tiny_synth(band=40)  # band must leave an interior
    with pytest.raises(ConfigError):
        _tiny_synth(blob_count=(3, 2))
    with pytest.raises(ConfigError):
        _tiny_synth(blob_radius=(0.0, 2.0))
    with pytest.raises(ConfigError):
        _tiny_synth(blob_radius=(20.0, 30.0))  # cannot fit
    with pytest.raises(ConfigError):
        _tiny_synth(rule="random")
    with pytest.raises(ConfigError):
        _tiny_synth(noise=-0.1)
    with pytest.raises(ConfigError):
        _tiny_synth(train=0)


def test_dataset_save_load_roundtrip(tmp_path):
    dataset = generate_border_bias(_tiny_synth())
    root = save_synth_dataset(tmp_path / "data", dataset)
    loaded = load_dataset(root)
    assert loaded.meta["rule"] == dataset.rule
    assert loaded.meta["synth"]["seed"] == 7
    assert loaded.spacing == (1.0, 1.0, 1.0)
    for split in ("train", "val", "test"):
        assert len(loaded.splits[split]) == len(dataset.splits[split])
        for got, want in zip(loaded.splits[split], dataset.splits[split]):
            assert np.array_equal(got.image, want.image)
            assert np.array_equal(got.label, want.label)
            assert got.volume_id == want.volume_id
            assert got.meta == want.meta


def test_load_dataset_validates(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
    dataset = generate_border_bias(_tiny_synth())
    root = save_synth_dataset(tmp_path / "data", dataset)
    manifest = root / "manifest.json"
    text = manifest.read_text().replace('"format_version": 1', '"format_version": 9')
    manifest.write_text(text)
    with pytest.raises(ConfigError, match="format_version"):
        load_dataset(root)


def test_save_dataset_rejects_bad_labels(tmp_path, rng):
    from nerdseg import SliceSample

    bad = SliceSample(image=rng.random((8, 8, 1)).astype(np.float32),
                      label=np.full((8, 8), 3, dtype=np.uint8),
                      volume_id="x", index=0)
    with pytest.raises(ShapeError, match="binary"):
        save_dataset(tmp_path / "d", {"train": [bad]})
