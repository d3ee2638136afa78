import struct

import numpy as np
import pytest

from crossfuse.data import (
    CUBE_MAGIC,
    CubeError,
    PatchDataset,
    SceneCube,
    extract_patches,
    load_cube,
    nearest_mean_accuracy,
    normalize,
    read_cube,
    split_fixed,
    split_per_class,
    synth_scene,
    text_bands_to_cube,
    write_cube,
    write_train_index,
)


def small_cube(rng, h=6, w=7, c_h=3, c_l=1):
    labels = rng.integers(0, 4, size=(h, w)).astype(np.int32)
    return SceneCube(rng.random((h, w, c_h)), rng.random((h, w, c_l)), labels)


def save(cube, tmp_path):
    paths = [tmp_path / n for n in ("h.cube", "l.cube", "y.cube")]
    cube.save(*paths)
    return paths


# --- cube files ------------------------------------------------------------


def test_cube_roundtrip_is_bitwise(tmp_path, rng):
    cube = small_cube(rng)
    paths = save(cube, tmp_path)
    back = load_cube(*paths)
    assert back.hsi.tobytes() == cube.hsi.tobytes()
    assert back.lidar.tobytes() == cube.lidar.tobytes()
    assert back.labels.tobytes() == cube.labels.tobytes()
    back.save(*[p.with_suffix(".again") for p in paths])
    for p in paths:
        assert p.read_bytes() == p.with_suffix(".again").read_bytes()


def test_cube_header_layout(tmp_path):
    write_cube(tmp_path / "a.cube", np.arange(6, dtype=np.int32).reshape(2, 3))
    raw = (tmp_path / "a.cube").read_bytes()
    assert raw[:8] == b"HLCUBE01"
    assert struct.unpack("<IIIB", raw[8:21]) == (2, 3, 1, 1)
    assert np.frombuffer(raw[21:], dtype="<i4").tolist() == list(range(6))


def test_mismatched_rasters_rejected_with_shapes(tmp_path, rng):
    cube = small_cube(rng)
    paths = save(cube, tmp_path)
    write_cube(paths[1], rng.random((5, 7, 1)))
    with pytest.raises(CubeError, match=r"hsi \(6, 7, 3\).*lidar \(5, 7, 1\).*labels \(6, 7, 1\)"):
        load_cube(*paths)


def test_bad_magic_rejected(tmp_path, rng):
    paths = save(small_cube(rng), tmp_path)
    raw = bytearray(paths[0].read_bytes())
    raw[:8] = b"XXCUBE01"
    paths[0].write_bytes(bytes(raw))
    with pytest.raises(CubeError, match="magic"):
        load_cube(*paths)


def test_unknown_dtype_code_rejected(tmp_path):
    (tmp_path / "x.cube").write_bytes(CUBE_MAGIC + struct.pack("<IIIB", 1, 1, 1, 7) + bytes(8))
    with pytest.raises(CubeError, match="dtype"):
        read_cube(tmp_path / "x.cube")


def test_truncated_payload_rejected(tmp_path):
    write_cube(tmp_path / "x.cube", np.ones((3, 3, 2)))
    raw = (tmp_path / "x.cube").read_bytes()
    (tmp_path / "x.cube").write_bytes(raw[:-8])
    with pytest.raises(CubeError, match="bytes"):
        read_cube(tmp_path / "x.cube")


def _sparse_cube(path, h, w, c, code):
    itemsize = 8 if code == 0 else 4
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC + struct.pack("<IIIB", h, w, c, code))
        fh.truncate(21 + h * w * c * itemsize)


def test_houston_scale_shapes_load(tmp_path):
    paths = [tmp_path / "hsi.cube", tmp_path / "lidar.cube", tmp_path / "labels.cube"]
    _sparse_cube(paths[0], 349, 1905, 144, 0)
    _sparse_cube(paths[1], 349, 1905, 1, 0)
    _sparse_cube(paths[2], 349, 1905, 1, 1)
    cube = load_cube(*paths, mmap=True)
    assert cube.hsi.shape == (349, 1905, 144)
    assert cube.lidar.shape == (349, 1905, 1)
    assert cube.labels.shape == (349, 1905)


def test_text_converter(tmp_path):
    a = np.arange(12.0).reshape(3, 4)
    np.savetxt(tmp_path / "b1.txt", a)
    np.savetxt(tmp_path / "b2.txt", -a)
    np.savetxt(tmp_path / "y.txt", (a % 3).astype(int), fmt="%d")
    text_bands_to_cube([tmp_path / "b1.txt", tmp_path / "b2.txt"], tmp_path / "x.cube")
    text_bands_to_cube([tmp_path / "y.txt"], tmp_path / "y.cube", labels=True)
    x = read_cube(tmp_path / "x.cube")
    assert x.shape == (3, 4, 2)
    np.testing.assert_array_equal(x[:, :, 1], -a)
    y = read_cube(tmp_path / "y.cube")
    assert y.dtype == np.int32 and y[:, :, 0].tolist() == (a % 3).astype(int).tolist()


def test_text_converter_rejects_mismatched_bands(tmp_path):
    np.savetxt(tmp_path / "b1.txt", np.ones((3, 4)))
    np.savetxt(tmp_path / "b2.txt", np.ones((4, 4)))
    with pytest.raises(CubeError, match="disagree"):
        text_bands_to_cube([tmp_path / "b1.txt", tmp_path / "b2.txt"], tmp_path / "x.cube")


# --- normalization ---------------------------------------------------------


def test_normalize_affine_band():
    cube = SceneCube(np.array([[[2.0], [4.0], [6.0]]]), np.zeros((1, 3, 1)), np.ones((1, 3), np.int32))
    np.testing.assert_array_equal(normalize(cube).hsi[0, :, 0], [0.0, 0.5, 1.0])


def test_normalize_constant_band_is_zero(rng):
    cube = SceneCube(np.full((4, 4, 2), 7.0), rng.random((4, 4, 1)), np.ones((4, 4), np.int32))
    np.testing.assert_array_equal(normalize(cube).hsi, 0.0)


def test_normalized_band_extremes(rng):
    hsi = rng.standard_normal((8, 9, 5)) * 40 + 3
    hsi[:, :, 2] = 1.5
    out = normalize(SceneCube(hsi, rng.random((8, 9, 2)), np.ones((8, 9), np.int32)))
    for band in list(np.moveaxis(out.hsi, -1, 0)) + list(np.moveaxis(out.lidar, -1, 0)):
        if np.ptp(band) == 0:
            assert np.all(band == 0)
        else:
            assert band.min() == 0.0 and band.max() == 1.0


def test_normalize_with_train_mask_clips(rng):
    hsi = np.arange(16.0).reshape(4, 4, 1)
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    out = normalize(SceneCube(hsi, hsi.copy(), np.ones((4, 4), np.int32)), mask).hsi[:, :, 0]
    assert out[1, 1] == 0.0 and out[2, 2] == 1.0
    assert out.min() == 0.0 and out.max() == 1.0


# --- patches ---------------------------------------------------------------


def test_one_patch_per_labeled_pixel(rng):
    cube = small_cube(rng)
    assert len(extract_patches(cube, 3)) == np.count_nonzero(cube.labels)


def test_center_labels_match(rng):
    cube = small_cube(rng, 10, 12)
    ds = extract_patches(cube, 5)
    for i in range(len(ds)):
        assert cube.labels[ds.rows[i], ds.cols[i]] == ds.labels[i] + 1
        np.testing.assert_array_equal(ds.hsi[i][2, 2], cube.hsi[ds.rows[i], ds.cols[i]])
    assert ds.labels.min() >= 0


def test_interior_patch_is_raw_window(rng):
    cube = small_cube(rng, 9, 9, 4, 2)
    cube.labels[:] = 0
    cube.labels[4, 5] = 2
    ds = extract_patches(cube, 5)
    np.testing.assert_array_equal(ds.hsi[0], cube.hsi[2:7, 3:8])
    np.testing.assert_array_equal(ds.lidar[0], cube.lidar[2:7, 3:8])


def test_corner_patch_mirrors_by_hand():
    band = np.arange(25.0).reshape(5, 5)
    labels = np.zeros((5, 5), np.int32)
    labels[0, 0] = 1
    ds = extract_patches(SceneCube(band[:, :, None], band[:, :, None], labels), 5)
    # reflection without repeating the edge: index -1 -> 1, -2 -> 2
    expected = np.array([
        [12, 11, 10, 11, 12],
        [7, 6, 5, 6, 7],
        [2, 1, 0, 1, 2],
        [7, 6, 5, 6, 7],
        [12, 11, 10, 11, 12],
    ], dtype=float)
    np.testing.assert_array_equal(ds.hsi[0][:, :, 0], expected)


def test_mirror_padding_stays_in_band_range(rng):
    cube = small_cube(rng, 6, 6)
    cube.labels[:] = 1
    ds = extract_patches(cube, 9)
    patches = np.asarray(ds.hsi)
    for b in range(cube.hsi.shape[2]):
        assert patches[..., b].min() >= cube.hsi[..., b].min()
        assert patches[..., b].max() <= cube.hsi[..., b].max()


def test_patch_size_limits(rng):
    cube = small_cube(rng, 4, 6)
    with pytest.raises(ValueError, match="too large"):
        extract_patches(cube, 9)
    with pytest.raises(ValueError, match="odd"):
        extract_patches(cube, 4)
    assert len(extract_patches(cube, 7)) == np.count_nonzero(cube.labels)


def test_patch_view_slicing(rng):
    ds = extract_patches(small_cube(rng, 8, 8), 3)
    full = np.asarray(ds.hsi)
    assert full.shape == ds.hsi.shape
    np.testing.assert_array_equal(ds.hsi[2:5], full[2:5])
    np.testing.assert_array_equal(ds.hsi[np.array([4, 0])], full[[4, 0]])


# --- splits ----------------------------------------------------------------


def _label_only_cube(labels):
    h, w = labels.shape
    return SceneCube(np.zeros((h, w, 1)), np.zeros((h, w, 1)), labels)


def test_muufl_per_class_protocol():
    rng = np.random.default_rng(0)
    h, w, total, n_classes = 325, 220, 53687, 11
    labels = np.zeros(h * w, np.int32)
    where = rng.choice(h * w, total, replace=False)
    labels[where] = np.arange(total) % n_classes + 1
    ds = extract_patches(_label_only_cube(labels.reshape(h, w)), 1)
    split = split_per_class(ds, 100, rng)
    assert split.is_train.sum() == 1100
    assert (~split.is_train).sum() == 52587
    assert np.all(np.bincount(split.train.labels) == 100)
    assert split.train.coords().isdisjoint(split.test.coords())


def test_per_class_rejects_zero_and_short_classes(rng):
    labels = np.array([[1, 1, 2], [2, 2, 3]], np.int32)
    ds = extract_patches(_label_only_cube(labels), 1)
    with pytest.raises(ValueError, match="positive"):
        split_per_class(ds, 0, rng)
    with pytest.raises(ValueError, match="class 3 has 1"):
        split_per_class(ds, 2, rng)


def test_per_class_is_reproducible(rng):
    ds = extract_patches(small_cube(rng, 12, 12), 3)
    a = split_per_class(ds, 3, np.random.default_rng(4)).is_train
    b = split_per_class(ds, 3, np.random.default_rng(4)).is_train
    np.testing.assert_array_equal(a, b)


def test_fixed_split_houston_count(tmp_path):
    rng = np.random.default_rng(1)
    h, w = 349, 1905
    labels = np.zeros(h * w, np.int32)
    labels[rng.choice(h * w, 15029, replace=False)] = rng.integers(1, 16, 15029)
    ds = extract_patches(_label_only_cube(labels.reshape(h, w)), 1)
    picks = rng.choice(len(ds), 2832, replace=False)
    idx = tmp_path / "train.txt"
    idx.write_text("# row col\n" + "".join(f"{ds.rows[i]} {ds.cols[i]}\n" for i in picks))
    split = split_fixed(ds, idx)
    assert len(split.train) == 2832 and len(split.test) == 15029 - 2832
    assert split.train.coords().isdisjoint(split.test.coords())


def test_fixed_split_roundtrip_and_errors(tmp_path, rng):
    ds = split_per_class(extract_patches(small_cube(rng, 10, 10), 3), 2, rng)
    write_train_index(ds, tmp_path / "idx.txt")
    again = split_fixed(ds, tmp_path / "idx.txt")
    np.testing.assert_array_equal(again.is_train, ds.is_train)
    (tmp_path / "bad.txt").write_text("999 999\n")
    with pytest.raises(ValueError, match="not labeled"):
        split_fixed(ds, tmp_path / "bad.txt")


def test_unsplit_dataset_has_no_train_view(rng):
    ds = extract_patches(small_cube(rng), 3)
    assert isinstance(ds, PatchDataset)
    with pytest.raises(ValueError, match="split"):
        ds.train


# --- synthetic scenes ------------------------------------------------------


def test_noiseless_classes_are_constant():
    cube = synth_scene(4, 48, 48, 8, 2, 0.0, np.random.default_rng(3))
    rows, cols = np.nonzero(cube.labels)
    for c in range(1, 5):
        sel = cube.labels[rows, cols] == c
        assert np.ptp(cube.hsi[rows[sel], cols[sel]], axis=0).max() == 0
        assert np.ptp(cube.lidar[rows[sel], cols[sel]], axis=0).max() == 0


def test_ambiguous_pairs_by_construction():
    cube = synth_scene(5, 64, 64, 8, 2, 0.0, np.random.default_rng(8))
    a, b = cube.meta["hsi_ambiguous_pair"]
    hs, ls = cube.meta["hsi_signatures"], cube.meta["lidar_signatures"]
    np.testing.assert_array_equal(hs[a], hs[b])
    assert np.abs(ls[a] - ls[b]).max() > 0.1
    a, b = cube.meta["lidar_ambiguous_pair"]
    np.testing.assert_array_equal(ls[a], ls[b])
    assert np.abs(hs[a] - hs[b]).max() > 0.1


@pytest.mark.parametrize("n_classes", [3, 4, 6])
def test_nearest_mean_oracle_needs_both_modalities(n_classes):
    cube = synth_scene(n_classes, 64, 64, 6, 1, 0.0, np.random.default_rng(n_classes))
    assert nearest_mean_accuracy(cube, "both") == 1.0
    assert nearest_mean_accuracy(cube, "hsi") < 1.0
    assert nearest_mean_accuracy(cube, "lidar") < 1.0
    assert cube.meta["oracle_accuracy"]["both"] == 1.0


def test_synth_margin_unlabels_block_edges():
    cube = synth_scene(4, 32, 32, 4, 1, 0.0, np.random.default_rng(0), block=16, label_margin=2)
    assert np.all(cube.labels[14:18, :] == 0)
    assert np.all(cube.labels[:, 14:18] == 0)
    assert np.all(cube.labels[:14, :14] > 0)


def test_synth_noise_and_errors():
    cube = synth_scene(4, 32, 32, 4, 1, 0.05, np.random.default_rng(0))
    assert np.ptp(cube.hsi[cube.labels == 1], axis=0).max() > 0
    with pytest.raises(ValueError):
        synth_scene(2, 32, 32, 4, 1, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="blocks"):
        synth_scene(4, 16, 16, 4, 1, 0.0, np.random.default_rng(0))
