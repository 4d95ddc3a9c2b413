import warnings

import numpy as np
import pytest
from PIL import Image

from rdafnet.data import (
    BlurSpec, ImagePair, Transform, apply_transform, augment, blur_image, load_pair_dir, motion_kernel,
    pad_to_even, read_manifest, read_png, save_pair_dir, synth_blur, synth_dataset, u8_to_float, write_png,
)
from rdafnet.metrics import psnr, to_uint8


def _save_u8(path, arr):
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def _pair_tree(root, names, extra=()):
    rng = np.random.default_rng(5)
    for sub in ("blur", "sharp"):
        (root / sub).mkdir(parents=True)
    for name in names:
        for sub in ("blur", "sharp"):
            _save_u8(root / sub / name, rng.integers(0, 256, (6, 8, 3)))
    for name in extra:
        _save_u8(root / "blur" / name, rng.integers(0, 256, (6, 8, 3)))


# ---------------------------------------------------------------------------
# loading


def test_pair_dir_in_filename_order(tmp_path):
    _pair_tree(tmp_path, ["c.png", "a.png", "b.png"])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pairs = load_pair_dir(tmp_path)
    assert [p.id for p in pairs] == ["a", "b", "c"]
    assert pairs[0].sharp.shape == (1, 3, 6, 8) and pairs[0].sharp.dtype == np.float32


def test_pair_dir_extra_file_warns(tmp_path):
    _pair_tree(tmp_path, ["a.png", "b.png", "c.png"], extra=["d.png"])
    with pytest.warns(UserWarning, match="d.png"):
        pairs = load_pair_dir(tmp_path)
    assert len(pairs) == 3


def test_pair_dir_missing_subdir(tmp_path):
    (tmp_path / "blur").mkdir()
    with pytest.raises(FileNotFoundError):
        load_pair_dir(tmp_path)


def test_undecodable_file_names_path(tmp_path):
    _pair_tree(tmp_path, ["a.png"])
    (tmp_path / "blur" / "a.png").write_bytes(b"not a png")
    pairs = load_pair_dir(tmp_path)
    with pytest.raises(OSError, match="a.png"):
        pairs[0]


def test_affine_normalization():
    v = u8_to_float(np.array([255, 0, 128], dtype=np.uint8))
    assert v[0] == 1.0 and v[1] == -1.0
    assert v[2] == pytest.approx(128 / 127.5 - 1, abs=1e-7) and v[2] == pytest.approx(0.00392, abs=1e-5)


def test_png_round_trip(tmp_path, rng):
    x = rng.uniform(-1, 1, (1, 3, 9, 7)).astype(np.float32)
    write_png(tmp_path / "x.png", x)
    y = read_png(tmp_path / "x.png")
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) <= 0.5 / 127.5 + 1e-6


def test_save_pair_dir_round_trip(tmp_path):
    pairs = synth_dataset(3, 16, seed=1)
    save_pair_dir(tmp_path, pairs)
    assert read_manifest(tmp_path / "manifest.txt") == [p.id for p in pairs]
    loaded = list(load_pair_dir(tmp_path))
    assert [p.id for p in loaded] == [p.id for p in pairs]
    for a, b in zip(pairs, loaded):
        np.testing.assert_array_equal(to_uint8(a.sharp), to_uint8(b.sharp))


def test_image_pair_invariants():
    with pytest.raises(ValueError):
        ImagePair(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)), "x")
    with pytest.raises(ValueError, match="outside"):
        ImagePair(np.full((1, 3, 4, 4), 1.5), np.zeros((1, 3, 4, 4)), "x")


# ---------------------------------------------------------------------------
# blur


def test_blur_spec_validation():
    with pytest.raises(ValueError):
        BlurSpec(kernel_len=33)
    with pytest.raises(ValueError):
        BlurSpec(n_subframes=1)


@pytest.mark.parametrize("length,angle", [(5, 0.0), (9, 0.7), (13, 2.1), (4, 1.0)])
def test_kernel_normalized(length, angle):
    k = motion_kernel(length, angle, 2 * length + 1)
    assert k.sum() == pytest.approx(1.0) and np.all(k >= 0)
    assert k.shape[0] % 2 == 1


def test_unit_kernel_is_identity(rng):
    sharp = rng.uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32)
    pair = synth_blur(sharp, BlurSpec(kernel_len=1, n_subframes=2))
    np.testing.assert_array_equal(pair.blurred, sharp)


def test_constant_image_unchanged():
    sharp = np.full((1, 3, 16, 16), 0.3, dtype=np.float32)
    pair = synth_blur(sharp, BlurSpec(kernel_len=9, angle=0.4, n_subframes=19))
    np.testing.assert_allclose(pair.blurred, sharp, atol=1e-7)


def test_step_edge_becomes_linear_ramp():
    img = np.full((1, 1, 9, 16), -1.0)
    img[..., 8:] = 1.0
    out = blur_image(img, motion_kernel(5, 0.0, 5))
    # direct 5-tap box average along x
    expected = np.array([np.mean(img[0, 0, 0, max(x - 2, 0) : x + 3]) for x in range(4, 12)])
    np.testing.assert_allclose(out[0, 0, 4, 4:12], expected, atol=1e-12)
    np.testing.assert_allclose(out[0, 0, 4, 5:11], [-1, -0.6, -0.2, 0.2, 0.6, 1], atol=1e-12)
    # every row identical, no vertical smearing
    np.testing.assert_allclose(out[0, 0], np.repeat(out[0, 0, :1], 9, axis=0), atol=1e-12)


def test_blur_preserves_mean(rng):
    for i in range(5):
        sharp = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
        length = int(rng.integers(3, 16))
        pair = synth_blur(sharp, BlurSpec(length, float(rng.uniform(0, np.pi)), 2 * length + 1))
        assert abs(float(pair.blurred.astype(np.float64).mean()) - float(sharp.astype(np.float64).mean())) < 1e-6


def test_kernel_larger_than_image_rejected():
    with pytest.raises(ValueError, match="larger"):
        synth_blur(np.zeros((1, 3, 8, 8), np.float32), BlurSpec(kernel_len=15, n_subframes=15))


def test_synth_dataset_deterministic():
    a, b = synth_dataset(8, 64, 7), synth_dataset(8, 64, 7)
    for pa, pb in zip(a, b):
        assert pa.id == pb.id
        assert pa.blurred.tobytes() == pb.blurred.tobytes() and pa.sharp.tobytes() == pb.sharp.tobytes()
    assert synth_dataset(1, 64, 8)[0].sharp.tobytes() != a[0].sharp.tobytes()


def test_synth_dataset_invariants_and_difficulty():
    pairs = synth_dataset(32, 64, 7)
    vals = []
    for p in pairs:
        assert p.blurred.shape == p.sharp.shape == (1, 3, 64, 64)
        assert p.blurred.min() >= -1 and p.blurred.max() <= 1
        vals.append(psnr(to_uint8(p.blurred), to_uint8(p.sharp)))
    assert 18 <= np.mean(vals) <= 32


def test_synth_dataset_validation():
    with pytest.raises(ValueError):
        synth_dataset(0, 16, 1)
    with pytest.raises(ValueError):
        synth_dataset(2, 15, 1)


# ---------------------------------------------------------------------------
# augmentation


def _pair(rng, h=12, w=10):
    return ImagePair(rng.uniform(-1, 1, (1, 3, h, w)).astype(np.float32),
                     rng.uniform(-1, 1, (1, 3, h, w)).astype(np.float32), "p")


def test_no_op_transform_only_crops(rng):
    p = _pair(rng)
    t = Transform(top=2, left=1, crop=8)
    np.testing.assert_array_equal(apply_transform(p.sharp, t), p.sharp[..., 2:10, 1:9])


def test_hflip_involution(rng):
    p = _pair(rng)
    cropped = apply_transform(p.sharp, Transform(1, 1, 8))
    flipped = apply_transform(cropped, Transform(0, 0, 8, hflip=True))
    assert not np.array_equal(flipped, cropped)
    np.testing.assert_array_equal(apply_transform(flipped, Transform(0, 0, 8, hflip=True)), cropped)


def test_rot90_four_times_is_identity(rng):
    x = _pair(rng, 8, 8).sharp
    y = x
    for _ in range(4):
        y = apply_transform(y, Transform(0, 0, 8, rot90=1))
    np.testing.assert_array_equal(y, x)


def test_same_transform_for_both_images():
    rng = np.random.default_rng(0)
    for _ in range(30):
        blurred = np.full((1, 3, 12, 12), -0.5, np.float32)
        sharp = np.full((1, 3, 12, 12), 0.5, np.float32)
        i, j = rng.integers(0, 12, 2)
        blurred[..., i, j] = sharp[..., i, j] = 1.0
        out = augment(ImagePair(blurred, sharp, "m"), rng, crop=8)
        assert out.sharp.shape == (1, 3, 8, 8)
        assert np.array_equal(out.blurred == 1.0, out.sharp == 1.0)


def test_augment_keeps_range(rng):
    out = augment(_pair(rng), rng, crop=6)
    assert out.sharp.min() >= -1 and out.sharp.max() <= 1


def test_crop_larger_than_image(rng):
    with pytest.raises(ValueError, match="crop"):
        augment(_pair(rng), rng, crop=16)


def test_pad_to_even(rng):
    x = rng.uniform(-1, 1, (1, 3, 7, 9))
    y, size = pad_to_even(x)
    assert y.shape == (1, 3, 8, 10) and size == (7, 9)
    np.testing.assert_array_equal(y[..., :7, :9], x)
    z, _ = pad_to_even(y)
    assert z is y
