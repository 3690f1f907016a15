import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from compnet.data import (IdxFormatError, Sample, SynthConfig, bilinear_resize,
                          load_dataset, load_idx, make_context_sets, save_dataset,
                          synth_multi, synth_single)

MNIST_TEST_IMAGES = Path("/root/data/t10k-images-idx3-ubyte")
MNIST_TEST_LABELS = Path("/root/data/t10k-labels-idx1-ubyte")


def digit_pool(n=40, side=28, seed=0):
    """Small synthetic digit-like blobs: bright strokes on black."""
    rng = np.random.default_rng(seed)
    digits = np.zeros((n, side, side))
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        r, c = rng.integers(4, side - 10, size=2)
        digits[i, r:r + 8, c:c + 4] = rng.uniform(0.6, 1.0, (8, 4))
        digits[i, r + 3:r + 5, c:c + 8] = rng.uniform(0.6, 1.0, (2, 8))
    return digits, labels


def small_cfg(frame=40):
    return SynthConfig(frame=frame, scale_range=(0.8, 1.3), clutter_count=6,
                       clutter_crop=(6, 14))


def write_idx(tmp_path, images, labels, gz=False, truncate_images=0, prefix=""):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    img_bytes = struct.pack(">IIII", 2051, n, r, c) + images.tobytes()
    lab_bytes = struct.pack(">II", 2049, len(labels)) + labels.tobytes()
    if truncate_images:
        img_bytes = img_bytes[:-truncate_images]
    img_path = tmp_path / (f"{prefix}img.idx.gz" if gz else f"{prefix}img.idx")
    lab_path = tmp_path / (f"{prefix}lab.idx.gz" if gz else f"{prefix}lab.idx")
    img_path.write_bytes(gzip.compress(img_bytes) if gz else img_bytes)
    lab_path.write_bytes(gzip.compress(lab_bytes) if gz else lab_bytes)
    return img_path, lab_path


class TestLoadIdx:
    def test_fabricated_blank_digit(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((1, 28, 28)), [7])
        images, labels = load_idx(ip, lp)
        assert images.shape == (1, 28, 28)
        assert not images.any()
        assert labels.tolist() == [7]

    def test_pixel_scaling(self, tmp_path):
        img = np.full((1, 28, 28), 255)
        ip, lp = write_idx(tmp_path, img, [0])
        images, _ = load_idx(ip, lp)
        assert images.max() == 1.0

    def test_gzip_transparent(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((2, 28, 28)), [1, 2], gz=True)
        images, labels = load_idx(ip, lp)
        assert images.shape == (2, 28, 28) and labels.tolist() == [1, 2]

    def test_truncated_file_names_byte_offset(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((2, 28, 28)), [1, 2],
                           truncate_images=100)
        with pytest.raises(IdxFormatError, match=r"truncated at byte \d+"):
            load_idx(ip, lp)

    def test_wrong_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(struct.pack(">IIII", 2050, 0, 28, 28))
        _, lp = write_idx(tmp_path, np.zeros((0, 28, 28)), [])
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(bad, lp)

    def test_count_mismatch_rejected(self, tmp_path):
        ip, _ = write_idx(tmp_path, np.zeros((2, 28, 28)), [1, 2], prefix="two_")
        _, lp = write_idx(tmp_path, np.zeros((3, 28, 28)), [1, 2, 3], prefix="three_")
        with pytest.raises(IdxFormatError, match="count"):
            load_idx(ip, lp)

    @pytest.mark.skipif(not MNIST_TEST_IMAGES.exists(),
                        reason="standard MNIST test files not present")
    def test_standard_test_file(self):
        images, labels = load_idx(MNIST_TEST_IMAGES, MNIST_TEST_LABELS)
        assert images.shape == (10000, 28, 28)
        assert labels[0] == 7


class TestBilinearResize:
    def test_identity(self):
        img = np.random.default_rng(0).random((9, 9))
        assert np.array_equal(bilinear_resize(img, 9, 9), img)

    def test_constant_preserved(self):
        out = bilinear_resize(np.full((8, 8), 0.4), 19, 13)
        assert np.allclose(out, 0.4)

    def test_corners_align(self):
        img = np.random.default_rng(1).random((6, 6))
        out = bilinear_resize(img, 11, 11)
        assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]

    def test_values_within_input_range(self):
        img = np.random.default_rng(2).random((7, 7))
        out = bilinear_resize(img, 20, 20)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestSynthSingle:
    def test_deterministic_in_seed(self):
        digits, labels = digit_pool()
        a = synth_single(digits, labels, 3, seed=5, config=small_cfg())
        b = synth_single(digits, labels, 3, seed=5, config=small_cfg())
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.masks[0].tobytes() == y.masks[0].tobytes()
            assert x.labels == y.labels

    def test_different_seeds_differ(self):
        digits, labels = digit_pool()
        a = synth_single(digits, labels, 1, seed=5, config=small_cfg())
        b = synth_single(digits, labels, 1, seed=6, config=small_cfg())
        assert a[0].image.tobytes() != b[0].image.tobytes()

    def test_splits_use_disjoint_streams(self):
        digits, labels = digit_pool()
        a = synth_single(digits, labels, 1, seed=5, config=small_cfg(), split="train")
        b = synth_single(digits, labels, 1, seed=5, config=small_cfg(), split="test")
        assert a[0].image.tobytes() != b[0].image.tobytes()

    def test_mask_area_strictly_inside_frame(self):
        digits, labels = digit_pool()
        for s in synth_single(digits, labels, 8, seed=1, config=small_cfg()):
            area = s.masks[0].sum()
            assert 0 < area < s.image.shape[0] * s.image.shape[1]

    def test_ink_under_mask_is_background_independent(self):
        # same seed with clutter and noise silenced: the compositing contract
        # says pixels under the mask hold the digit's ink either way
        digits, labels = digit_pool()
        cfg = small_cfg()
        clean = SynthConfig(frame=cfg.frame, scale_range=cfg.scale_range,
                            clutter_count=cfg.clutter_count,
                            clutter_crop=cfg.clutter_crop,
                            clutter_intensity=0.0, noise_amplitude=0.0)
        with_bg = synth_single(digits, labels, 5, seed=2, config=cfg)
        without_bg = synth_single(digits, labels, 5, seed=2, config=clean)
        for a, b in zip(with_bg, without_bg):
            m = a.masks[0].astype(bool)
            assert np.array_equal(m, b.masks[0].astype(bool))
            assert np.array_equal(a.image[m], b.image[m])
            # ink strictly above threshold inside the mask
            assert (a.image[:, :, 0][m] > cfg.ink_threshold).all()

    def test_single_object_k1(self):
        digits, labels = digit_pool()
        for s in synth_single(digits, labels, 3, seed=3, config=small_cfg()):
            assert s.K == 1


class TestSynthMulti:
    def test_k_range_respected(self):
        digits, labels = digit_pool()
        samples = synth_multi(digits, labels, 6, k_range=(2, 2), overlap_max=0.2,
                              seed=4, config=small_cfg(48))
        assert all(s.K == 2 for s in samples)

    def test_zero_overlap_means_disjoint_masks(self):
        digits, labels = digit_pool()
        samples = synth_multi(digits, labels, 5, k_range=(2, 2), overlap_max=0.0,
                              seed=5, config=small_cfg(48))
        for s in samples:
            inter = np.logical_and(s.masks[0] > 0, s.masks[1] > 0)
            assert not inter.any()

    def test_visible_ink_equals_mask_union(self):
        # with background silenced, above-threshold pixels are exactly the
        # union of the visible masks (later digits occlude earlier ones)
        digits, labels = digit_pool()
        cfg = small_cfg(48)
        clean = SynthConfig(frame=cfg.frame, scale_range=cfg.scale_range,
                            clutter_count=cfg.clutter_count,
                            clutter_crop=cfg.clutter_crop,
                            clutter_intensity=0.0, noise_amplitude=0.0)
        for s in synth_multi(digits, labels, 5, k_range=(2, 3), overlap_max=0.3,
                             seed=6, config=clean):
            union = np.zeros(s.image.shape[:2], dtype=bool)
            for m in s.masks:
                union |= m.astype(bool)
            assert np.array_equal(s.image[:, :, 0] > clean.ink_threshold, union)

    def test_duplicate_classes_allowed(self):
        digits, _ = digit_pool()
        labels = np.full(len(digits), 3)
        samples = synth_multi(digits, labels, 3, k_range=(2, 2), overlap_max=0.2,
                              seed=7, config=small_cfg(48))
        assert all(s.labels == [3, 3] for s in samples)

    def test_invalid_k_range_rejected(self):
        digits, labels = digit_pool()
        with pytest.raises(ValueError, match="k_range"):
            synth_multi(digits, labels, 1, k_range=(1, 2), overlap_max=0.2, seed=0)

    def test_invalid_overlap_rejected(self):
        digits, labels = digit_pool()
        with pytest.raises(ValueError, match="overlap_max"):
            synth_multi(digits, labels, 1, k_range=(2, 2), overlap_max=0.9, seed=0)

    def test_deterministic_in_seed(self):
        digits, labels = digit_pool()
        a = synth_multi(digits, labels, 2, seed=8, config=small_cfg(48))
        b = synth_multi(digits, labels, 2, seed=8, config=small_cfg(48))
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()


class TestSampleInvariants:
    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            Sample(image=np.zeros((4, 4, 1)), masks=[np.zeros((4, 4))], labels=[0])

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mask shape"):
            Sample(image=np.zeros((4, 4, 1)), masks=[np.ones((3, 3))], labels=[0])

    def test_nonbinary_mask_rejected(self):
        m = np.full((4, 4), 0.5)
        with pytest.raises(ValueError, match="0 or 1"):
            Sample(image=np.zeros((4, 4, 1)), masks=[m], labels=[0])

    def test_label_count_must_match(self):
        with pytest.raises(ValueError, match="matching labels"):
            Sample(image=np.zeros((4, 4, 1)), masks=[np.ones((4, 4))], labels=[0, 1])


class TestContextSets:
    def _samples(self):
        digits, labels = digit_pool(60, seed=3)
        return synth_multi(digits, labels, 12, k_range=(2, 2), overlap_max=0.2,
                           seed=9, config=small_cfg(48))

    def test_out_of_context_paste_preserves_ink(self):
        samples = self._samples()
        cls = samples[0].labels[0]
        sets = make_context_sets(samples, cls, seed=0)
        assert len(sets.in_context) == len(sets.out_of_context)
        for pos_in, pos_out in zip(sets.in_context, sets.out_of_context):
            region = pos_in.masks[0].astype(bool)
            assert np.array_equal(pos_out.image[region], pos_in.image[region])

    def test_negatives_exclude_class(self):
        samples = self._samples()
        cls = samples[0].labels[0]
        sets = make_context_sets(samples, cls, seed=0)
        assert all(cls not in s.labels for s in sets.negatives)

    def test_no_donor_raises(self):
        digits, _ = digit_pool(30)
        labels = np.full(len(digits), 4)
        samples = synth_multi(digits, labels, 3, k_range=(2, 2), overlap_max=0.2,
                              seed=10, config=small_cfg(48))
        with pytest.raises(ValueError, match="donor"):
            make_context_sets(samples, 4)


class TestPersistence:
    def test_round_trip_masks_exact_images_quantized(self, tmp_path):
        digits, labels = digit_pool()
        samples = synth_single(digits, labels, 3, seed=11, config=small_cfg())
        save_dataset(samples, tmp_path / "ds", "toy", "single", 10, 11)
        loaded, manifest = load_dataset(tmp_path / "ds")
        assert manifest["count"] == 3
        for orig, back in zip(samples, loaded):
            assert np.array_equal(orig.masks[0], back.masks[0])
            assert np.abs(orig.image - back.image).max() <= 0.5 / 255 + 1e-12
            assert orig.labels == back.labels

    def test_manifests_byte_identical_across_runs(self, tmp_path):
        digits, labels = digit_pool()
        for sub in ("a", "b"):
            samples = synth_single(digits, labels, 4, seed=12, config=small_cfg())
            save_dataset(samples, tmp_path / sub, "toy", "single", 10, 12)
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
        img_a = (tmp_path / "a" / "img_000000.png").read_bytes()
        img_b = (tmp_path / "b" / "img_000000.png").read_bytes()
        assert img_a == img_b

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_pixel_encoding_rounds(self, tmp_path):
        img = np.full((4, 4, 1), 0.5)
        s = Sample(image=img, masks=[np.ones((4, 4))], labels=[0])
        save_dataset([s], tmp_path / "ds", "t", "single", 1, 0)
        loaded, _ = load_dataset(tmp_path / "ds")
        assert np.allclose(loaded[0].image, round(0.5 * 255) / 255)
