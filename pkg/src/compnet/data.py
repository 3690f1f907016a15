"""Synthetic masked-digit scenes: IDX ingestion, single/multi-object
composition over cluttered backgrounds, context test sets, and dataset
persistence (PNG images + JSON manifest).

Every sample's randomness derives from (seed, split, index, retry) via
numpy SeedSequence spawn keys, so generation is a pure function of its
arguments, samples can be generated in parallel by index without
changing the output, and train/test streams never overlap.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .kernels import as_f64

_SPLIT_IDS = {"train": 0, "test": 1}
_MAX_SAMPLE_RETRIES = 32
_MAX_PLACEMENT_ATTEMPTS = 100


class IdxFormatError(ValueError):
    """Raised for malformed IDX files (bad magic, truncation, count mismatch)."""


@dataclass
class Sample:
    """One scene: image, per-object visible-pixel masks, per-object labels."""

    image: np.ndarray             # (H, W, 1) float64 in [0, 1]
    masks: list                   # K binary (H, W) float64 arrays
    labels: list                  # K class ids
    split: str = "train"
    provenance: tuple = ()        # (seed, split_id, index, retries)

    def __post_init__(self):
        self.image = as_f64(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 1:
            raise ValueError(f"sample image must be (H, W, 1), got {self.image.shape}")
        if len(self.masks) < 1 or len(self.masks) != len(self.labels):
            raise ValueError("sample needs K >= 1 masks with matching labels")
        spatial = self.image.shape[:2]
        checked = []
        for m in self.masks:
            m = as_f64(m)
            if m.shape != spatial:
                raise ValueError(f"mask shape {m.shape} does not match image {spatial}")
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError("mask values must be exactly 0 or 1")
            if not m.any():
                raise ValueError("sample contains an empty object mask")
            checked.append(m)
        self.masks = checked
        self.labels = [int(l) for l in self.labels]

    @property
    def K(self) -> int:
        return len(self.masks)


@dataclass
class SynthConfig:
    """Knobs for scene composition; defaults target 120x120 frames."""

    frame: int = 120
    scale_range: tuple = (1.5, 3.0)
    ink_threshold: float = 0.25
    clutter_count: int = 12
    clutter_intensity: float = 0.6
    clutter_crop: tuple = (10, 24)     # crop extent range for background snippets
    noise_amplitude: float = 0.10
    noise_blur: int = 5


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a (H, W) image (corner-aligned grid)."""
    img = as_f64(img)
    big_h, big_w = img.shape
    if (out_h, out_w) == (big_h, big_w):
        return img.copy()
    ys = np.arange(out_h) * ((big_h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((big_w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.clip(ys.astype(np.int64), 0, big_h - 1)
    x0 = np.clip(xs.astype(np.int64), 0, big_w - 1)
    y1 = np.minimum(y0 + 1, big_h - 1)
    x1 = np.minimum(x0 + 1, big_w - 1)
    fy = (ys - y0)[:, np.newaxis]
    fx = (xs - x0)[np.newaxis, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# -- IDX ingestion -----------------------------------------------------------


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into ((n, r, c) floats in
    [0, 1], (n,) int labels)."""
    img = _read_maybe_gzip(images_path)
    if len(img) < 16:
        raise IdxFormatError(f"{images_path}: truncated header at byte {len(img)}")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != 2051:
        raise IdxFormatError(f"{images_path}: bad magic {magic}, expected 2051")
    need = 16 + n * rows * cols
    if len(img) < need:
        raise IdxFormatError(f"{images_path}: truncated at byte {len(img)}, "
                             f"expected {need}")
    images = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols,
                           offset=16).reshape(n, rows, cols).astype(np.float64) / 255.0

    lab = _read_maybe_gzip(labels_path)
    if len(lab) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header at byte {len(lab)}")
    magic, n_lab = struct.unpack(">II", lab[:8])
    if magic != 2049:
        raise IdxFormatError(f"{labels_path}: bad magic {magic}, expected 2049")
    if len(lab) < 8 + n_lab:
        raise IdxFormatError(f"{labels_path}: truncated at byte {len(lab)}, "
                             f"expected {8 + n_lab}")
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if n != n_lab:
        raise IdxFormatError(f"image count {n} != label count {n_lab}")
    return images, labels


# -- scene composition --------------------------------------------------------


def _sample_rng(seed, split: str, index: int, retry: int) -> np.random.Generator:
    if split not in _SPLIT_IDS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_IDS)}, got {split!r}")
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=(_SPLIT_IDS[split], int(index), int(retry)))
    return np.random.default_rng(ss)


def _background(rng, cfg: SynthConfig, pool) -> np.ndarray:
    """Cluttered canvas: dimmed crops of pool digits plus smoothed noise,
    composited by per-pixel max."""
    canvas = np.zeros((cfg.frame, cfg.frame))
    lo, hi = cfg.clutter_crop
    for _ in range(cfg.clutter_count):
        d = pool[rng.integers(len(pool))]
        ch = min(int(rng.integers(lo, hi + 1)), d.shape[0], cfg.frame)
        cw = min(int(rng.integers(lo, hi + 1)), d.shape[1], cfg.frame)
        cy = int(rng.integers(0, d.shape[0] - ch + 1))
        cx = int(rng.integers(0, d.shape[1] - cw + 1))
        crop = d[cy:cy + ch, cx:cx + cw] * cfg.clutter_intensity
        top = int(rng.integers(0, cfg.frame - ch + 1))
        left = int(rng.integers(0, cfg.frame - cw + 1))
        win = canvas[top:top + ch, left:left + cw]
        np.maximum(win, crop, out=win)
    # noise is drawn unconditionally so the rng stream, and therefore digit
    # placement, does not depend on the amplitude knob
    noise = rng.uniform(0.0, cfg.noise_amplitude, (cfg.frame, cfg.frame))
    if cfg.noise_amplitude > 0:
        k = cfg.noise_blur
        box = np.full((k, k, 1, 1), 1.0 / (k * k))
        smooth = kernels.conv2d(noise[:, :, np.newaxis], box, np.zeros(1))[:, :, 0]
        np.maximum(canvas, smooth, out=canvas)
    return canvas


def _resize_digit(digit, scale: float, cfg: SynthConfig):
    dh = max(1, int(round(digit.shape[0] * scale)))
    dw = max(1, int(round(digit.shape[1] * scale)))
    dh, dw = min(dh, cfg.frame), min(dw, cfg.frame)
    patch = bilinear_resize(digit, dh, dw)
    return patch, patch > cfg.ink_threshold


def _paste(canvas, patch, mask_patch, top, left):
    """Opaque under the ink mask, max-composited on sub-threshold fringes."""
    dh, dw = patch.shape
    win = canvas[top:top + dh, left:left + dw]
    win[:] = np.where(mask_patch, patch, np.maximum(win, patch))


def synth_single(digits, labels, n: int, seed: int, config: SynthConfig = None,
                 split: str = "train") -> list:
    """Single-object scenes: one scaled digit over a cluttered background.

    The object mask records exactly the pixels where the placed digit's
    ink exceeds the threshold, so image * mask reproduces the digit's
    ink inside the mask.
    """
    cfg = config or SynthConfig()
    digits = as_f64(digits)
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        for retry in range(_MAX_SAMPLE_RETRIES):
            rng = _sample_rng(seed, split, i, retry)
            canvas = _background(rng, cfg, digits)
            idx = int(rng.integers(len(digits)))
            scale = rng.uniform(*cfg.scale_range)
            patch, mask_patch = _resize_digit(digits[idx], scale, cfg)
            if not mask_patch.any():
                continue
            dh, dw = patch.shape
            top = int(rng.integers(0, cfg.frame - dh + 1))
            left = int(rng.integers(0, cfg.frame - dw + 1))
            _paste(canvas, patch, mask_patch, top, left)
            full_mask = np.zeros((cfg.frame, cfg.frame))
            full_mask[top:top + dh, left:left + dw] = mask_patch
            out.append(Sample(image=canvas[:, :, np.newaxis],
                              masks=[full_mask],
                              labels=[int(labels[idx])],
                              split=split,
                              provenance=(int(seed), _SPLIT_IDS[split], i, retry)))
            break
        else:
            raise RuntimeError(f"sample {i}: no usable digit after "
                               f"{_MAX_SAMPLE_RETRIES} retries")
    return out


def synth_multi(digits, labels, n: int, k_range=(2, 3), overlap_max: float = 0.25,
                seed: int = 0, config: SynthConfig = None, split: str = "train") -> list:
    """Multi-object scenes with bounded pairwise overlap.

    Placements are rejected while the intersection of a new digit's ink
    mask with any already placed mask exceeds overlap_max of the smaller
    mask. Later digits occlude earlier ones; stored masks keep visible
    pixels only. A sample whose placements cannot be completed within
    100 attempts is regenerated under a derived seed, recorded in its
    provenance.
    """
    cfg = config or SynthConfig()
    digits = as_f64(digits)
    if not (2 <= k_range[0] <= k_range[1] <= 4):
        raise ValueError(f"k_range must lie within [2, 4], got {k_range}")
    if not (0.0 <= overlap_max <= 0.5):
        raise ValueError(f"overlap_max must be in [0, 0.5], got {overlap_max}")
    out = []
    for i in range(n):
        for retry in range(_MAX_SAMPLE_RETRIES):
            rng = _sample_rng(seed, split, i, retry)
            canvas = _background(rng, cfg, digits)
            K = int(rng.integers(k_range[0], k_range[1] + 1))
            placed = []      # (patch, mask_patch, top, left, full_mask, label)
            ok = True
            for _ in range(K):
                for _attempt in range(_MAX_PLACEMENT_ATTEMPTS):
                    idx = int(rng.integers(len(digits)))
                    scale = rng.uniform(*cfg.scale_range)
                    patch, mask_patch = _resize_digit(digits[idx], scale, cfg)
                    if not mask_patch.any():
                        continue
                    dh, dw = patch.shape
                    top = int(rng.integers(0, cfg.frame - dh + 1))
                    left = int(rng.integers(0, cfg.frame - dw + 1))
                    full = np.zeros((cfg.frame, cfg.frame), dtype=bool)
                    full[top:top + dh, left:left + dw] = mask_patch
                    if all(_overlap_ok(full, p[4], overlap_max) for p in placed):
                        placed.append((patch, mask_patch, top, left, full,
                                       int(labels[idx])))
                        break
                else:
                    ok = False
                    break
            if not ok:
                continue
            for patch, mask_patch, top, left, _, _ in placed:
                _paste(canvas, patch, mask_patch, top, left)
            visible = []
            for j, (_, _, _, _, full, _) in enumerate(placed):
                vis = full.copy()
                for later in placed[j + 1:]:
                    vis &= ~later[4]
                visible.append(vis)
            if not all(v.any() for v in visible):
                continue
            out.append(Sample(image=canvas[:, :, np.newaxis],
                              masks=[v.astype(np.float64) for v in visible],
                              labels=[p[5] for p in placed],
                              split=split,
                              provenance=(int(seed), _SPLIT_IDS[split], i, retry)))
            break
        else:
            raise RuntimeError(f"sample {i}: placement failed after "
                               f"{_MAX_SAMPLE_RETRIES} derived seeds")
    return out


def _overlap_ok(mask_a, mask_b, overlap_max: float) -> bool:
    inter = np.logical_and(mask_a, mask_b).sum()
    if inter == 0:
        return True
    smaller = min(mask_a.sum(), mask_b.sum())
    return inter / smaller <= overlap_max


# -- context test sets --------------------------------------------------------


@dataclass
class ContextSets:
    """Positives for one class shown in their original scenes and pasted
    into scenes free of that class, plus the shared negatives."""

    cls: int
    in_context: list
    out_of_context: list
    negatives: list


def make_context_sets(test_samples, cls: int, seed: int = 0) -> ContextSets:
    """For each instance of ``cls``: the original sample (in-context) and
    the instance's masked pixels pasted at the same location onto a donor
    image containing no instance of ``cls`` (out-of-context). Negatives
    are all images without the class, shared by both sets."""
    donors = [s for s in test_samples if cls not in s.labels]
    if not donors:
        raise ValueError(f"no donor image without class {cls} available")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                       spawn_key=(97, int(cls))))
    in_ctx, out_ctx = [], []
    for s in test_samples:
        for i, label in enumerate(s.labels):
            if label != cls:
                continue
            in_ctx.append(Sample(image=s.image.copy(), masks=[s.masks[i]],
                                 labels=[cls], split=s.split))
            donor = donors[int(rng.integers(len(donors)))]
            img = donor.image.copy()
            region = s.masks[i].astype(bool)
            img[region] = s.image[region]
            out_ctx.append(Sample(image=img, masks=[s.masks[i]],
                                  labels=[cls], split=s.split))
    return ContextSets(cls=cls, in_context=in_ctx, out_of_context=out_ctx,
                       negatives=donors)


# -- persistence ---------------------------------------------------------------


def save_dataset(samples, out_dir, name: str, variant: str, classes: int,
                 seed: int) -> dict:
    """Write img_%06d.png (8-bit grayscale), msk_%06d_%d.png (1-bit), and a
    canonical manifest.json; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name = f"img_{i:06d}.png"
        arr = np.round(s.image[:, :, 0] * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out / img_name)
        mask_names = []
        for k, m in enumerate(s.masks):
            msk_name = f"msk_{i:06d}_{k}.png"
            Image.fromarray(m.astype(bool)).save(out / msk_name)
            mask_names.append(msk_name)
        entries.append({
            "image": img_name,
            "masks": mask_names,
            "labels": list(s.labels),
            "split": s.split,
            "provenance": list(s.provenance),
        })
    manifest = {
        "name": name,
        "variant": variant,
        "count": len(samples),
        "classes": int(classes),
        "seed": int(seed),
        "samples": entries,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_dataset(dataset_dir):
    """Read a dataset directory back into (samples, manifest)."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float64) / 255.0
        masks = []
        for mn in entry["masks"]:
            m = np.asarray(Image.open(root / mn))
            masks.append((m > 0).astype(np.float64))
        samples.append(Sample(image=img[:, :, np.newaxis], masks=masks,
                              labels=entry["labels"], split=entry["split"],
                              provenance=tuple(entry["provenance"])))
    if len(samples) != manifest["count"]:
        raise ValueError(f"manifest count {manifest['count']} != {len(samples)} samples")
    return samples, manifest
