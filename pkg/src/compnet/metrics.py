"""Evaluation: top-k multi-object accuracy, average precision, guided
backpropagation heatmaps, localization mass, activation-shift maps, and
mask-area stratification.

All metrics are deterministic: score ties in top-k resolve by ascending
class index, and ranking ties in AP keep input order (stable sort).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import network
from .kernels import as_f64
from .masks import project_mask_spatial, validate_object_mask
from .tape import Tape, backward


def topk_accuracy(scores, true_set) -> float:
    """Fraction of an image's true classes among its k top-scoring
    predictions, with k = |true_set|."""
    scores = as_f64(scores)
    true_set = set(int(t) for t in true_set)
    if not true_set:
        raise ValueError("true_set must be nonempty")
    k = len(true_set)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    top = set(int(i) for i in order[:k])
    return len(top & true_set) / k


def average_precision(scores, labels) -> float:
    """All-points AP: mean over positive ranks of precision at that rank.

    Sorting is descending by score; ties keep input order.
    """
    scores = as_f64(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores/labels shape mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("average_precision requires at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_pos = labels[order] == 1
    cum = np.cumsum(sorted_pos)
    ranks = np.arange(1, len(labels) + 1)
    return float((cum[sorted_pos] / ranks[sorted_pos]).mean())


def guided_backprop(net, params, image, cls: int) -> np.ndarray:
    """Class-logit backtrace with guided relu gating.

    Every relu zeroes gradient components that are negative or whose
    forward input was non-positive. The returned (H, W) heatmap is the
    per-pixel sum over channels of the absolute input gradient.
    """
    image = as_f64(image)
    if not (0 <= cls < net.output_classes()):
        raise ValueError(f"class {cls} out of range")
    tape = Tape(guided_relu=True)
    acts = network.forward(net, params, image, tape=tape, train=False)
    target = tape.select(acts.output, cls)
    grads = backward(tape, target)
    g = grads[acts.input_node]
    if g is None:
        g = np.zeros_like(image)
    return np.abs(g).sum(axis=2)


def localization_accuracy(heatmap, mask):
    """Fraction of heatmap mass inside the mask; None when the heatmap
    carries no mass (reported as skipped by callers)."""
    heatmap = as_f64(heatmap)
    mask = validate_object_mask(mask)
    if heatmap.shape != mask.shape:
        raise ValueError(f"heatmap shape {heatmap.shape} != mask shape {mask.shape}")
    if (heatmap < 0).any():
        raise ValueError("heatmap must be nonnegative")
    total = float(heatmap.sum())
    if total == 0.0:
        return None
    return float((heatmap * mask).sum() / total)


def activation_shift(net, params, sample, k: int, layer: int) -> np.ndarray:
    """|phi(scene) - phi(object k in isolation)| at a layer, summed over
    channels and restricted to object k's projected mask region; regions
    of the other objects are masked out."""
    from .network import layer_shapes

    shapes = layer_shapes(net)
    if layer not in range(len(shapes)) or len(shapes[layer]) != 3:
        raise ValueError(f"layer {layer} is not a recorded spatial layer")
    if not (0 <= k < sample.K):
        raise ValueError(f"object {k} out of range")
    h, w, _ = shapes[layer]

    iso = sample.image * sample.masks[k][:, :, np.newaxis]
    t1, t2 = Tape(), Tape()
    a_scene = network.forward(net, params, sample.image, tape=t1, train=False)
    a_iso = network.forward(net, params, iso, tape=t2, train=False)
    diff = np.abs(t1.value(a_scene.nodes[layer]) - t2.value(a_iso.nodes[layer]))
    shift = diff.sum(axis=2)

    region = project_mask_spatial(sample.masks[k], (h, w), "binary")
    for j in range(sample.K):
        if j != k:
            region = region * (1.0 - project_mask_spatial(sample.masks[j], (h, w), "binary"))
    return shift * region


def stratify_by_area(samples, bins) -> dict:
    """Group object instances by mask pixel count into left-closed,
    right-open area bins. Returns {bin index: [(sample idx, object idx)]}."""
    bins = [(float(lo), float(hi)) for lo, hi in bins]
    for lo, hi in bins:
        if not lo < hi:
            raise ValueError(f"bad bin ({lo}, {hi})")
    for (_, hi_a), (lo_b, _) in zip(bins, bins[1:]):
        if lo_b < hi_a:
            raise ValueError("bins must be disjoint and ascending")
    groups = {i: [] for i in range(len(bins))}
    for si, s in enumerate(samples):
        for ki, m in enumerate(s.masks):
            area = float(m.sum())
            for bi, (lo, hi) in enumerate(bins):
                if lo <= area < hi:
                    groups[bi].append((si, ki))
                    break
    return groups


def area_bins(samples, n_bins: int = 3) -> list:
    """Equal-count area bins from the observed mask-area distribution.

    Duplicate quantile edges collapse, so fewer bins may come back when
    the distribution is too concentrated to split.
    """
    areas = sorted(float(m.sum()) for s in samples for m in s.masks)
    if not areas:
        raise ValueError("no object instances")
    edges = [areas[int(len(areas) * i / n_bins)] for i in range(1, n_bins)]
    bounds = [0.0]
    for e in edges:
        if e > bounds[-1]:
            bounds.append(e)
    bounds.append(float("inf"))
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


@dataclass
class EvalReport:
    """One evaluation pass: headline metrics plus optional breakdowns."""

    kind: str                               # "topk" or "ap"
    metrics: dict = field(default_factory=dict)
    per_class: dict = None
    stratified: dict = None
    localization: float = None
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "metrics": self.metrics,
            "per_class": self.per_class,
            "stratified": self.stratified,
            "localization": self.localization,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(kind=d["kind"], metrics=d["metrics"], per_class=d.get("per_class"),
                   stratified=d.get("stratified"), localization=d.get("localization"),
                   n_samples=d.get("n_samples", 0))


def save_heatmap_png(heatmap, path) -> None:
    """8-bit PNG of a heatmap, normalized by its own maximum."""
    heatmap = as_f64(heatmap)
    peak = heatmap.max()
    scaled = heatmap / peak if peak > 0 else heatmap
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)
