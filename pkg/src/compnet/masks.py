"""Mask projection, per-variant loss masks, and the compositionality residual.

The projection operator maps an input-resolution binary object mask to a
feature layer's spatial size by block averaging, optionally binarizes at
0.5, and replicates the result across the layer's channels. Binary mode
is the default wherever masks multiply activations, because masked
branches must produce exact zeros outside the object region; fractional
mode is kept for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import as_f64

PROJECTION_MODES = ("fractional", "binary")


def validate_object_mask(mask) -> np.ndarray:
    """Check a (H, W) binary mask with at least one set pixel."""
    mask = as_f64(mask)
    if mask.ndim != 2:
        raise ValueError(f"object mask must be rank 2, got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("object mask values must be exactly 0 or 1")
    if not mask.any():
        raise ValueError("object mask is empty")
    return mask


def project_mask_spatial(mask, target, mode="binary") -> np.ndarray:
    """Down-sample a (H, W) mask to (h, w) without channel replication."""
    if mode not in PROJECTION_MODES:
        raise ValueError(f"unknown projection mode {mode!r}")
    out = kernels.avg_downsample(mask, target)
    if mode == "binary":
        out = (out >= 0.5).astype(np.float64)
    return out


def project_mask(mask, target, mode="binary") -> np.ndarray:
    """Project an input-resolution object mask onto a feature layer.

    target is the layer's (h, w, c) shape; the input's spatial extents
    must be divisible by (h, w). The down-sampled (and, in binary mode,
    thresholded at 0.5) mask is stacked c times along the channel axis.
    """
    mask = validate_object_mask(mask)
    if len(target) != 3:
        raise ValueError(f"target must be (h, w, c), got {target}")
    h, w, c = target
    spatial = project_mask_spatial(mask, (h, w), mode)
    return np.repeat(spatial[:, :, np.newaxis], c, axis=2)


def others_union(sample_masks, k: int) -> np.ndarray:
    """Union of every object mask except the k-th, as a (H, W) binary map."""
    out = np.zeros_like(as_f64(sample_masks[k]))
    for j, m in enumerate(sample_masks):
        if j != k:
            out = np.maximum(out, as_f64(m))
    return out


@dataclass
class LossMask:
    """Per-layer penalty masks for one object, tagged with the variant
    that produced them."""

    layers: dict          # layer index -> (h, w, c) array
    variant: str
    object_id: int


def loss_mask_spatial(sample, k: int, variant: str) -> np.ndarray:
    """Input-resolution spatial loss mask for one object.

    comp-full: ones with the locations of all objects other than k
    zeroed out. comp-obj-only: object k's own mask.
    """
    if not (0 <= k < len(sample.masks)):
        raise ValueError(f"object id {k} out of range for {len(sample.masks)} objects")
    if variant == "comp-full":
        return 1.0 - others_union(sample.masks, k)
    if variant == "comp-obj-only":
        return as_f64(sample.masks[k])
    raise ValueError(f"unknown loss-mask variant {variant!r}")


def build_loss_mask(sample, k: int, net, variant: str) -> LossMask:
    """Masks applied to the unmasked branch's activations inside the
    compositional penalty, projected in binary mode to every layer
    carrying a nonzero penalty weight."""
    from .network import layer_shapes

    spatial = loss_mask_spatial(sample, k, variant)
    shapes = layer_shapes(net)
    layers = {}
    for idx in sorted(net.lambdas):
        if net.lambdas[idx] == 0.0:
            continue
        h, w, c = shapes[idx]
        proj = project_mask_spatial(spatial, (h, w), "binary")
        layers[idx] = np.repeat(proj[:, :, np.newaxis], c, axis=2)
    return LossMask(layers=layers, variant=variant, object_id=k)


def compositionality_residual(net, params, x, mask, layer: int, mode="binary") -> float:
    """How far a layer is from satisfying phi(m*x) == p(m)*phi(x).

    Both forward passes are plain, unmasked evaluations; the returned
    value is the l2 norm of the difference divided by the layer's
    element count, so residuals are comparable across layers.
    """
    from .network import forward, layer_shapes
    from .tape import Tape

    mask = validate_object_mask(mask)
    shapes = layer_shapes(net)
    if not (0 <= layer < len(shapes)) or len(shapes[layer]) != 3:
        raise ValueError(f"layer {layer} is not a spatial layer of this network")
    x = as_f64(x)
    masked_x = x * mask[:, :, np.newaxis]

    t1 = Tape()
    a1 = forward(net, params, masked_x, tape=t1, train=False)
    t2 = Tape()
    a2 = forward(net, params, x, tape=t2, train=False)
    phi_masked = t1.value(a1.nodes[layer])
    phi_full = t2.value(a2.nodes[layer])
    proj = project_mask(mask, shapes[layer], mode)
    diff = phi_masked - proj * phi_full
    return float(np.sqrt((diff * diff).sum()) / diff.size)
