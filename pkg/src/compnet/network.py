"""Network assembly: layer descriptors, initialization, and forward passes.

A network is an ordered tuple of layer descriptors:

    ("conv", c_out)   3x3 stride-1 same-padding convolution
    ("relu",)
    ("pool",)         2x2 max pooling, stride 2
    ("dropout", rate) active only when forward runs with train=True
    ("fc", m)         fully connected; spatial inputs are flattened row-major

Masked branches multiply selected layer outputs by a binarized,
projected object mask before passing them upward; the same machinery
drives both the per-sample convenience path (``mask=``) and the fused
batched path used by the training step (``layer_masks=``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernels import as_f64
from .tape import Parameter, Tape

HEADS = ("joint_softmax", "independent_sigmoid")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptors plus mask/penalty placement and loss head."""

    layers: tuple
    input_shape: tuple                      # (h, w, c)
    mask_layers: frozenset = frozenset()
    lambdas: dict = field(default_factory=dict)  # layer index -> penalty weight
    head: str = "joint_softmax"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))
        object.__setattr__(self, "mask_layers", frozenset(int(i) for i in self.mask_layers))
        object.__setattr__(self, "lambdas", {int(k): float(v) for k, v in self.lambdas.items()})
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (h, w, c), got {self.input_shape}")
        shapes = layer_shapes(self)
        spatial = {i for i, s in enumerate(shapes) if len(s) == 3}
        for idx in self.mask_layers:
            if idx not in spatial:
                raise ValueError(f"mask layer {idx} does not produce a spatial activation")
        for idx, lam in self.lambdas.items():
            if idx not in spatial:
                raise ValueError(f"lambda layer {idx} does not produce a spatial activation")
            if lam < 0:
                raise ValueError(f"lambda at layer {idx} must be >= 0, got {lam}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def output_classes(self) -> int:
        kind, *args = self.layers[-1]
        if kind != "fc":
            raise ValueError("network must end in an fc layer")
        return args[0]


def layer_shapes(net: NetworkSpec) -> list:
    """Per-layer output shapes for a single (unbatched) sample."""
    shapes = []
    cur = tuple(net.input_shape)
    for idx, layer in enumerate(net.layers):
        kind = layer[0]
        if kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"layer {idx}: conv requires spatial input, got {cur}")
            cur = (cur[0], cur[1], layer[1])
        elif kind == "relu":
            pass
        elif kind == "pool":
            if len(cur) != 3:
                raise ValueError(f"layer {idx}: pool requires spatial input, got {cur}")
            if cur[0] % 2 or cur[1] % 2:
                raise ValueError(f"layer {idx}: pool requires even extents, got {cur}")
            cur = (cur[0] // 2, cur[1] // 2, cur[2])
        elif kind == "dropout":
            rate = layer[1]
            if not (0.0 <= rate < 1.0):
                raise ValueError(f"layer {idx}: dropout rate must be in [0, 1), got {rate}")
        elif kind == "fc":
            n = int(np.prod(cur))
            cur = (layer[1],)
        else:
            raise ValueError(f"layer {idx}: unknown layer kind {kind!r}")
        shapes.append(cur)
    return shapes


def make_cnn_spec(input_shape, conv_blocks, classes, head="joint_softmax",
                  lam=1.0, mask_layers="top", dropout_rate=0.0) -> NetworkSpec:
    """Build the standard block layout: per block, n convs (+relu) then a pool.

    conv_blocks: sequence of (n_convs, channels). ``mask_layers="top"``
    places masks and penalties on the last block's final relu output and
    on the final pooling layer; pass explicit indices to override.
    """
    layers = []
    last_block_relu = None
    last_pool = None
    for n_convs, channels in conv_blocks:
        for _ in range(n_convs):
            layers.append(("conv", int(channels)))
            layers.append(("relu",))
        last_block_relu = len(layers) - 1
        layers.append(("pool",))
        last_pool = len(layers) - 1
    if dropout_rate:
        layers.append(("dropout", float(dropout_rate)))
    layers.append(("fc", int(classes)))
    if mask_layers == "top":
        mask_idx = frozenset({last_block_relu, last_pool})
    else:
        mask_idx = frozenset(int(i) for i in mask_layers)
    lambdas = {i: float(lam) for i in sorted(mask_idx)} if lam else {}
    return NetworkSpec(tuple(layers), tuple(input_shape), mask_idx, lambdas, head)


def mnist_network_spec(classes=10, head="joint_softmax", block_convs=(3, 2, 2),
                       channels=(32, 64, 128), frame=120, lam=1.0,
                       dropout_rate=0.0) -> NetworkSpec:
    """The 120x120 digit-scene architecture: three conv blocks ending in fc."""
    blocks = tuple(zip(block_convs, channels))
    return make_cnn_spec((frame, frame, 1), blocks, classes, head=head,
                         lam=lam, dropout_rate=dropout_rate)


def toy_network_spec(classes=4, head="independent_sigmoid", frame=16,
                     channels=(4, 8), lam=1.0, dropout_rate=0.0) -> NetworkSpec:
    """A 16x16 two-block network small enough for exhaustive checking."""
    blocks = tuple((1, c) for c in channels)
    return make_cnn_spec((frame, frame, 1), blocks, classes, head=head,
                         lam=lam, dropout_rate=dropout_rate)


def init_params(net: NetworkSpec, rng: np.random.Generator) -> dict:
    """Fresh parameters: uniform(-L, L) with L = sqrt(6 / (fan_in + fan_out)),
    biases zero. Names are '<kind><layer_index>.<field>'."""
    params = {}
    cur_c = net.input_shape[2]
    shapes = layer_shapes(net)
    for idx, layer in enumerate(net.layers):
        kind = layer[0]
        if kind == "conv":
            c_out = layer[1]
            fan_in, fan_out = 9 * cur_c, 9 * c_out
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(3, 3, cur_c, c_out))
            params[f"conv{idx}.kernels"] = Parameter(f"conv{idx}.kernels", w)
            params[f"conv{idx}.bias"] = Parameter(f"conv{idx}.bias", np.zeros(c_out))
            cur_c = c_out
        elif kind == "fc":
            n = int(np.prod(shapes[idx - 1])) if idx else int(np.prod(net.input_shape))
            m = layer[1]
            limit = math.sqrt(6.0 / (n + m))
            w = rng.uniform(-limit, limit, size=(n, m))
            params[f"fc{idx}.weights"] = Parameter(f"fc{idx}.weights", w)
            params[f"fc{idx}.bias"] = Parameter(f"fc{idx}.bias", np.zeros(m))
    return params


def param_count(params: dict) -> int:
    return sum(p.value.size for p in params.values())


def make_param_nodes(tape: Tape, params: dict) -> dict:
    """One tape leaf per parameter, shared by every branch on the tape."""
    return {name: tape.leaf(p.value) for name, p in sorted(params.items())}


@dataclass
class Activations:
    """Recorded tape nodes for one forward pass of one branch."""

    nodes: dict            # layer index -> tape node
    output: int            # final layer node (logits)
    input_node: int
    param_nodes: dict


def forward(net: NetworkSpec, params: dict, x, mask=None, tape: Tape = None, *,
            train: bool = False, rng: np.random.Generator = None,
            param_nodes: dict = None, layer_masks: dict = None,
            keep=None) -> Activations:
    """Run all layers in order, recording every activation on the tape.

    ``mask`` is an input-resolution object mask, (H, W) for a single
    sample or (B, H, W) for a batch; the input is pre-masked and the
    projected, binarized mask is reapplied at every index in
    net.mask_layers. ``layer_masks`` is the low-level alternative: a
    precomputed map of layer index -> constant array broadcastable to
    that layer's activation (the caller pre-masks the input itself).

    ``keep`` bounds peak memory on large batches: when given a set of
    layer indices, only those layers' recorded values (plus the output)
    stay readable on the tape; every other intermediate value is
    released as soon as the next layer has consumed it. Gradients are
    unaffected. With keep=None (the default) every activation stays
    readable.
    """
    if tape is None:
        tape = Tape()
    if mask is not None and layer_masks is not None:
        raise ValueError("pass either mask or layer_masks, not both")
    x = as_f64(x)
    expected = tuple(net.input_shape)
    batched = x.ndim == 4
    if not (x.ndim == 3 and x.shape == expected) and \
            not (batched and x.shape[1:] == expected):
        raise ValueError(f"input shape {x.shape} does not match declared {expected}")

    if mask is not None:
        from .masks import project_mask_spatial
        if not net.mask_layers:
            warnings.warn("mask given but the network has no mask layers; "
                          "only the input is masked")
        mask = as_f64(mask)
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("forward mask values must be exactly 0 or 1")
        if mask.ndim == 2:
            if batched:
                raise ValueError("a single mask cannot drive a batched forward")
            masks2d = [mask]
        elif mask.ndim == 3 and batched and mask.shape[0] == x.shape[0]:
            masks2d = list(mask)
        else:
            raise ValueError(f"mask shape {mask.shape} does not match input {x.shape}")
        if masks2d[0].shape != expected[:2]:
            raise ValueError(f"mask spatial shape {masks2d[0].shape} does not match "
                             f"input {expected[:2]}")
        stack = np.stack(masks2d, axis=0)            # (B, H, W)
        x = x * (stack[:, :, :, np.newaxis] if batched else stack[0][:, :, np.newaxis])
        shapes = layer_shapes(net)
        layer_masks = {}
        for idx in net.mask_layers:
            h, w, _ = shapes[idx]
            proj = np.stack([project_mask_spatial(m, (h, w), "binary") for m in masks2d],
                            axis=0)                  # (B, h, w)
            layer_masks[idx] = (proj[:, :, :, np.newaxis] if batched
                                else proj[0][:, :, np.newaxis])
    layer_masks = layer_masks or {}

    if param_nodes is None:
        param_nodes = make_param_nodes(tape, params)
    x_node = tape.leaf(x)
    if train and any(l[0] == "dropout" for l in net.layers) and rng is None:
        raise ValueError("training forward through dropout requires an rng")

    protect = None if keep is None else set(keep)
    nodes = {}
    cur = x_node
    for idx, layer in enumerate(net.layers):
        kind = layer[0]
        prev = cur
        if kind == "conv":
            cur = tape.conv2d(cur, param_nodes[f"conv{idx}.kernels"],
                              param_nodes[f"conv{idx}.bias"])
        elif kind == "relu":
            cur = tape.relu(cur)
        elif kind == "pool":
            cur = tape.maxpool2d(cur)
        elif kind == "dropout":
            if train:
                cur = tape.dropout(cur, layer[1], rng)
        elif kind == "fc":
            if tape.value(cur).ndim >= 3:
                cur = tape.flatten(cur)
                if protect is not None and cur != prev:
                    _maybe_release(tape, prev, nodes, protect, x_node)
                prev = cur
            cur = tape.affine(cur, param_nodes[f"fc{idx}.weights"],
                              param_nodes[f"fc{idx}.bias"])
        if idx in layer_masks:
            inner = cur
            cur = tape.mul_const(cur, layer_masks[idx])
            if protect is not None and inner != prev:
                _maybe_release(tape, inner, nodes, protect, x_node)
        if protect is not None and cur != prev:
            _maybe_release(tape, prev, nodes, protect, x_node)
        nodes[idx] = cur
    return Activations(nodes=nodes, output=cur, input_node=x_node, param_nodes=param_nodes)


def _maybe_release(tape, node, nodes, protect, x_node):
    """Release an intermediate value unless a protected layer recorded it."""
    if node == x_node:
        return
    for idx, n in nodes.items():
        if n == node and idx in protect:
            return
    tape.release(node)


def predict_logits(net: NetworkSpec, params: dict, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a sequence of (H, W, C) images, computed in batches.

    Returns an (N, C) array, one row per image.
    """
    out = []
    for lo in range(0, len(images), batch_size):
        tape = Tape()
        chunk = np.stack([as_f64(im) for im in images[lo:lo + batch_size]], axis=0)
        acts = forward(net, params, chunk, tape=tape, train=False, keep=set())
        out.append(tape.value(acts.output).copy())
    return np.concatenate(out, axis=0)


def softmax_cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], computed with max subtraction."""
    logits = as_f64(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"expected a logit vector with >= 2 classes, got {logits.shape}")
    if not (0 <= label < logits.shape[0]):
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    return float(math.log(np.exp(z).sum()) - z[label])


def sigmoid_cross_entropy(logits, targets) -> float:
    """Mean over classes of max(x,0) - x*t + log(1 + exp(-|x|))."""
    logits = as_f64(logits)
    targets = as_f64(targets)
    if logits.shape != targets.shape or logits.ndim != 1:
        raise ValueError(f"shape mismatch: {logits.shape} vs {targets.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ValueError("targets must be binary")
    per = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())


def l2_penalty(params: dict, coefficient: float) -> float:
    """coefficient * sum of squared conv/fc weights; biases are exempt."""
    if coefficient < 0:
        raise ValueError("l2 coefficient must be >= 0")
    if coefficient == 0:
        return 0.0
    total = 0.0
    for name in sorted(params):
        if name.endswith(".kernels") or name.endswith(".weights"):
            v = params[name].value
            total += float((v * v).sum())
    return coefficient * total


def dropout(x, rate: float, seed: int):
    """Train-time dropout: zero each unit with probability rate and scale
    survivors by 1/(1-rate). Evaluation-time behavior is the identity."""
    x = as_f64(x)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def net_to_dict(net: NetworkSpec) -> dict:
    return {
        "layers": [list(l) for l in net.layers],
        "input_shape": list(net.input_shape),
        "mask_layers": sorted(net.mask_layers),
        "lambdas": {str(k): v for k, v in sorted(net.lambdas.items())},
        "head": net.head,
    }


def net_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        layers=tuple(tuple(l) for l in d["layers"]),
        input_shape=tuple(d["input_shape"]),
        mask_layers=frozenset(int(i) for i in d["mask_layers"]),
        lambdas={int(k): float(v) for k, v in d["lambdas"].items()},
        head=d["head"],
    )
