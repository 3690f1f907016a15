"""The combined training objective and its one-step driver.

The discriminative part blends per-object masked-branch classification
losses with the unmasked branch's loss under a gamma weight; the
compositional part penalizes, at selected layers, the squared difference
between masked-branch activations and the loss-masked activations of the
unmasked branch. Penalty terms are normalized by layer element count so
one default weight works across layers.

Training uses two weight-sharing branches regardless of how many objects
a scene contains: the masked branch sees one uniformly drawn object per
sample, which keeps the expectation equal to the full per-object average
while bounding step cost. Both branches are recorded on one tape with
shared parameter leaves, so their gradients accumulate exactly as a
single set of weights requires.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .kernels import as_f64
from .masks import loss_mask_spatial, project_mask_spatial
from .network import NetworkSpec, layer_shapes
from .tape import Tape, backward

COMP_VARIANTS = ("comp-full", "comp-obj-only", "comp-no-mask")
BASELINE_VARIANTS = ("baseline", "baseline-aug", "baseline-reg", "baseline-aug-reg")
VARIANTS = COMP_VARIANTS + BASELINE_VARIANTS


@dataclass
class LossConfig:
    """Objective variant plus its scalar knobs.

    l2_coefficient applies only to the *-reg baseline variants; the
    compositional variants never carry weight regularization.
    """

    variant: str = "comp-full"
    gamma: float = 0.5
    l2_coefficient: float = 1e-4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be >= 0")

    @property
    def compositional(self) -> bool:
        return self.variant in COMP_VARIANTS

    @property
    def regularized(self) -> bool:
        return self.variant.endswith("-reg")


@dataclass
class LossBreakdown:
    """Scalar record of one batch's loss components."""

    masked_losses: list = field(default_factory=list)   # per sample, drawn object
    unmasked_loss: float = 0.0
    discriminative: float = 0.0
    compositional: float = 0.0
    per_layer_comp: dict = field(default_factory=dict)
    penalty: float = 0.0
    total: float = 0.0
    drawn_k: list = field(default_factory=list)


def discriminative_loss(masked_losses, unmasked_loss: float, gamma: float) -> float:
    """(1/K) * sum_k gamma * L_mk + (1 - gamma) * L_u.

    An empty masked sequence (baseline variants) yields the unmasked
    loss unchanged.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    masked_losses = list(masked_losses)
    if not masked_losses:
        return float(unmasked_loss)
    k = len(masked_losses)
    return float(sum(gamma * l for l in masked_losses) / k
                 + (1.0 - gamma) * unmasked_loss)


def compositional_loss(masked_acts, unmasked_acts, loss_masks, lambdas) -> float:
    """(1/K) * sum_k sum_n lambda_n * ||phi_mk_n - phi_u_n * m'_k||^2 / size_n.

    masked_acts: per-object dicts of layer index -> activation array;
    unmasked_acts: one such dict; loss_masks: per-object LossMask.
    Activation arrays are plain values; this is the direct evaluation
    used for diagnostics and references, not the differentiated path.
    """
    k_count = len(masked_acts)
    if k_count == 0:
        raise ValueError("compositional_loss requires at least one masked branch")
    if len(loss_masks) != k_count:
        raise ValueError("one loss mask per masked branch is required")
    total = 0.0
    for acts_k, lm in zip(masked_acts, loss_masks):
        for idx, lam in lambdas.items():
            if lam == 0.0:
                continue
            phi_m = as_f64(acts_k[idx])
            phi_u = as_f64(unmasked_acts[idx])
            if phi_m.shape != phi_u.shape:
                raise ValueError(f"layer {idx}: branch activation shapes differ: "
                                 f"{phi_m.shape} vs {phi_u.shape}")
            d = phi_m - phi_u * lm.layers[idx]
            total += lam * float((d * d).sum()) / d.size
    return total / k_count


def baseline_aug_batch(batch, rng: np.random.Generator) -> list:
    """Replace a random half of the batch (rounded down) with one object
    shown in isolation, its label set reduced to that object's class."""
    from .data import Sample

    n = len(batch)
    chosen = rng.choice(n, size=n // 2, replace=False)
    out = list(batch)
    for i in chosen:
        s = out[i]
        k = int(rng.integers(s.K))
        out[i] = Sample(image=s.image * s.masks[k][:, :, np.newaxis],
                        masks=[s.masks[k]], labels=[s.labels[k]],
                        split=s.split, provenance=s.provenance)
    return out


def _head_targets(net: NetworkSpec, labels_per_sample):
    """Batch label structures for the configured head."""
    classes = net.output_classes()
    if net.head == "joint_softmax":
        flat = []
        for labs in labels_per_sample:
            if len(set(labs)) != 1:
                raise ValueError("joint_softmax head requires single-class samples; "
                                 "use independent_sigmoid for multi-object scenes")
            flat.append(labs[0])
        return np.asarray(flat, dtype=np.int64)
    targets = np.zeros((len(labels_per_sample), classes))
    for b, labs in enumerate(labels_per_sample):
        for l in labs:
            targets[b, l] = 1.0
    return targets


def _attach_loss(tape: Tape, net: NetworkSpec, logits: int, labels_per_sample, weights):
    if net.head == "joint_softmax":
        labels = _head_targets(net, labels_per_sample)
        return tape.softmax_cross_entropy_batch(logits, labels, weights)
    targets = _head_targets(net, labels_per_sample)
    return tape.sigmoid_cross_entropy_batch(logits, targets, weights)


def _per_sample_losses(net: NetworkSpec, logits_value, labels_per_sample):
    out = []
    for b, labs in enumerate(labels_per_sample):
        row = logits_value[b]
        if net.head == "joint_softmax":
            out.append(network.softmax_cross_entropy(row, labs[0]))
        else:
            t = np.zeros(net.output_classes())
            t[list(set(labs))] = 1.0
            out.append(network.sigmoid_cross_entropy(row, t))
    return out


def build_step_graph(batch, net: NetworkSpec, params: dict, config: LossConfig,
                     rng: np.random.Generator):
    """Construct one batch's full loss graph without differentiating it.

    Returns (tape, total_node, param_nodes, breakdown). Exposed so the
    complete objective, regularizers included, can be gradient-checked
    end to end.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    for s in batch:
        if s.K < 1:
            raise ValueError("every sample needs at least one object")

    if config.variant in BASELINE_VARIANTS:
        tape, total, acts, breakdown = _baseline_graph(batch, net, params, config, rng)
    else:
        tape, total, acts, breakdown = _comp_graph(batch, net, params, config, rng)

    if config.regularized and config.l2_coefficient > 0:
        pen = None
        for name in sorted(params):
            if name.endswith(".kernels") or name.endswith(".weights"):
                term = tape.scale(tape.sumsq(acts.param_nodes[name]),
                                  config.l2_coefficient)
                pen = term if pen is None else tape.add(pen, term)
        if pen is not None:
            breakdown.penalty = float(tape.value(pen))
            breakdown.total += breakdown.penalty
            total = tape.add(total, pen)
    return tape, total, acts.param_nodes, breakdown


def two_branch_step(batch, net: NetworkSpec, params: dict, config: LossConfig,
                    rng: np.random.Generator):
    """One training step over a batch; returns (LossBreakdown, gradients).

    Compositional variants run the masked branch (one drawn object per
    sample) and the unmasked branch; baseline variants run exactly one
    forward per sample. Gradients are averaged over the batch.
    """
    tape, total, param_nodes, breakdown = build_step_graph(batch, net, params,
                                                           config, rng)
    grads_by_node = backward(tape, total, keep_intermediate=False)
    grads = {}
    for name, p in params.items():
        g = grads_by_node[param_nodes[name]]
        grads[name] = np.zeros_like(p.value) if g is None else g
    return breakdown, grads


def _baseline_graph(batch, net, params, config, rng):
    if "aug" in config.variant:
        batch = baseline_aug_batch(batch, rng)
    n = len(batch)
    x = np.stack([s.image for s in batch], axis=0)
    labels = [s.labels for s in batch]
    tape = Tape()
    acts = network.forward(net, params, x, tape=tape, train=True, rng=rng,
                           keep=set())
    weights = np.full(n, 1.0 / n)
    loss_node = _attach_loss(tape, net, acts.output, labels, weights)
    per_sample = _per_sample_losses(net, tape.value(acts.output), labels)
    breakdown = LossBreakdown(
        masked_losses=[],
        unmasked_loss=float(np.mean(per_sample)),
        discriminative=float(tape.value(loss_node)),
        compositional=0.0,
        total=float(tape.value(loss_node)),
    )
    return tape, loss_node, acts, breakdown


def _comp_graph(batch, net, params, config, rng):
    # Both branches run on one tape with shared parameter leaves, as two
    # batch-n passes rather than one fused batch-2n pass: the arrays stay
    # the same size a plain baseline step uses, which is measurably
    # cheaper per sample, and gradient accumulation across the branches
    # is what makes the weight sharing correct.
    n = len(batch)
    ks = [int(rng.integers(s.K)) for s in batch]
    masked_x = np.stack([s.image * s.masks[k][:, :, np.newaxis]
                         for s, k in zip(batch, ks)], axis=0)
    raw_x = np.stack([s.image for s in batch], axis=0)

    shapes = layer_shapes(net)
    layer_masks = {}
    if config.variant != "comp-no-mask":
        for idx in net.mask_layers:
            h, w, _ = shapes[idx]
            proj = np.empty((n, h, w, 1))
            for b, (s, k) in enumerate(zip(batch, ks)):
                proj[b, :, :, 0] = project_mask_spatial(s.masks[k], (h, w), "binary")
            layer_masks[idx] = proj

    tape = Tape()
    param_nodes = network.make_param_nodes(tape, params)
    penalty_keep = {i for i in net.lambdas if net.lambdas[i] > 0}
    acts_m = network.forward(net, params, masked_x, tape=tape, train=True,
                             rng=rng, param_nodes=param_nodes,
                             layer_masks=layer_masks, keep=penalty_keep)
    acts_u = network.forward(net, params, raw_x, tape=tape, train=True,
                             rng=rng, param_nodes=param_nodes,
                             keep=penalty_keep)

    # Discriminative: drawn-object class for the masked branch, the
    # sample's own labels for the unmasked branch; the single drawn
    # object stands in for the per-object average, so it carries weight
    # gamma, not gamma/K.
    masked_labels = [[s.labels[k]] for s, k in zip(batch, ks)]
    unmasked_labels = [s.labels for s in batch]
    ce_m = _attach_loss(tape, net, acts_m.output, masked_labels,
                        np.full(n, config.gamma / n))
    ce_u = _attach_loss(tape, net, acts_u.output, unmasked_labels,
                        np.full(n, (1.0 - config.gamma) / n))
    ld_node = tape.add(ce_m, ce_u)

    # Compositional: masked-branch activations against loss-masked
    # unmasked-branch activations, per penalty layer. The loss-mask
    # variant for comp-no-mask follows comp-full.
    mask_variant = "comp-obj-only" if config.variant == "comp-obj-only" else "comp-full"
    lc_node = None
    per_layer = {}
    for idx in sorted(penalty_keep):
        h, w, c = shapes[idx]
        mprime = np.empty((n, h, w, 1))
        for b, (s, k) in enumerate(zip(batch, ks)):
            spatial = loss_mask_spatial(s, k, mask_variant)
            mprime[b, :, :, 0] = project_mask_spatial(spatial, (h, w), "binary")
        diff = tape.sub(acts_m.nodes[idx], tape.mul_const(acts_u.nodes[idx], mprime))
        term = tape.scale(tape.sumsq(diff), net.lambdas[idx] / (h * w * c * n))
        per_layer[idx] = float(tape.value(term))
        lc_node = term if lc_node is None else tape.add(lc_node, term)

    total_node = ld_node if lc_node is None else tape.add(ld_node, lc_node)

    masked_per = _per_sample_losses(net, tape.value(acts_m.output), masked_labels)
    unmasked_per = _per_sample_losses(net, tape.value(acts_u.output),
                                      unmasked_labels)
    breakdown = LossBreakdown(
        masked_losses=masked_per,
        unmasked_loss=float(np.mean(unmasked_per)),
        discriminative=float(tape.value(ld_node)),
        compositional=0.0 if lc_node is None else float(tape.value(lc_node)),
        per_layer_comp=per_layer,
        total=float(tape.value(total_node)),
        drawn_k=ks,
    )
    return tape, total_node, acts_m, breakdown


def timed_step(batch, net, params, config, rng):
    """two_branch_step plus wall-clock milliseconds, for trace logging."""
    t0 = time.perf_counter()
    breakdown, grads = two_branch_step(batch, net, params, config, rng)
    return breakdown, grads, (time.perf_counter() - t0) * 1000.0
