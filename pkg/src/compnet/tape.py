"""Reverse-mode automatic differentiation over the dense kernels.

A Tape records one forward computation as a sequence of primitive
applications. Nodes are integer ids into the tape's value table;
``backward`` replays the record in reverse and accumulates gradients
additively, which is what makes parameters shared across branches
receive the sum of their per-branch gradients.

A tape is single-writer: one training step owns one tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import as_f64


@dataclass
class Parameter:
    """A named trainable array with an accumulated gradient of equal shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = as_f64(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(f"parameter {self.name}: grad shape {self.grad.shape} "
                             f"!= value shape {self.value.shape}")


class Tape:
    """Ordered record of primitive applications for one forward pass.

    ``guided_relu`` switches every recorded relu to the guided backward
    rule: gradient components are zeroed where the forward input was
    non-positive or where the incoming gradient is negative.
    """

    def __init__(self, guided_relu: bool = False):
        self.values: list = []
        self._ops: list = []  # (out_id, backward `grad -> [(node, contribution), ...]`)
        self.guided_relu = guided_relu

    def __len__(self):
        return len(self.values)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def leaf(self, value) -> int:
        self.values.append(as_f64(value))
        return len(self.values) - 1

    def release(self, node: int) -> None:
        """Drop the value-table reference for a node whose value no later
        computation will read; backward closures hold what they need."""
        self.values[node] = None

    def _push(self, value, backward) -> int:
        self.values.append(value)
        out = len(self.values) - 1
        self._ops.append((out, backward))
        return out

    # -- elementwise / structural ------------------------------------------

    def add(self, a: int, b: int) -> int:
        va, vb = self.values[a], self.values[b]
        if np.shape(va) != np.shape(vb):
            raise ValueError(f"add shape mismatch: {np.shape(va)} vs {np.shape(vb)}")
        return self._push(va + vb, lambda g: [(a, g), (b, g)])

    def sub(self, a: int, b: int) -> int:
        va, vb = self.values[a], self.values[b]
        if np.shape(va) != np.shape(vb):
            raise ValueError(f"sub shape mismatch: {np.shape(va)} vs {np.shape(vb)}")
        return self._push(va - vb, lambda g: [(a, g), (b, -g)])

    def mul(self, a: int, b: int) -> int:
        va, vb = self.values[a], self.values[b]
        out = kernels.elementwise_mul(va, vb)
        return self._push(out, lambda g: [(a, g * vb), (b, g * va)])

    def mul_const(self, a: int, const) -> int:
        """Elementwise product with a non-differentiated constant array.

        The constant must broadcast to the node's shape without changing it
        (e.g. a spatial mask of shape (h, w, 1, b) against a (h, w, c, b)
        activation).
        """
        const = as_f64(const)
        va = self.values[a]
        try:
            if np.broadcast_shapes(np.shape(const), np.shape(va)) != np.shape(va):
                raise ValueError
        except ValueError:
            raise ValueError(f"mul_const: constant shape {const.shape} does not "
                             f"broadcast to node shape {np.shape(va)}") from None
        return self._push(va * const, lambda g: [(a, g * const)])

    def scale(self, a: int, s: float) -> int:
        s = float(s)
        return self._push(self.values[a] * s, lambda g: [(a, g * s)])

    def sum(self, a: int) -> int:
        shape = np.shape(self.values[a])
        return self._push(np.asarray(np.sum(self.values[a])),
                          lambda g: [(a, np.broadcast_to(g, shape).copy() if shape else g)])

    def sumsq(self, a: int) -> int:
        va = self.values[a]
        return self._push(np.asarray(np.sum(va * va)), lambda g: [(a, 2.0 * g * va)])

    def select(self, a: int, index: int) -> int:
        """Pick one component of a vector node as a scalar node."""
        va = self.values[a]
        if va.ndim != 1:
            raise ValueError(f"select expects a vector node, got shape {va.shape}")

        def bwd(g):
            out = np.zeros_like(va)
            out[index] = g
            return [(a, out)]

        return self._push(np.asarray(va[index]), bwd)

    def batch_slice(self, a: int, lo: int, hi: int) -> int:
        """Slice along the leading batch axis."""
        va = self.values[a]
        nb = va.shape[0]
        if not (0 <= lo < hi <= nb):
            raise ValueError(f"batch_slice [{lo}:{hi}] out of range for batch {nb}")
        shape = va.shape

        def bwd(g):
            out = np.zeros(shape)
            out[lo:hi] = g
            return [(a, out)]

        return self._push(va[lo:hi].copy(), bwd)

    # -- network primitives -------------------------------------------------

    def conv2d(self, x: int, k: int, b: int) -> int:
        vx, vk, vb = self.values[x], self.values[k], self.values[b]
        out = kernels.conv2d(vx, vk, vb)

        def bwd(g):
            dx, dk, db = kernels.conv2d_grads(vx, vk, g)
            return [(x, dx), (k, dk), (b, db)]

        return self._push(out, bwd)

    def maxpool2d(self, x: int) -> int:
        vx = self.values[x]
        out, arg = kernels.maxpool2d(vx)
        in_shape = vx.shape  # shape only; do not pin the input array
        return self._push(out, lambda g: [(x, kernels.maxpool2d_backward(arg, g, in_shape))])

    def relu(self, x: int) -> int:
        vx = self.values[x]
        out = kernels.relu(vx)

        # gate by the output, not the input: out > 0 iff in > 0, and this
        # leaves the pre-activation free to be released during backward
        def bwd(g):
            if self.guided_relu:
                g = np.where(g > 0.0, g, 0.0)
            return [(x, kernels.relu_backward(out, g))]

        return self._push(out, bwd)

    def flatten(self, x: int) -> int:
        vx = self.values[x]
        out = kernels.flatten_features(vx)
        in_shape = vx.shape
        return self._push(out, lambda g: [(x, g.reshape(in_shape))])

    def affine(self, x: int, w: int, b: int) -> int:
        vx, vw, vb = self.values[x], self.values[w], self.values[b]
        out = kernels.affine(vx, vw, vb)

        def bwd(g):
            dx, dw, db = kernels.affine_grads(vx, vw, g)
            return [(x, dx), (w, dw), (b, db)]

        return self._push(out, bwd)

    def dropout(self, x: int, rate: float, rng: np.random.Generator) -> int:
        """Inverted dropout: zero with probability rate, scale survivors."""
        if not (0.0 <= rate < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        vx = self.values[x]
        if rate == 0.0:
            return self._push(vx.copy(), lambda g: [(x, g)])
        keep = (rng.random(vx.shape) >= rate) / (1.0 - rate)
        return self._push(vx * keep, lambda g: [(x, g * keep)])

    # -- loss heads -----------------------------------------------------------

    def softmax_cross_entropy(self, logits: int, label: int) -> int:
        """-log softmax(logits)[label] for a single class-index label."""
        v = self.values[logits]
        if v.ndim != 1:
            raise ValueError(f"softmax_cross_entropy expects a logit vector, got {v.shape}")
        if not (0 <= label < v.shape[0]):
            raise ValueError(f"label {label} out of range for {v.shape[0]} classes")
        z = v - v.max()
        logsumexp = math.log(np.exp(z).sum())
        p = np.exp(z - logsumexp)

        def bwd(g):
            d = p.copy()
            d[label] -= 1.0
            return [(logits, g * d)]

        return self._push(np.asarray(logsumexp - z[label]), bwd)

    def sigmoid_cross_entropy(self, logits: int, targets) -> int:
        """Mean over classes of the stable elementwise sigmoid cross entropy."""
        v = self.values[logits]
        t = as_f64(targets)
        if v.ndim != 1 or t.shape != v.shape:
            raise ValueError(f"sigmoid_cross_entropy shape mismatch: {v.shape} vs {t.shape}")
        if not np.all((t == 0.0) | (t == 1.0)):
            raise ValueError("sigmoid_cross_entropy targets must be binary")
        per = np.maximum(v, 0.0) - v * t + np.log1p(np.exp(-np.abs(v)))
        sig = 1.0 / (1.0 + np.exp(-v))
        n = v.shape[0]
        return self._push(np.asarray(per.mean()),
                          lambda g: [(logits, g * (sig - t) / n)])

    def softmax_cross_entropy_batch(self, logits: int, labels, weights) -> int:
        """Weighted sum over batch rows of per-sample softmax cross entropy.

        logits: (B, C) node; labels: (B,) class indices; weights: (B,).
        """
        v = self.values[logits]
        labels = np.asarray(labels, dtype=np.int64)
        weights = as_f64(weights)
        if v.ndim != 2 or labels.shape != (v.shape[0],) or weights.shape != (v.shape[0],):
            raise ValueError("softmax_cross_entropy_batch: inconsistent shapes")
        if labels.min() < 0 or labels.max() >= v.shape[1]:
            raise ValueError("softmax_cross_entropy_batch: label out of range")
        z = v - v.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        p = np.exp(z - logsumexp[:, np.newaxis])
        rows = np.arange(v.shape[0])
        per = logsumexp - z[rows, labels]

        def bwd(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return [(logits, g * d * weights[:, np.newaxis])]

        return self._push(np.asarray(float(per @ weights)), bwd)

    def sigmoid_cross_entropy_batch(self, logits: int, targets, weights) -> int:
        """Weighted sum over batch rows of per-sample (class-mean) sigmoid CE.

        logits: (B, C) node; targets: (B, C) binary; weights: (B,).
        """
        v = self.values[logits]
        t = as_f64(targets)
        weights = as_f64(weights)
        if v.ndim != 2 or t.shape != v.shape or weights.shape != (v.shape[0],):
            raise ValueError("sigmoid_cross_entropy_batch: inconsistent shapes")
        if not np.all((t == 0.0) | (t == 1.0)):
            raise ValueError("sigmoid_cross_entropy_batch: targets must be binary")
        per = (np.maximum(v, 0.0) - v * t + np.log1p(np.exp(-np.abs(v)))).mean(axis=1)
        sig = 1.0 / (1.0 + np.exp(-v))
        n = v.shape[1]
        return self._push(np.asarray(float(per @ weights)),
                          lambda g: [(logits, g * (sig - t) * weights[:, np.newaxis] / n)])


def backward(tape: Tape, loss: int, keep_intermediate: bool = True) -> list:
    """Gradients of a scalar loss node w.r.t. every node on the tape.

    Returns a list indexed by node id; entries not reachable from the
    loss are None. Contributions from multiple uses of a node accumulate
    additively. With keep_intermediate=False the pass consumes the tape:
    gradients, recorded values, and op closures of intermediate nodes are
    released as soon as they are propagated (only leaf gradients and leaf
    values survive), which bounds peak memory on large batched graphs.
    """
    lv = tape.values[loss]
    if np.ndim(lv) != 0 and np.size(lv) != 1:
        raise ValueError(f"backward requires a scalar loss node, got shape {np.shape(lv)}")
    grads: list = [None] * len(tape.values)
    grads[loss] = np.ones_like(lv)
    for i in range(len(tape._ops) - 1, -1, -1):
        out, bwd = tape._ops[i]
        g = grads[out]
        if g is None:
            if not keep_intermediate:
                tape._ops[i] = None
                tape.values[out] = None
            continue
        for node, contrib in bwd(g):
            if grads[node] is None:
                grads[node] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                grads[node] += contrib
        if not keep_intermediate:
            grads[out] = None
            tape._ops[i] = None
            tape.values[out] = None
    return grads


@dataclass
class GradCheckRow:
    name: str
    checked: int
    max_error: float
    worst_coord: tuple


@dataclass
class GradCheckReport:
    rows: list = field(default_factory=list)
    tol: float = 0.0
    eps: float = 0.0
    seed: int = 0

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def format(self) -> str:
        lines = [f"{'parameter':<24} {'coords':>7} {'max rel err':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<24} {r.checked:>7} {r.max_error:>12.3e}")
        lines.append(f"overall: max err {self.max_error:.3e} "
                     f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}, eps {self.eps:g})")
        return "\n".join(lines)


def gradient_check(build_loss, params, eps: float = 1e-5, tol: float = 1e-4,
                   max_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` takes the parameter dict and returns (tape, loss_node,
    param_nodes) where param_nodes maps parameter names to tape leaves.
    It must be deterministic; two evaluations at the same point are
    compared exactly and a mismatch raises. Per parameter, up to
    ``max_coords`` coordinates are sampled (seeded); smaller parameters
    are checked exhaustively.

    Relative error per coordinate is |a - fd| / max(|a|, |fd|); when both
    magnitudes are below 1e-8 the absolute error is used instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)

    tape, loss, param_nodes = build_loss(params)
    base = float(tape.value(loss))
    tape2, loss2, _ = build_loss(params)
    if float(tape2.value(loss2)) != base:
        raise ValueError("loss is not deterministic: two evaluations at the same "
                         "point differ; gradient checking is meaningless")
    grads = backward(tape, loss)

    report = GradCheckReport(tol=tol, eps=eps, seed=seed)
    for name in sorted(params):
        p = params[name]
        analytic = grads[param_nodes[name]]
        if analytic is None:
            analytic = np.zeros_like(p.value)
        n = p.value.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = p.value.reshape(-1)
        worst = 0.0
        worst_coord = ()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            tape_p, loss_p, _ = build_loss(params)
            plus = float(tape_p.value(loss_p))
            flat[c] = orig - eps
            tape_m, loss_m, _ = build_loss(params)
            minus = float(tape_m.value(loss_m))
            flat[c] = orig
            fd = (plus - minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[c])
            denom = max(abs(a), abs(fd))
            err = abs(a - fd) if denom < 1e-8 else abs(a - fd) / denom
            if err > worst:
                worst = err
                worst_coord = np.unravel_index(int(c), p.value.shape)
        report.rows.append(GradCheckRow(name, len(coords), worst, worst_coord))
    return report
