"""Experiment driver: configuration files, the training loop with per-epoch
evaluation, checkpoint persistence, and checkpoint-based evaluation.

Config files are INI-style text with fixed sections; unknown sections or
keys are rejected so typos in ablation grids fail loudly. Runs are fully
deterministic given the configured seed: parameter init, batch shuffling,
object draws, and augmentation all derive from it through separate
SeedSequence spawns.
"""

from __future__ import annotations

import configparser
import json
import os
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import network
from .data import load_dataset
from .metrics import (EvalReport, area_bins, average_precision, guided_backprop,
                      localization_accuracy, stratify_by_area, topk_accuracy)
from .network import NetworkSpec, net_from_dict, net_to_dict
from .objective import LossConfig, VARIANTS, timed_step
from .optim import AdamState, init_adam, adam_step
from .tape import Parameter

CHECKPOINT_MAGIC = b"COMPNET-CKPT-1\n"


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent experiment configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class ExperimentConfig:
    train_dir: str
    test_dir: str
    out_dir: str
    seed: int
    variant: str = "comp-full"
    gamma: float = 0.5
    l2: float = 1e-4
    block_convs: tuple = (3, 2, 2)
    channels: tuple = (32, 64, 128)
    classes: int = 10
    head: str = "joint_softmax"
    lam: float = 1.0
    mask_layers: str = "top"
    dropout: float = 0.0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    eval_every: int = 1
    metric: str = "topk"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.seed is None:
            raise ConfigError("seed is mandatory; wall-clock seeding is not supported")
        if len(self.block_convs) != len(self.channels):
            raise ConfigError("block_convs and channels must have equal length")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0, eval_every >= 1 required")
        if self.metric not in ("topk", "ap"):
            raise ConfigError(f"metric must be 'topk' or 'ap', got {self.metric!r}")
        if self.metric == "ap" and self.head != "independent_sigmoid":
            raise ConfigError("AP tracking requires the independent_sigmoid head")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_convs"] = list(self.block_convs)
        d["channels"] = list(self.channels)
        return d

    def loss_config(self) -> LossConfig:
        return LossConfig(variant=self.variant, gamma=self.gamma,
                          l2_coefficient=self.l2)

    def network_spec(self, input_shape) -> NetworkSpec:
        mask_layers = self.mask_layers
        if mask_layers != "top":
            mask_layers = [int(t) for t in str(mask_layers).split(",") if t.strip()]
        dropout_rate = self.dropout if self.variant.endswith("-reg") else 0.0
        return network.make_cnn_spec(
            input_shape, tuple(zip(self.block_convs, self.channels)), self.classes,
            head=self.head, lam=self.lam, mask_layers=mask_layers,
            dropout_rate=dropout_rate)


_SCHEMA = {
    "data": {"train_dir": str, "test_dir": str},
    "network": {"block_convs": "ints", "channels": "ints", "classes": int,
                "head": str, "lambda": float, "mask_layers": str, "dropout": float},
    "loss": {"variant": str, "gamma": float, "l2": float},
    "optimizer": {"alpha": float, "beta1": float, "beta2": float, "eps": float},
    "train": {"batch_size": int, "epochs": int, "eval_every": int, "seed": int,
              "metric": str},
    "output": {"out_dir": str},
}
_KEY_RENAMES = {("network", "lambda"): "lam"}


def parse_config(path) -> ExperimentConfig:
    """Read an experiment config file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kind = _SCHEMA[section][key]
            try:
                if kind == "ints":
                    val = tuple(int(t) for t in raw.split(","))
                else:
                    val = kind(raw)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
            values[_KEY_RENAMES.get((section, key), key)] = val
    missing = [k for k in ("train_dir", "test_dir", "out_dir", "seed") if k not in values]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, net: NetworkSpec, params: dict, adam: AdamState) -> None:
    """Single binary container: magic line, length-prefixed JSON header,
    then raw little-endian float64 blobs (values, then Adam moments)."""
    names = sorted(params)
    header = {
        "net": net_to_dict(net),
        "adam": {"alpha": adam.alpha, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps, "t": adam.t},
        "params": [{"name": n, "shape": list(params[n].value.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(params[n].value.astype("<f8").tobytes())
        for n in names:
            f.write(adam.m[n].astype("<f8").tobytes())
        for n in names:
            f.write(adam.v[n].astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (net, params, adam)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a COMPNET-CKPT-1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    net = net_from_dict(header["net"])
    entries = header["params"]

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        return arr.astype(np.float64)

    params = {e["name"]: Parameter(e["name"], take(e["shape"])) for e in entries}
    a = header["adam"]
    adam = AdamState(alpha=a["alpha"], beta1=a["beta1"], beta2=a["beta2"],
                     eps=a["eps"], t=a["t"])
    for e in entries:
        adam.m[e["name"]] = take(e["shape"])
    for e in entries:
        adam.v[e["name"]] = take(e["shape"])
    return net, params, adam


# -- evaluation ----------------------------------------------------------------


def evaluate_model(net: NetworkSpec, params: dict, samples, kind: str = None,
                   stratify: bool = False, localization: bool = False,
                   batch_size: int = 64) -> EvalReport:
    """Score a sample list with the metric family matching the head.

    kind "topk" works with either head; "ap" (per-class AP and mAP over
    independent binary problems) requires the independent_sigmoid head.
    """
    if kind is None:
        kind = "topk" if net.head == "joint_softmax" else "ap"
    if kind not in ("topk", "ap"):
        raise ConfigError(f"unknown metric kind {kind!r}")
    if kind == "ap" and net.head != "independent_sigmoid":
        raise ConfigError("AP evaluation requires the independent_sigmoid head; "
                          f"this network uses {net.head}")
    logits = network.predict_logits(net, params, [s.image for s in samples],
                                    batch_size=batch_size)
    report = EvalReport(kind=kind, n_samples=len(samples))

    def headline(idx_list):
        if kind == "topk":
            vals = [topk_accuracy(logits[i], set(samples[i].labels)) for i in idx_list]
            return {"topk_accuracy": float(np.mean(vals))}, None
        per_class = {}
        for c in range(net.output_classes()):
            labs = np.array([1 if c in samples[i].labels else 0 for i in idx_list])
            if labs.sum() == 0:
                continue
            scores = np.array([logits[i, c] for i in idx_list])
            per_class[c] = average_precision(scores, labs)
        return {"mAP": float(np.mean(list(per_class.values())))}, per_class

    report.metrics, report.per_class = headline(range(len(samples)))

    if stratify:
        bins = area_bins(samples)
        groups = stratify_by_area(samples, bins)
        strat = {}
        for bi, members in groups.items():
            idxs = sorted(set(si for si, _ in members))
            if not idxs:
                continue
            m, _ = headline(idxs)
            m["instances"] = len(members)
            strat[f"bin{bi}:{bins[bi][0]:.0f}-{bins[bi][1]:.0f}"] = m
        report.stratified = strat

    if localization:
        report.localization = localization_score(net, params, samples)
    return report


def localization_score(net: NetworkSpec, params: dict, samples) -> float:
    """Mean over categories of per-instance heatmap mass inside the
    ground-truth mask; all-zero heatmaps are skipped."""
    by_class = {}
    for s in samples:
        for k in range(s.K):
            heat = guided_backprop(net, params, s.image, s.labels[k])
            frac = localization_accuracy(heat, s.masks[k]) if heat.max() > 0 else None
            if frac is not None:
                by_class.setdefault(s.labels[k], []).append(frac)
    if not by_class:
        raise ValueError("no scorable instances for localization")
    return float(np.mean([np.mean(v) for v in by_class.values()]))


def evaluate_run(ckpt_path, dataset_dir, kind: str = None, stratify: bool = False,
                 localization: bool = False, context_class: int = None) -> EvalReport:
    """Load a checkpoint and dataset, then evaluate; optionally adds
    in/out-of-context AP for one class."""
    net, params, _ = load_checkpoint(ckpt_path)
    samples, _manifest = load_dataset(dataset_dir)
    report = evaluate_model(net, params, samples, kind=kind, stratify=stratify,
                            localization=localization)
    if context_class is not None:
        from .data import make_context_sets
        sets = make_context_sets(samples, context_class)
        for tag, positives in (("in_context", sets.in_context),
                               ("out_of_context", sets.out_of_context)):
            pool = positives + sets.negatives
            logits = network.predict_logits(net, params, [s.image for s in pool])
            labs = np.array([1] * len(positives) + [0] * len(sets.negatives))
            report.metrics[f"AP_{tag}_class{context_class}"] = average_precision(
                logits[:, context_class], labs)
    return report


# -- the training loop -----------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)   # {"epoch", "metric", "value"}
    best: dict = field(default_factory=dict)
    loss_trace: str = ""
    checkpoints: dict = field(default_factory=dict)
    aborted: dict = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        return cls(**d)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_run(config: ExperimentConfig) -> RunRecord:
    """Train from scratch per the config; returns the persisted RunRecord.

    Writes under out_dir: trace.csv (step, L_d, L_c, total, wall_ms),
    epochs.jsonl (append-only per-epoch reports), run.json (atomically
    rewritten), best.ckpt and last.ckpt.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, train_manifest = load_dataset(config.train_dir)
    test_samples, _ = load_dataset(config.test_dir)
    if not train_samples:
        raise ConfigError("training dataset is empty")

    input_shape = train_samples[0].image.shape
    net = config.network_spec(input_shape)
    loss_cfg = config.loss_config()
    ss = np.random.SeedSequence(config.seed)
    init_rng, shuffle_rng, step_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    params = network.init_params(net, init_rng)
    adam = init_adam(params, alpha=config.alpha, beta1=config.beta1,
                     beta2=config.beta2, eps=config.eps)

    record = RunRecord(config=config.to_dict(), loss_trace=str(out / "trace.csv"),
                       checkpoints={"last": str(out / "last.ckpt"),
                                    "best": str(out / "best.ckpt")})
    metric_key = "topk_accuracy" if config.metric == "topk" else "mAP"
    trace_path = out / "trace.csv"
    trace_path.write_text("step,L_d,L_c,total,wall_ms\n")
    epochs_path = out / "epochs.jsonl"
    epochs_path.write_text("")
    curve_path = out / "curve.csv"
    curve_path.write_text(f"epoch,{metric_key}\n")

    def persist():
        _write_atomic(out / "run.json", json.dumps(record.to_dict(), sort_keys=True,
                                                   indent=2) + "\n")

    def run_eval(epoch):
        report = evaluate_model(net, params, test_samples, kind=config.metric)
        value = report.metrics[metric_key]
        entry = {"epoch": epoch, "metric": metric_key, "value": value}
        record.epochs.append(entry)
        with open(epochs_path, "a") as f:
            f.write(json.dumps({**entry, "report": report.to_dict()},
                               sort_keys=True) + "\n")
        with open(curve_path, "a") as f:
            f.write(f"{epoch},{value!r}\n")
        if not record.best or value > record.best["value"]:
            record.best = dict(entry)
            save_checkpoint(out / "best.ckpt", net, params, adam)
        persist()

    run_eval(epoch=0)
    step = 0
    n = len(train_samples)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            breakdown, grads, wall_ms = timed_step(batch, net, params, loss_cfg,
                                                   step_rng)
            step += 1
            with open(trace_path, "a") as f:
                f.write(f"{step},{breakdown.discriminative!r},"
                        f"{breakdown.compositional!r},{breakdown.total!r},"
                        f"{wall_ms:.3f}\n")
            if not np.isfinite(breakdown.total):
                record.aborted = {"step": step, "loss": breakdown.total}
                persist()
                raise TrainingDiverged(step, breakdown.total)
            adam_step(adam, params, grads)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            run_eval(epoch)
    save_checkpoint(out / "last.ckpt", net, params, adam)
    persist()
    return record
