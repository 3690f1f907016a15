"""Command-line driver.

Subcommands: synth (dataset generation), train, eval, backtrace (guided
backprop heatmap to PNG), gradcheck. Exit codes: 0 success, 1 validation
failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compnet")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a masked-digit dataset from IDX files")
    sp.add_argument("--variant", choices=["single", "multi"], required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--images", required=True, help="IDX image file (optionally .gz)")
    sp.add_argument("--labels", required=True, help="IDX label file (optionally .gz)")
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--frame", type=int, default=120)
    sp.add_argument("--scale-lo", type=float, default=1.5)
    sp.add_argument("--scale-hi", type=float, default=3.0)
    sp.add_argument("--k-lo", type=int, default=2)
    sp.add_argument("--k-hi", type=int, default=3)
    sp.add_argument("--overlap-max", type=float, default=0.25)
    sp.add_argument("--name", default=None)

    tp = sub.add_parser("train", help="run a training experiment")
    tp.add_argument("--config", required=True)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--metrics", choices=["topk", "ap"], default=None)
    ep.add_argument("--stratify", action="store_true")
    ep.add_argument("--context", type=int, default=None, metavar="CLASS")
    ep.add_argument("--localization", action="store_true")

    bp = sub.add_parser("backtrace", help="guided-backprop heatmap for one image")
    bp.add_argument("--ckpt", required=True)
    bp.add_argument("--image", required=True)
    bp.add_argument("--class", dest="cls", type=int, required=True)
    bp.add_argument("--out", required=True)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gp.add_argument("--net", choices=["toy", "mnist"], default="toy")
    gp.add_argument("--tol", type=float, default=1e-4)
    gp.add_argument("--eps", type=float, default=1e-5)
    gp.add_argument("--variant", default="comp-full")
    return p


def _cmd_synth(args) -> int:
    from .data import SynthConfig, load_idx, save_dataset, synth_multi, synth_single

    digits, labels = load_idx(args.images, args.labels)
    cfg = SynthConfig(frame=args.frame, scale_range=(args.scale_lo, args.scale_hi))
    if args.variant == "single":
        samples = synth_single(digits, labels, args.n, args.seed, cfg,
                               split=args.split)
    else:
        samples = synth_multi(digits, labels, args.n, (args.k_lo, args.k_hi),
                              args.overlap_max, args.seed, cfg, split=args.split)
    name = args.name or f"digits-{args.variant}"
    classes = int(labels.max()) + 1
    save_dataset(samples, args.out, name, args.variant, classes, args.seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .train import parse_config, train_run

    config = parse_config(args.config)
    record = train_run(config)
    best = record.best
    print(f"finished: best {best.get('metric')} = {best.get('value'):.4f} "
          f"at epoch {best.get('epoch')}")
    return 0


def _cmd_eval(args) -> int:
    from .train import evaluate_run

    report = evaluate_run(args.ckpt, args.data, kind=args.metrics,
                          stratify=args.stratify, localization=args.localization,
                          context_class=args.context)
    print(report.to_json())
    return 0


def _cmd_backtrace(args) -> int:
    from PIL import Image

    from .metrics import guided_backprop, save_heatmap_png
    from .train import load_checkpoint

    net, params, _ = load_checkpoint(args.ckpt)
    img = np.asarray(Image.open(args.image).convert("L"), dtype=np.float64) / 255.0
    heat = guided_backprop(net, params, img[:, :, np.newaxis], args.cls)
    save_heatmap_png(heat, args.out)
    print(f"wrote heatmap to {args.out}")
    return 0


def _toy_gradcheck_sample(frame: int):
    """Deterministic 2-object scene for objective gradient checks."""
    from .data import Sample

    rng = np.random.default_rng(7)
    img = rng.uniform(0.0, 1.0, (frame, frame, 1))
    m1 = np.zeros((frame, frame))
    m1[1:frame // 2, 1:frame // 2] = 1.0
    m2 = np.zeros((frame, frame))
    m2[frame // 2:frame - 1, frame // 2:frame - 1] = 1.0
    return Sample(image=img, masks=[m1, m2], labels=[0, 2])


def _cmd_gradcheck(args) -> int:
    from .network import init_params, mnist_network_spec, toy_network_spec
    from .objective import LossConfig, build_step_graph
    from .tape import gradient_check

    if args.net == "toy":
        net = toy_network_spec()
    else:
        net = mnist_network_spec(head="independent_sigmoid")
    sample = _toy_gradcheck_sample(net.input_shape[0])
    params = init_params(net, np.random.default_rng(1))
    # Zero biases sit exactly on the relu kink inside masked-out regions,
    # where finite differences are undefined; check at a generic point.
    jitter = np.random.default_rng(2)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.value = p.value + jitter.uniform(0.05, 0.3, p.value.shape)
    config = LossConfig(variant=args.variant)

    def build(p):
        tape, total, param_nodes, _ = build_step_graph(
            [sample], net, p, config, np.random.default_rng(11))
        return tape, total, param_nodes

    report = gradient_check(build, params, eps=args.eps, tol=args.tol)
    print(report.format())
    return 0 if report.passed else 2


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "backtrace": _cmd_backtrace,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
