"""Train a small network with the compositional objective and a baseline,
then compare their loss traces and test accuracy.

Kept deliberately tiny (a few hundred scenes, a few epochs) so it runs in
about a minute; the scaled trend experiments live in the acceptance suite.
"""

from pathlib import Path

from compnet import ExperimentConfig, train_run

OUT = Path(__file__).parent / "demo_out"
DATA = OUT / "digits-single"

if not (DATA / "manifest.json").exists():
    raise SystemExit("run 02_synthesize_dataset.py first")

# reuse the demo dataset for train and test; this is a smoke run, not an
# experiment
for variant in ("comp-full", "baseline"):
    config = ExperimentConfig(
        train_dir=str(DATA), test_dir=str(DATA),
        out_dir=str(OUT / f"run-{variant}"),
        seed=7, variant=variant, head="joint_softmax",
        block_convs=(1, 1), channels=(6, 12), classes=10,
        batch_size=8, epochs=3)
    record = train_run(config)
    trace = Path(record.loss_trace).read_text().strip().splitlines()
    first = trace[1].split(",")
    last = trace[-1].split(",")
    print(f"{variant:10s} step 1: L_d={float(first[1]):.4f} "
          f"L_c={float(first[2]):.4f}  ->  step {last[0]}: "
          f"L_d={float(last[1]):.4f} L_c={float(last[2]):.4f}")
    print(f"{'':10s} best top-k accuracy {record.best['value']:.3f} "
          f"at epoch {record.best['epoch']}")

print("\nartifacts: trace.csv, run.json, epochs.jsonl, best.ckpt, last.ckpt "
      f"under {OUT}/run-*")
