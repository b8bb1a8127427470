"""Train a teacher, then distill small students with and without the quantum term.

Uses synthetic 28x28 blobs so it runs in about a minute without MNIST. Pass
an MNIST directory as the first argument to use real data instead.

Run: python demos/distillation_quickstart.py [MNIST_DIR]
"""
import sys
from dataclasses import replace

from qrkd import distill
from qrkd.distill import DatasetConfig, DistillConfig

if len(sys.argv) > 1:
    dataset = DatasetConfig(source="mnist", mnist_dir=sys.argv[1], train_size=2000, test_size=500)
else:
    dataset = DatasetConfig(source="synthetic", train_size=1000, test_size=250, synthetic_spread=0.15)
config = DistillConfig(epochs=3, lr=3e-3, dataset=dataset, seed=1)
train, test = distill.load_datasets(config)

teacher, t_metrics = distill.train_teacher(config, train, test)
print(f"teacher: train {t_metrics.train_acc:.1f}%  test {t_metrics.test_acc:.1f}%  "
      f"({t_metrics.param_count} parameters)")

runs = []
for variant in ("scratch", "KD", "RKD", "QRKD"):
    _, m = distill.distill_student(replace(config, variant=variant), train, test, teacher=teacher)
    runs.append(m)
    losses = " ".join(f"{e.total:.3f}" for e in m.epoch_losses)
    print(f"{variant:>8}: epoch losses {losses}")

runs, _ = distill.compute_metrics(runs, [r for r in runs if r.variant == "scratch"], t_metrics)
for r in runs:
    gain = "" if r.dist_gain is None else f"  gain over scratch {r.dist_gain:+.1f}"
    print(f"{r.variant:>8}: test {r.test_acc:.1f}%  teacher-student gap {r.ts_gap:.1f}{gain}")
