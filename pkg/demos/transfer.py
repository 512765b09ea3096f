"""Generalisation protocols on one trained model.

Base-to-novel: train on the first half of the classes, test on both halves.
Cross-dataset: evaluate on freshly generated datasets from the same concept
world without touching any parameter. Domain shift: perturb the source test
pool (pixel noise, contrast loss, dropped template words) at rising strength.
"""

from comma_workbench.harness.data import DatasetSpec
from comma_workbench.harness.training import SHIFT_KINDS, TrainConfig, cross_dataset_eval, domain_shift_eval, train

record, model = train(TrainConfig(seed=0))
acc = record.accuracy
print(f"base-to-novel   base {acc['base']:.2f}  novel {acc['novel']:.2f}  hm {acc['hm']:.2f}")

targets = [DatasetSpec(num_classes=n, seed=s, test_per_class=20) for n, s in ((6, 11), (10, 12), (16, 13))]
for spec, a in zip(targets, cross_dataset_eval(model, targets)):
    print(f"cross-dataset   {spec.num_classes:2d} classes (seed {spec.seed})  accuracy {a:.2f}")

for kind in SHIFT_KINDS:
    curve = [domain_shift_eval(model, kind, m) for m in (0.0, 0.25, 0.5, 0.75)]
    print(f"domain shift    {kind:13s} " + "  ".join(f"{a:6.2f}" for a in curve))
