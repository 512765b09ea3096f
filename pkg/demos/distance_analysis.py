"""Does prompt drift away from the template predict lost novel accuracy?

For every trained run, each layer's text prompt is compared with the
template's hidden state at that layer (distance = 1 - cosine). The gain in
novel accuracy over the unprompted backbone is then correlated with those
distances across runs, layer by layer.
"""

from comma_workbench.harness.training import TrainConfig, train_run
from comma_workbench.workbench import analyze

records = [train_run(TrainConfig(seed=s, kd_weight=w, epochs=3)) for s in range(3) for w in (0.0, 1.0)]
rows, table = analyze(records)

print("layer  runs  pearson  spearman")
for t in table:
    print(f"{t['layer']:5d}  {t['points']:4d}  {t['pearson']:+.3f}   {t['spearman']:+.3f}")
