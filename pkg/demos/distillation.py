"""Keeping text prompts close to the pretrained template.

The distillation term rewards cosine agreement between each of the last
``kd_layers`` text prompts and the pooled hidden state that the bare template
produces at the same layer. With weight 0 the prompts drift freely; with
weight 1 they stay anchored. The accuracy cost or benefit is printed too.
"""

from comma_workbench.harness.training import TrainConfig, train_run

for weight in (0.0, 1.0):
    rec = train_run(TrainConfig(seed=0, kd_weight=weight))
    sims = " ".join(f"{s:+.3f}" for s in rec.prompt_similarity)
    print(f"weight {weight}: per-layer similarity [{sims}]")
    print(f"           distilled-layer mean {rec.final_kd_similarity:.4f}  hm {rec.accuracy['hm']:.2f}")
