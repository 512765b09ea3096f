"""How vision prompts are generated from the previous layer's text prompts.

Each deeper vision prompt is an attention read-out: the previous vision
prompts act as queries over keys and values projected from the previous text
prompts. Only the layer-0 vision seed and the two projections are learned on
the vision side. At these tiny widths the two projections outweigh a stack of
independent vision prompts, so the parameter table favours deep prompts here.
"""

import numpy as np

from comma_workbench.encoders import ModelConfig
from comma_workbench.harness.data import TEMPLATE_WORDS
from comma_workbench.harness.pretrain import pretrained_backbone
from comma_workbench.harness.training import TrainConfig
from comma_workbench.prompting import (
    Coupling, PromptStrategy, build_prompt_schedule, expected_parameter_count, init_prompt_set,
)

cfg = TrainConfig()
backbone = pretrained_backbone(cfg.model_config(), cfg.pretrain_config())
template = list(TEMPLATE_WORDS[:cfg.template_length])
depth, length = cfg.effective_depth(), cfg.prompt_length

strategy = PromptStrategy(Coupling.COMMA)
prompts = init_prompt_set(strategy, backbone, template, depth, length, seed=0)
schedule = build_prompt_schedule(strategy, prompts)

print("layer  text rows  vision rows  |vision|")
for i, (t, v) in enumerate(zip(schedule.text, schedule.vision)):
    print(f"{i:5d}  {t.shape}  {v.shape}  {np.linalg.norm(v.data):.4f}")

# the same read-out by hand for layer 1
q, kv = schedule.vision[0].data, schedule.text[0].data
scores = q @ (kv @ prompts.key_proj.data).T / np.sqrt(q.shape[1])
weights = np.exp(scores - scores.max(axis=1, keepdims=True))
weights /= weights.sum(axis=1, keepdims=True)
by_hand = weights @ (kv @ prompts.value_proj.data)
print("layer-1 read-out matches by hand:", np.allclose(by_hand, schedule.vision[1].data, atol=1e-12))
print("attention weights of layer 1:\n", np.round(weights, 4))

m = ModelConfig()
print("\nlearnable parameters at depth", depth)
for c in Coupling:
    d = 0 if c is Coupling.NONE else 1 if c is Coupling.COOP_TEXT else depth
    print(f"  {c.value:17s} {expected_parameter_count(c, d, length, m.text.width, m.vision.width)}")
