"""Train COMMA prompts on the default synthetic benchmark and save the run.

    python demos/quickstart.py [out_dir]

The first call pretrains the miniature backbone (about 20 s); everything after
that only touches the prompts.
"""

import sys

from comma_workbench.harness.records import save_record
from comma_workbench.harness.training import TrainConfig, train

out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart"

record, model = train(TrainConfig(seed=0))

for epoch, losses in enumerate(record.epoch_losses, 1):
    print(f"epoch {epoch}: ce {losses['ce']:.4f}  kd {losses['kd']:.4f}  total {losses['total']:.4f}")

acc = record.accuracy
print(f"base {acc['base']:.2f}  novel {acc['novel']:.2f}  hm {acc['hm']:.2f}")
print(f"learnable prompt parameters: {model.prompt_set.num_parameters()}")
print(f"backbone untouched: {record.backbone_checksum == record.backbone_checksum_end}")
print("saved", save_record(record, out_dir))
