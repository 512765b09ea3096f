"""Sweep the number of distilled layers and write the report files.

    python demos/sweep_and_report.py [out_dir]

Each (value, seed) cell becomes one write-once JSON record named by its content
hash, so re-running the sweep reproduces the same filenames. The summary CSV
marks the best cell by mean HM; the report adds per-run rows and the curves.
"""

import sys

from comma_workbench.harness.records import load_record
from comma_workbench.workbench import SweepSpec, emit_report, run_sweep

out = sys.argv[1] if len(sys.argv) > 1 else "runs/sweep_S"

result = run_sweep(SweepSpec("S", [0, 1, 2, 4, 6], seeds_per_cell=2), out)
for row in result.rows():
    flag = " <- best" if row["best"] else ""
    print(f"S={row['value']}  hm {row['hm_mean']:.2f} +- {row['hm_std']:.2f}  ({row['runs']} runs){flag}")

records = [load_record(p) for p in sorted(set(result.record_paths))]
for name, path in emit_report(records, f"{out}/report").items():
    print(f"{name:6s} {path}")
