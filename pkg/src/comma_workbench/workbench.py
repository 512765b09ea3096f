"""Ablation sweeps, CSV reports and the prompt-distance vs. degradation analysis."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import numerics as nx
from .encoders import encode_texts
from .errors import ConfigError, ProvenanceError, StatisticsError, UsageError
from .harness.records import RunRecord, save_record
from .harness.training import TrainConfig, TrainedModel, accuracy, reference_bank, train_run
from .harness.data import gen_synth_dataset, split_base_novel
from .harness.pretrain import pretrained_backbone
from .objectives import ReferencePromptBank, kd_similarity, prompt_states
from .prompting import Coupling, PromptSet, PromptStrategy, build_prompt_schedule

SWEEP_PARAMS = {
    "S": "kd_layers",
    "lambda": "kd_weight",
    "λ": "kd_weight",
    "J": "prompt_depth",
    "M_p": "prompt_length",
    "strategy": "strategy",
}

REPORT_HEADER = ("strategy", "J", "M_p", "lambda", "S", "seed", "base", "novel", "hm")

SUMMARY_HEADER = ("param", "value", "runs", "failed", "base_mean", "base_std", "novel_mean", "novel_std",
                  "hm_mean", "hm_std", "best", "error")


@dataclass
class SweepSpec:
    param: str
    values: list
    base_config: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seeds_per_cell: int = 1

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"cannot sweep {self.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.seeds_per_cell < 1:
            raise ConfigError("sweep needs at least one seed per cell")
        self.values = [parse_value(self.param, v) for v in self.values]

    def cell_configs(self, value) -> list[TrainConfig]:
        field = SWEEP_PARAMS[self.param]
        return [self.base_config.replace(**{field: value, "seed": self.base_config.seed + i})
                for i in range(self.seeds_per_cell)]


def parse_value(param: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if param == "strategy":
            return Coupling(raw).value
        if param in ("lambda", "λ"):
            return float(raw)
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {param}") from None


def parse_values(param: str, text: str) -> list:
    return [parse_value(param, v) for v in text.split(",") if v.strip()]


@dataclass
class CellSummary:
    value: object
    records: list[RunRecord]
    errors: list[str]

    def stats(self, key):
        xs = [r.accuracy[key] for r in self.records if r.status == "ok"]
        if not xs:
            return math.nan, math.nan
        return float(np.mean(xs)), float(np.std(xs))


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: list[CellSummary]
    best: int | None
    summary_path: str | None = None
    record_paths: list[str] = dataclasses.field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for i, cell in enumerate(self.cells):
            row = {"param": self.spec.param, "value": cell.value, "runs": len(cell.records),
                   "failed": len(cell.errors) + sum(r.status != "ok" for r in cell.records)}
            for key in ("base", "novel", "hm"):
                row[f"{key}_mean"], row[f"{key}_std"] = cell.stats(key)
            row["best"] = int(i == self.best)
            row["error"] = "; ".join(cell.errors)
            out.append(row)
        return out


def run_sweep(spec: SweepSpec, out_dir=None, runner=train_run) -> SweepResult:
    """Run every (value, seed) cell; failures are recorded, not raised."""
    cells = []
    paths = []
    for value in spec.values:
        records, errors = [], []
        try:
            configs = spec.cell_configs(value)
        except ConfigError as err:
            configs, errors = [], [str(err)]
        for cfg in configs:
            try:
                rec = runner(cfg)
            except Exception as err:  # noqa: BLE001 - a failed cell must not stop the sweep
                errors.append(f"seed {cfg.seed}: {err}")
                continue
            records.append(rec)
            if out_dir is not None:
                paths.append(save_record(rec, out_dir))
        cells.append(CellSummary(value, records, errors))
    hms = [c.stats("hm")[0] for c in cells]
    valid = [i for i, h in enumerate(hms) if not math.isnan(h)]
    best = max(valid, key=lambda i: hms[i]) if valid else None
    result = SweepResult(spec, cells, best, record_paths=paths)
    if out_dir is not None:
        result.summary_path = os.path.join(out_dir, f"summary_{_slug(spec.param)}.csv")
        _write_csv(result.summary_path, SUMMARY_HEADER, [[r[k] for k in SUMMARY_HEADER] for r in result.rows()])
        _write_series(os.path.join(out_dir, f"curve_hm_vs_{_slug(spec.param)}.dat"),
                      [(f"{spec.param} base novel hm", [(c.value, *(c.stats(k)[0] for k in ("base", "novel", "hm")))
                                                        for c in cells])])
    return result


def _slug(param):
    return {"λ": "lambda"}.get(param, param)


def summary_from_records(records, param: str) -> dict:
    """Recompute per-value (mean, std) of base/novel/hm from persisted records."""
    field = SWEEP_PARAMS[param]
    groups: dict = {}
    for r in records:
        if r.status == "ok":
            groups.setdefault(r.config[field], []).append(r)
    return {v: {k: (float(np.mean([r.accuracy[k] for r in rs])), float(np.std([r.accuracy[k] for r in rs])))
                for k in ("base", "novel", "hm")} for v, rs in groups.items()}


# --------------------------------------------------------------------------- reports


def _fmt(x):
    """Shortest round-tripping text for floats (numpy scalars included)."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _write_series(path, series):
    """Whitespace-separated x/y blocks, one per series, separated by blank lines."""
    with open(path, "w") as fh:
        for i, (label, points) in enumerate(series):
            if i:
                fh.write("\n\n")
            fh.write(f"# {label}\n")
            for pt in points:
                fh.write(" ".join(_fmt(float(v)) for v in pt) + "\n")


def read_series(path) -> list[tuple[str, np.ndarray]]:
    blocks, label, rows = [], None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                if label is not None:
                    blocks.append((label, np.array(rows)))
                label, rows = line[1:].strip(), []
            elif line:
                rows.append([float(v) for v in line.split()])
    if label is not None:
        blocks.append((label, np.array(rows)))
    return blocks


def report_row(record: RunRecord) -> tuple:
    cfg = TrainConfig.from_mapping(record.config)
    kd = cfg.prompt_strategy().kd_enabled
    acc = record.accuracy or {"base": math.nan, "novel": math.nan, "hm": math.nan}
    return (cfg.strategy, cfg.effective_depth(), cfg.prompt_length, cfg.kd_weight if kd else 0.0,
            cfg.kd_layers if kd else 0, cfg.seed, acc["base"], acc["novel"], acc["hm"])


def emit_report(records, out_dir, analysis=None) -> dict:
    """Write ``runs.csv`` (one sorted row per record) plus plot-data series.

    ``fig4.dat`` holds mean base/novel/hm per distillation depth S; when
    ``analysis`` rows are given, ``fig3.dat`` holds one distance/ΔAcc series per layer.
    """
    records = list(records)
    if not records:
        raise UsageError("no run records to report")
    os.makedirs(out_dir, exist_ok=True)
    rows = sorted(report_row(r) for r in records)
    paths = {"csv": os.path.join(out_dir, "runs.csv")}
    _write_csv(paths["csv"], REPORT_HEADER, rows)
    by_s: dict = {}
    for row in rows:
        if not math.isnan(row[8]):
            by_s.setdefault(row[4], []).append(row[6:9])
    paths["fig4"] = os.path.join(out_dir, "fig4.dat")
    _write_series(paths["fig4"], [("S base novel hm",
                                   [(s, *np.mean(v, axis=0)) for s, v in sorted(by_s.items())])])
    if analysis:
        layers = sorted({a.layer for a in analysis})
        paths["fig3"] = os.path.join(out_dir, "fig3.dat")
        _write_series(paths["fig3"], [(f"layer {s}: distance delta_acc",
                                       [(a.distance, a.delta_acc) for a in analysis if a.layer == s])
                                      for s in layers])
    return paths


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("J", "M_p", "S", "seed"):
            row[key] = int(row[key])
        for key in ("lambda", "base", "novel", "hm"):
            row[key] = float(row[key])
    return rows


# --------------------------------------------------------------------------- distance analysis


@dataclass(frozen=True)
class AnalysisRow:
    layer: int
    distance: float
    delta_acc: float

    def __post_init__(self):
        if not 0.0 <= self.distance <= 2.0:
            raise StatisticsError(f"cosine distance {self.distance} outside [0, 2]")


def prompt_distance(prompt_rows: nx.Tensor, reference) -> float:
    """1 - cosine(mean prompt row, reference), clipped to [0, 2] against rounding."""
    ref = reference if isinstance(reference, nx.Tensor) else nx.Tensor(reference)
    with nx.no_grad():
        d = 1.0 - kd_similarity(prompt_rows, ref).item()
    return min(2.0, max(0.0, d))


def distance_profile(record: RunRecord, bank: ReferencePromptBank, baseline_novel: float = 0.0,
                     backbone=None) -> list[AnalysisRow]:
    """Per-layer distance of the recorded text prompts to the reference template.

    Prompted layers read the checkpoint directly. Deeper layers need the
    propagated prompt states, so they are included only when ``backbone`` is
    given. ``delta_acc`` is the novel-accuracy drop relative to ``baseline_novel``.
    """
    if bank.backbone_checksum != record.backbone_checksum:
        raise ProvenanceError("reference bank and run record come from different backbones")
    if not record.prompt_checkpoint:
        raise ConfigError("record holds no prompt checkpoint")
    cfg = TrainConfig.from_mapping(record.config)
    prompts = PromptSet.from_state(cfg.strategy, record.prompt_checkpoint)
    if not prompts.text_prompts:
        return []
    novel = record.accuracy.get("novel", math.nan) if record.accuracy else math.nan
    delta = baseline_novel - novel
    layers = range(len(prompts.text_prompts))
    states = {s: prompts.text_prompts[s] for s in layers}
    if backbone is not None:
        if backbone.checksum() != bank.backbone_checksum:
            raise ProvenanceError("backbone does not match the reference bank")
        dataset = gen_synth_dataset(cfg.dataset_spec(), backbone.config)
        captions = dataset.class_captions(split_base_novel(range(dataset.num_classes)).base)
        sched = build_prompt_schedule(cfg.prompt_strategy(), prompts)
        with nx.no_grad():
            _, hidden = encode_texts(backbone, captions, sched.text, return_hidden=True)
            for s in range(len(bank.vectors)):
                states[s] = prompt_states(sched.text, hidden, s)
    return [AnalysisRow(s, prompt_distance(states[s], bank.vectors[s]), delta) for s in sorted(states)]


def baseline_novel_accuracy(config: TrainConfig) -> float:
    """Novel accuracy of the untouched backbone with the hand-written template."""
    model_cfg = config.model_config()
    backbone = pretrained_backbone(model_cfg, config.pretrain_config())
    dataset = gen_synth_dataset(config.dataset_spec(), model_cfg)
    strategy = PromptStrategy(Coupling.NONE, kd_enabled=False)
    model = TrainedModel(config.replace(strategy="none", kd=False), backbone, PromptSet(Coupling.NONE),
                         strategy, dataset)
    return accuracy(model, dataset.test, split_base_novel(range(dataset.num_classes)).novel)


def correlation(xs, ys) -> tuple[float, float]:
    """(Pearson, Spearman) correlation of two equal-length samples."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise StatisticsError("samples must be 1-D and of equal length")
    if xs.size < 3:
        raise StatisticsError("correlation needs at least 3 points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise StatisticsError("correlation is undefined for a constant sample")
    return _snap(stats.pearsonr(xs, ys)[0]), _snap(stats.spearmanr(xs, ys)[0])


_SNAP = 16 * np.finfo(float).eps


def _snap(r) -> float:
    """Clip to [-1, 1]; values within a few ulps of ±1 are exact linear relations."""
    r = float(np.clip(r, -1.0, 1.0))
    return math.copysign(1.0, r) if 1.0 - abs(r) <= _SNAP else r


def analyze(records) -> tuple[list[AnalysisRow], list[dict]]:
    """Distance profiles of all prompted records and the per-layer correlation with ΔAcc."""
    rows = []
    for rec in records:
        cfg = TrainConfig.from_mapping(rec.config)
        if rec.status != "ok" or Coupling(cfg.strategy) is Coupling.NONE:
            continue
        backbone = pretrained_backbone(cfg.model_config(), cfg.pretrain_config())
        bank = reference_bank(backbone, gen_synth_dataset(cfg.dataset_spec(), cfg.model_config()))
        rows.extend(distance_profile(rec, bank, baseline_novel_accuracy(cfg), backbone))
    table = []
    for layer in sorted({r.layer for r in rows}):
        pts = [r for r in rows if r.layer == layer]
        entry = {"layer": layer, "points": len(pts), "pearson": math.nan, "spearman": math.nan}
        try:
            entry["pearson"], entry["spearman"] = correlation([p.distance for p in pts], [p.delta_acc for p in pts])
        except StatisticsError:
            pass
        table.append(entry)
    return rows, table
