"""Experiment orchestration: configs, corpus/train/sweep/eval commands,
report generation and verification.

A workspace directory holds one subdirectory per experiment name:

    <out>/<name>/corpus/...           manifest, speakers, features
    <out>/<name>/checkpoints/...      base.rntc, ft-<plan_key>.rntc
    <out>/<name>/hyps/...             decoded test hypotheses (JSONL)
    <out>/<name>/results.jsonl        RunRecords, appended, resumable
    <out>/<name>/reports/...          table1.csv, fig2_curve.csv, ...

Sweep cells are independent jobs keyed by a plan hash; the results log
is append-only through the single parent process, so parallel and
serial execution produce identical content (modulo wall-clock fields).
"""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as ana
from .errors import ConfigError, DataError
from .features import FeatureConfig, NoiseConfig
from .lexicon import Lexicon, builtin_lexicon, load_lexicon
from .model import (
    ModelCheckpoint,
    ModelConfig,
    Vocab,
    init_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .synthdata import (
    BudgetSpec,
    ConditionSpec,
    CorpusSpec,
    Manifest,
    build_corpus,
    load_manifest,
    load_speakers,
)
from .train import (
    EvalResult,
    FinetunePlan,
    FreezeMask,
    HyperParams,
    RunRecord,
    append_records,
    cell_seed,
    default_mask_family,
    evaluate_checkpoint,
    finetune,
    load_records,
    relative_improvement,
    train_base,
)

ENV_SEED = "ASRLAB_SEED"
ENV_WORKERS = "ASRLAB_WORKERS"
ENV_OUT = "ASRLAB_OUT"


def severity_band(condition: str, severity: float) -> str:
    """Group label: typical / moderate (FRS-3 analog) / severe (FRS 1-2)."""
    if condition == "typical" or severity == 0.0:
        return "typical"
    if severity <= 0.55:
        return f"{condition}-moderate"
    return f"{condition}-severe"


@dataclass
class SweepBlock:
    masks: list[FreezeMask]
    budgets: list[str | float]  # "all", seconds, or "NN%"


@dataclass
class ExperimentConfig:
    name: str
    master_seed: int = 42
    lexicon: str = "builtin"
    corpus: CorpusSpec | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    base_hyper: HyperParams = field(default_factory=HyperParams)
    finetune_hyper: HyperParams = field(default_factory=HyperParams)
    base_from: str | None = None
    sweeps: list[SweepBlock] = field(default_factory=list)
    analysis_mask: FreezeMask | None = None
    standard_hyps: str | None = None  # relative to the workspace root

    def load_lexicon(self) -> Lexicon:
        if self.lexicon == "builtin":
            return builtin_lexicon()
        return load_lexicon(self.lexicon)


def _parse_mask(value, layers: int) -> list[FreezeMask]:
    if value == "default_family":
        return default_mask_family(layers)
    if isinstance(value, list) and value and isinstance(value[0], list):
        return [FreezeMask(frozenset(m)) for m in value]
    if isinstance(value, list):
        return [FreezeMask(frozenset(value))]
    raise ConfigError(f"cannot parse mask spec {value!r}")


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read a JSON experiment config; flag/env seed overrides win."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    name = raw.get("name") or path.stem
    seed = seed_override
    if seed is None and os.environ.get(ENV_SEED):
        seed = int(os.environ[ENV_SEED])
    if seed is None:
        seed = int(raw.get("master_seed", 42))

    model = ModelConfig(**raw.get("model", {}))
    corpus = None
    if "corpus" in raw:
        c = dict(raw["corpus"])
        conditions = []
        for spec in c.pop("conditions"):
            sev = spec.get("severity", [0.0, 0.0])
            if not isinstance(sev, list):
                sev = [sev, sev]
            conditions.append(
                ConditionSpec(
                    condition=spec["condition"],
                    n_speakers=int(spec["n_speakers"]),
                    severity_lo=float(sev[0]),
                    severity_hi=float(sev[1]),
                )
            )
        noise = c.pop("train_noise", None)
        train_noise = NoiseConfig(**noise) if noise else None
        corpus = CorpusSpec(
            conditions=tuple(conditions),
            sentences_per_speaker=int(c.pop("sentences_per_speaker")),
            master_seed=seed,
            sample_rate=int(c.pop("sample_rate", 16000)),
            train_noise=train_noise,
        )
        if c:
            raise ConfigError(f"unknown corpus fields: {sorted(c)}")

    sweeps = []
    for block in raw.get("sweeps", []):
        sweeps.append(
            SweepBlock(
                masks=_parse_mask(block.get("masks", "default_family"), model.encoder_layers),
                budgets=list(block.get("budgets", ["all"])),
            )
        )
    analysis_mask = None
    if raw.get("analysis_mask"):
        analysis_mask = FreezeMask(frozenset(raw["analysis_mask"]))
    return ExperimentConfig(
        name=name,
        master_seed=seed,
        lexicon=raw.get("lexicon", "builtin"),
        corpus=corpus,
        model=model,
        base_hyper=HyperParams(**{**raw.get("base_hyper", {}), "seed": seed}),
        finetune_hyper=HyperParams(**raw.get("finetune_hyper", {})),
        base_from=raw.get("base_from"),
        sweeps=sweeps,
        analysis_mask=analysis_mask,
        standard_hyps=raw.get("standard_hyps"),
    )


@dataclass
class Workspace:
    root: Path
    name: str

    @property
    def exp_dir(self) -> Path:
        return self.root / self.name

    @property
    def corpus_dir(self) -> Path:
        return self.exp_dir / "corpus"

    @property
    def manifest_path(self) -> Path:
        return self.corpus_dir / "manifest.jsonl"

    @property
    def base_ckpt(self) -> Path:
        return self.exp_dir / "checkpoints" / "base.rntc"

    def ft_ckpt(self, plan_key: str) -> Path:
        return self.exp_dir / "checkpoints" / f"ft-{plan_key}.rntc"

    @property
    def results_path(self) -> Path:
        return self.exp_dir / "results.jsonl"

    @property
    def hyps_dir(self) -> Path:
        return self.exp_dir / "hyps"

    @property
    def reports_dir(self) -> Path:
        return self.exp_dir / "reports"


def workspace(out_root, cfg: ExperimentConfig) -> Workspace:
    return Workspace(root=Path(out_root), name=cfg.name)


def save_hypotheses(path, hyps: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for h in hyps:
            fh.write(json.dumps(h, sort_keys=True) + "\n")


def load_hypotheses(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"hypotheses file {path} not found")
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: ExperimentConfig, out_root) -> Manifest:
    """Build (or reuse) the corpus for a config. Deterministic per seed."""
    if cfg.corpus is None:
        raise ConfigError(f"config {cfg.name} has no corpus section")
    ws = workspace(out_root, cfg)
    if ws.manifest_path.exists():
        return load_manifest(ws.manifest_path)
    lexicon = cfg.load_lexicon()
    feature_cfg = FeatureConfig(mel_bins=cfg.model.mel_bins)
    manifest, _ = build_corpus(cfg.corpus, lexicon, ws.corpus_dir, feature_cfg)
    return manifest


def _base_checkpoint_path(cfg: ExperimentConfig, out_root) -> Path:
    if cfg.base_from:
        return Workspace(root=Path(out_root), name=cfg.base_from).base_ckpt
    return workspace(out_root, cfg).base_ckpt


def cmd_train_base(cfg: ExperimentConfig, out_root) -> RunRecord:
    """Train the base model on this config's corpus; resume if present."""
    ws = workspace(out_root, cfg)
    if cfg.base_from:
        raise ConfigError(f"config {cfg.name} uses base_from={cfg.base_from}; nothing to train")
    manifest = cmd_synth(cfg, out_root)
    existing = {r.plan_key: r for r in load_records(ws.results_path) if r.kind == "base"}
    if ws.base_ckpt.exists() and existing:
        return next(iter(existing.values()))
    init = init_checkpoint(
        cfg.model, Vocab.graphemes(), FeatureConfig(mel_bins=cfg.model.mel_bins), seed=cfg.master_seed
    )
    ckpt, record = train_base(manifest, ws.corpus_dir, init, cfg.base_hyper)
    ws.base_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, ws.base_ckpt)
    record.checkpoint = str(ws.base_ckpt.relative_to(ws.exp_dir))
    reloaded = load_checkpoint(ws.base_ckpt)
    result = evaluate_checkpoint(reloaded, manifest, ws.corpus_dir, "test")
    record.test_wer = result.macro_wer
    save_hypotheses(ws.hyps_dir / "base-test.jsonl", result.hypotheses)
    append_records(ws.results_path, [record])
    return record


def _evaluate_base_on_condition(cfg: ExperimentConfig, out_root) -> EvalResult:
    ws = workspace(out_root, cfg)
    base_path = _base_checkpoint_path(cfg, out_root)
    if not base_path.exists():
        raise DataError(f"base checkpoint {base_path} not found (run train-base first)")
    base = load_checkpoint(base_path)
    manifest = load_manifest(ws.manifest_path)
    hyp_path = ws.hyps_dir / "base-test.jsonl"
    summary_path = ws.hyps_dir / "base-test-summary.json"
    if hyp_path.exists() and summary_path.exists():
        with open(summary_path) as fh:
            summary = json.load(fh)
        return EvalResult(
            hypotheses=load_hypotheses(hyp_path),
            per_speaker=summary["per_speaker"],
            macro_wer=summary["macro_wer"],
            micro=summary["micro"],
        )
    result = evaluate_checkpoint(base, manifest, ws.corpus_dir, "test")
    save_hypotheses(hyp_path, result.hypotheses)
    with open(summary_path, "w") as fh:
        json.dump(
            {"per_speaker": result.per_speaker, "macro_wer": result.macro_wer, "micro": result.micro},
            fh, sort_keys=True, indent=1,
        )
    return result


def resolve_budget(value, manifest: Manifest, speaker_id: str, seed: int) -> tuple[BudgetSpec, str]:
    """Turn 'all' / seconds / 'NN%' into a concrete BudgetSpec + label."""
    if value == "all":
        return BudgetSpec("all", seed), "all"
    if isinstance(value, str) and value.endswith("%"):
        frac = float(value[:-1]) / 100.0
        if not 0 < frac <= 1:
            raise ConfigError(f"budget percentage {value!r} out of range")
        total = sum(r.duration_s for r in manifest.for_speaker(speaker_id, "train"))
        return BudgetSpec(round(total * frac, 3), seed), value
    return BudgetSpec(float(value), seed), f"{float(value):g}s"


@dataclass(frozen=True)
class SweepCell:
    plan: FinetunePlan
    budget_label: str
    base_wer: float


def _plan_cells(cfg: ExperimentConfig, out_root, base_eval: EvalResult) -> list[SweepCell]:
    ws = workspace(out_root, cfg)
    manifest = load_manifest(ws.manifest_path)
    base_ref = str(_base_checkpoint_path(cfg, out_root))
    cells: dict[str, SweepCell] = {}
    for block in cfg.sweeps:
        for speaker_id in manifest.speakers:
            for mask in block.masks:
                for budget_value in block.budgets:
                    budget, label = resolve_budget(
                        budget_value, manifest, speaker_id, cfg.master_seed
                    )
                    hyper = HyperParams(
                        **{
                            **cfg.finetune_hyper.to_dict(),
                            "seed": cell_seed(cfg.master_seed, speaker_id, mask, budget),
                        }
                    )
                    plan = FinetunePlan(
                        base_ref=base_ref, speaker_id=speaker_id,
                        budget=budget, mask=mask, hyper=hyper,
                    )
                    cells.setdefault(
                        plan.key,
                        SweepCell(plan=plan, budget_label=label,
                                  base_wer=base_eval.per_speaker[speaker_id]["wer"]),
                    )
    return [cells[k] for k in sorted(cells)]


def _run_cell(args: tuple) -> dict:
    """Worker: one finetune cell. Loads inputs from disk, saves outputs."""
    corpus_dir, exp_dir, plan_dict, budget_label, base_wer = args
    plan = FinetunePlan(
        base_ref=plan_dict["base_ref"],
        speaker_id=plan_dict["speaker_id"],
        budget=BudgetSpec(plan_dict["budget_s"], plan_dict["selection_seed"]),
        mask=FreezeMask(frozenset(plan_dict["mask"])),
        hyper=HyperParams(**plan_dict["hyper"]),
    )
    base = load_checkpoint(plan.base_ref)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    try:
        ckpt, record = finetune(plan, manifest, corpus_dir, base, base_speaker_wer=base_wer)
    except Exception as exc:  # record, never abort the sweep
        record = RunRecord(kind="finetune", plan=plan.to_dict(), plan_key=plan.key,
                           error=f"{type(exc).__name__}: {exc}")
        record.plan["budget_label"] = budget_label
        return record.to_dict()
    ckpt_path = Path(exp_dir) / "checkpoints" / f"ft-{plan.key}.rntc"
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, ckpt_path)
    record.checkpoint = f"checkpoints/ft-{plan.key}.rntc"
    reloaded = load_checkpoint(ckpt_path)
    speaker_manifest = Manifest(manifest.for_speaker(plan.speaker_id))
    result = evaluate_checkpoint(reloaded, speaker_manifest, corpus_dir, "test")
    record.test_wer = result.speaker_wer(plan.speaker_id)
    record.rel_improvement = relative_improvement(record.base_test_wer, record.test_wer)
    hyp_path = Path(exp_dir) / "hyps" / f"ft-{plan.key}-test.jsonl"
    save_hypotheses(hyp_path, result.hypotheses)
    record.plan["budget_label"] = budget_label
    return record.to_dict()


def cmd_sweep(cfg: ExperimentConfig, out_root, workers: int = 1) -> list[RunRecord]:
    """Run every configured sweep cell; resumable and order-independent."""
    if not cfg.sweeps:
        raise ConfigError(f"config {cfg.name} defines no sweeps")
    ws = workspace(out_root, cfg)
    if not ws.manifest_path.exists():
        raise DataError(f"corpus for {cfg.name} missing (run synth first)")
    base_eval = _evaluate_base_on_condition(cfg, out_root)
    cells = _plan_cells(cfg, out_root, base_eval)
    done = {r.plan_key for r in load_records(ws.results_path)}
    todo = [c for c in cells if c.plan.key not in done]
    payloads = [
        (str(ws.corpus_dir), str(ws.exp_dir), c.plan.to_dict(), c.budget_label, c.base_wer)
        for c in todo
    ]
    if workers > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]
    new_records = [RunRecord.from_dict(d) for d in results]
    append_records(ws.results_path, new_records)
    return load_records(ws.results_path)


def cmd_finetune(cfg: ExperimentConfig, out_root, speaker_id: str,
                 mask: FreezeMask, budget_value) -> RunRecord:
    """Single finetune cell via the same path as sweeps."""
    ws = workspace(out_root, cfg)
    manifest = load_manifest(ws.manifest_path)
    if speaker_id not in manifest.speakers:
        raise DataError(f"speaker {speaker_id!r} not in manifest")
    base_eval = _evaluate_base_on_condition(cfg, out_root)
    budget, label = resolve_budget(budget_value, manifest, speaker_id, cfg.master_seed)
    hyper = HyperParams(**{**cfg.finetune_hyper.to_dict(),
                           "seed": cell_seed(cfg.master_seed, speaker_id, mask, budget)})
    plan = FinetunePlan(base_ref=str(_base_checkpoint_path(cfg, out_root)),
                        speaker_id=speaker_id, budget=budget, mask=mask, hyper=hyper)
    done = {r.plan_key for r in load_records(ws.results_path)}
    if plan.key in done:
        return next(r for r in load_records(ws.results_path) if r.plan_key == plan.key)
    record = RunRecord.from_dict(
        _run_cell((str(ws.corpus_dir), str(ws.exp_dir), plan.to_dict(), label,
                   base_eval.per_speaker[speaker_id]["wer"]))
    )
    append_records(ws.results_path, [record])
    return record


def cmd_eval(ckpt_path, manifest_path, corpus_dir, split: str, hyps_out=None) -> dict:
    """Decode a split and report macro/micro WER."""
    ckpt = load_checkpoint(ckpt_path)
    manifest = load_manifest(manifest_path)
    result = evaluate_checkpoint(ckpt, manifest, corpus_dir, split)
    if hyps_out:
        save_hypotheses(hyps_out, result.hypotheses)
    return {
        "split": split,
        "macro_wer": result.macro_wer,
        "micro": result.micro,
        "per_speaker": result.per_speaker,
        "n_utterances": len(result.hypotheses),
    }


# ---------------------------------------------------------------- analysis

def _profile_from_hyps(hyps: list[dict], lexicon: Lexicon) -> ana.ErrorProfile:
    alignments = []
    oov = 0
    for h in hyps:
        ref_seq, ref_oov = ana.to_phonemes(h["ref"].split(), lexicon)
        hyp_seq, hyp_oov = ana.to_phonemes(h["hyp"].split(), lexicon)
        if ref_seq is None or hyp_seq is None:
            oov += 1
            continue
        alignments.append(ana.phoneme_align(ref_seq, hyp_seq))
    if not alignments:
        raise DataError("no analyzable utterances (all OOV?)")
    return ana.error_profile(alignments, lexicon.inventory, oov_utterances=oov)


def _analysis_ft_hyps(cfg: ExperimentConfig, ws: Workspace) -> list[dict]:
    """Pool finetuned hypotheses (analysis mask, full budget) over speakers."""
    mask = cfg.analysis_mask or FreezeMask(
        frozenset(list(ws_encoder_groups(cfg)) + ["joint"])
    )
    records = [
        r
        for r in load_records(ws.results_path)
        if r.kind == "finetune"
        and r.error is None
        and sorted(r.plan["mask"]) == sorted(mask.trainable)
        and r.plan.get("budget_label") == "all"
    ]
    if not records:
        raise DataError("no finetune records match the analysis mask at full budget")
    hyps: list[dict] = []
    for r in records:
        hyps.extend(load_hypotheses(ws.hyps_dir / f"ft-{r.plan_key}-test.jsonl"))
    return hyps


def ws_encoder_groups(cfg: ExperimentConfig) -> list[str]:
    return [f"enc.{i}" for i in range(cfg.model.encoder_layers)]


def cmd_analyze(cfg: ExperimentConfig, out_root) -> dict:
    """Phoneme-level error analysis: base vs finetuned vs standard speech."""
    ws = workspace(out_root, cfg)
    lexicon = cfg.load_lexicon()
    std_path = (
        Path(out_root) / cfg.standard_hyps
        if cfg.standard_hyps
        else Workspace(Path(out_root), cfg.base_from or cfg.name).hyps_dir / "base-test.jsonl"
    )
    standard = _profile_from_hyps(load_hypotheses(std_path), lexicon)
    condition_base = _profile_from_hyps(
        load_hypotheses(ws.hyps_dir / "base-test.jsonl"), lexicon
    )
    condition_ft = _profile_from_hyps(_analysis_ft_hyps(cfg, ws), lexicon)
    report = ana.compare_profiles(standard, condition_base, condition_ft)
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    with open(ws.reports_dir / "analysis.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    _write_csv(
        ws.reports_dir / "fig3_phoneme_miss.csv",
        ["phoneme", "miss_standard", "miss_base", "miss_finetuned"],
        [
            [row["phoneme"], row["miss_standard"], row["miss_base"], row["miss_finetuned"]]
            for row in report["per_phoneme"]
        ],
    )
    for tag, prof in (("standard", standard), ("base", condition_base), ("finetuned", condition_ft)):
        _write_csv(
            ws.reports_dir / f"profile_{tag}.csv",
            ["phoneme", "gt_count", "del", "sub_out", "sub_in", "ins", "miss_rate"],
            [
                [
                    p,
                    prof.gt_counts.get(p, 0),
                    prof.del_counts.get(p, 0),
                    prof.sub_out_counts.get(p, 0),
                    prof.sub_in_counts.get(p, 0),
                    prof.ins_counts.get(p, 0),
                    f"{prof.miss_rate(p):.6f}",
                ]
                for p in prof.inventory
            ],
        )
    return report


# ----------------------------------------------------------------- reports

def _write_csv(path, header: list[str], rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _finetune_records(records: list[RunRecord]) -> list[RunRecord]:
    out = []
    seen: dict[str, RunRecord] = {}
    for r in records:
        if r.kind != "finetune":
            continue
        if r.plan_key in seen:
            a, b = seen[r.plan_key].to_dict(), r.to_dict()
            a.pop("wall_s"), b.pop("wall_s")
            if a != b:
                raise DataError(f"duplicate plan {r.plan_key} with conflicting metrics")
            continue
        seen[r.plan_key] = r
        if r.error is None:
            out.append(r)
    return out


def _speaker_bands(ws: Workspace) -> dict[str, str]:
    speakers = load_speakers(ws.corpus_dir / "speakers.json")
    return {s.id: severity_band(s.condition, s.severity) for s in speakers}


def build_report(cfg: ExperimentConfig, out_root) -> dict:
    """Assemble the three result surfaces from the results log."""
    ws = workspace(out_root, cfg)
    records = _finetune_records(load_records(ws.results_path))
    if not records:
        raise DataError(f"no successful finetune records in {ws.results_path}")
    bands = _speaker_bands(ws)
    full_mask_label = "+".join(sorted(ws_encoder_groups(cfg) + ["joint"]))
    analysis_label = (
        "+".join(sorted((cfg.analysis_mask or FreezeMask(frozenset(
            ws_encoder_groups(cfg) + ["joint"]))).trainable))
    )

    def mask_label(r: RunRecord) -> str:
        return "+".join(sorted(r.plan["mask"]))

    # (a) Table-1 analog: per severity band, base vs finetuned mean WER.
    table1_rows = []
    headline = [r for r in records
                if mask_label(r) == analysis_label and r.plan.get("budget_label") == "all"]
    by_band: dict[str, list[RunRecord]] = {}
    for r in headline:
        by_band.setdefault(bands[r.plan["speaker_id"]], []).append(r)
    for band in sorted(by_band):
        rs = by_band[band]
        base_mean = float(np.mean([r.base_test_wer for r in rs]))
        ft_mean = float(np.mean([r.test_wer for r in rs]))
        rel_mean = float(np.mean([r.rel_improvement for r in rs]))
        table1_rows.append(
            {
                "group": band,
                "n_speakers": len(rs),
                "base_wer": base_mean,
                "finetuned_wer": ft_mean,
                "mean_rel_improvement": rel_mean,
                "per_speaker": {
                    r.plan["speaker_id"]: {"base": r.base_test_wer, "finetuned": r.test_wer}
                    for r in rs
                },
            }
        )

    # (b) Fig-2 analog: budget -> mean relative improvement curve.
    curve_records = [r for r in records if mask_label(r) == analysis_label]
    by_budget: dict[str, list[RunRecord]] = {}
    for r in curve_records:
        by_budget.setdefault(r.plan.get("budget_label", "all"), []).append(r)

    def budget_sort_key(label: str):
        if label == "all":
            return (2, 0.0)
        if label.endswith("%"):
            return (0, float(label[:-1]))
        return (1, float(label[:-1]))

    curve = []
    for label in sorted(by_budget, key=budget_sort_key):
        rs = by_budget[label]
        curve.append(
            {
                "budget": label,
                "n_runs": len(rs),
                "mean_rel_improvement": float(np.mean([r.rel_improvement for r in rs])),
                "mean_budget_s": float(np.mean([r.plan["budget_s"] if r.plan["budget_s"] != "all"
                                                else sum(x.duration_s for x in
                                                         load_manifest(ws.manifest_path).for_speaker(
                                                             r.plan["speaker_id"], "train"))
                                                for r in rs])),
            }
        )
    full_point = next((c for c in curve if c["budget"] == "all"), None)
    if full_point and full_point["mean_rel_improvement"] > 0:
        for c in curve:
            c["normalized"] = c["mean_rel_improvement"] / full_point["mean_rel_improvement"]

    # (c) Layer table: mask -> mean WER at full budget, best mask first.
    layer_rows = []
    full_budget = [r for r in records if r.plan.get("budget_label") == "all"]
    by_mask: dict[str, list[RunRecord]] = {}
    for r in full_budget:
        by_mask.setdefault(mask_label(r), []).append(r)
    for label, rs in by_mask.items():
        layer_rows.append(
            {
                "mask": label,
                "n_runs": len(rs),
                "mean_wer": float(np.mean([r.test_wer for r in rs])),
                "mean_rel_improvement": float(np.mean([r.rel_improvement for r in rs])),
            }
        )
    layer_rows.sort(key=lambda row: row["mean_wer"])
    e0_joint = next((r for r in layer_rows if r["mask"] == "enc.0+joint"), None)
    full_joint = next((r for r in layer_rows if r["mask"] == full_mask_label), None)
    comparison = None
    if e0_joint and full_joint and full_joint["mean_rel_improvement"] > 0:
        comparison = {
            "e0_joint_rel": e0_joint["mean_rel_improvement"],
            "full_encoder_joint_rel": full_joint["mean_rel_improvement"],
            "ratio": e0_joint["mean_rel_improvement"] / full_joint["mean_rel_improvement"],
        }
    return {
        "table1": table1_rows,
        "curve": curve,
        "layer_table": layer_rows,
        "e0_vs_full_encoder": comparison,
        "mask_labels": {"full": full_mask_label, "analysis": analysis_label},
    }


def _report_csvs(report: dict) -> dict[str, tuple[list[str], list[list]]]:
    return {
        "table1.csv": (
            ["group", "n_speakers", "base_wer", "finetuned_wer", "mean_rel_improvement"],
            [
                [r["group"], r["n_speakers"], r["base_wer"], r["finetuned_wer"],
                 r["mean_rel_improvement"]]
                for r in report["table1"]
            ],
        ),
        "fig2_curve.csv": (
            ["budget", "n_runs", "mean_budget_s", "mean_rel_improvement", "normalized"],
            [
                [c["budget"], c["n_runs"], c["mean_budget_s"], c["mean_rel_improvement"],
                 c.get("normalized", "")]
                for c in report["curve"]
            ],
        ),
        "layer_table.csv": (
            ["mask", "n_runs", "mean_wer", "mean_rel_improvement"],
            [
                [r["mask"], r["n_runs"], r["mean_wer"], r["mean_rel_improvement"]]
                for r in report["layer_table"]
            ],
        ),
    }


def cmd_report(cfg: ExperimentConfig, out_root) -> dict:
    ws = workspace(out_root, cfg)
    report = build_report(cfg, out_root)
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    with open(ws.reports_dir / "report.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    for name, (header, rows) in _report_csvs(report).items():
        _write_csv(ws.reports_dir / name, header, rows)
    return report


def cmd_verify(cfg: ExperimentConfig, out_root) -> list[tuple[str, bool, str]]:
    """Recompute report artifacts from RunRecords and diff against disk."""
    ws = workspace(out_root, cfg)
    checks: list[tuple[str, bool, str]] = []
    try:
        records = _finetune_records(load_records(ws.results_path))
        checks.append(("results-log-consistent", True, f"{len(records)} unique finetune records"))
    except DataError as exc:
        checks.append(("results-log-consistent", False, str(exc)))
        return checks
    for r in records:
        want = relative_improvement(r.base_test_wer, r.test_wer)
        if abs(want - r.rel_improvement) > 1e-9:
            checks.append(("rel-improvement-recomputable", False, r.plan_key))
            break
    else:
        checks.append(("rel-improvement-recomputable", True, "all records"))
    report = build_report(cfg, out_root)
    for name, (header, rows) in _report_csvs(report).items():
        path = ws.reports_dir / name
        if not path.exists():
            checks.append((name, False, "missing (run report first)"))
            continue
        want_lines = [",".join(header)] + [",".join(_csv_cell(v) for v in row) for row in rows]
        got = path.read_text(encoding="utf-8").strip().splitlines()
        checks.append((name, got == want_lines, "recomputed content matches" if got == want_lines
                       else "content differs from recomputation"))
    return checks


def strip_volatile(record: dict) -> dict:
    """Drop fields that legitimately differ between identical runs."""
    out = dict(record)
    out.pop("wall_s", None)
    plan = dict(out.get("plan") or {})
    if "base_ref" in plan:
        plan["base_ref"] = Path(plan["base_ref"]).name
    out["plan"] = plan
    return out


def results_fingerprint(path) -> list[dict]:
    """Canonical, volatile-free view of a results log for comparisons."""
    return sorted(
        (strip_volatile(r.to_dict()) for r in load_records(path)),
        key=lambda d: d["plan_key"],
    )
