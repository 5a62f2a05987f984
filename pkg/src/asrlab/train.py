"""Training: full-model backpropagation, freeze masks, finetuning, sweeps.

Gradients flow from the transduction-lattice loss through the joint,
decoder and encoder stacks by hand-rolled BPTT. Finetuning updates only
the parameter groups named in a FreezeMask; everything else stays
bit-identical to the base checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .analysis import wer
from .errors import ConfigError, DataError, DivergenceError
from .features import FeatureMatrix, read_feature_dump, stack_frames
from .loss import LossInput, rnnt_loss, rnnt_loss_and_grad
from .model import (
    ModelCheckpoint,
    Params,
    decoder_forward,
    encoder_forward,
    encoder_group_names,
    greedy_decode,
    joint_backward,
    joint_forward,
    lstm_backward,
    lstm_forward,
)
from .synthdata import BudgetSpec, Manifest, make_budget_subset


@dataclass(frozen=True)
class HyperParams:
    """Adam(0.9, 0.999, 1e-8) with constant lr, clipping, early stopping."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 40
    patience: int = 5
    clip_norm: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.clip_norm, self.eps) <= 0:
            raise ConfigError("hyperparameters must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FreezeMask:
    """Parameter groups updated during finetuning; the rest stay frozen."""

    trainable: frozenset[str]

    def __post_init__(self):
        if not self.trainable:
            raise ConfigError("freeze mask must leave at least one trainable group")

    @classmethod
    def of(cls, *names: str) -> "FreezeMask":
        return cls(trainable=frozenset(names))

    def validate(self, group_names) -> None:
        unknown = self.trainable - set(group_names)
        if unknown:
            raise ConfigError(f"unknown parameter groups in mask: {sorted(unknown)}")

    @property
    def label(self) -> str:
        return "+".join(sorted(self.trainable))


def default_mask_family(encoder_layers: int) -> list[FreezeMask]:
    """E0, E0-E1, ..., full encoder, each with and without the joint."""
    masks = []
    enc = encoder_group_names(encoder_layers)
    for depth in range(1, encoder_layers + 1):
        masks.append(FreezeMask(frozenset(enc[:depth])))
        masks.append(FreezeMask(frozenset(enc[:depth]) | {"joint"}))
    return masks


@dataclass(frozen=True)
class FinetunePlan:
    base_ref: str
    speaker_id: str
    budget: BudgetSpec
    mask: FreezeMask
    hyper: HyperParams

    def to_dict(self) -> dict:
        return {
            "base_ref": self.base_ref,
            "speaker_id": self.speaker_id,
            "budget_s": self.budget.budget_s,
            "selection_seed": self.budget.selection_seed,
            "mask": sorted(self.mask.trainable),
            "hyper": self.hyper.to_dict(),
        }

    @property
    def key(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunRecord:
    kind: str
    plan: dict
    plan_key: str
    final_train_loss: float | None = None
    init_dev_loss: float | None = None
    final_dev_loss: float | None = None
    test_wer: float | None = None
    base_test_wer: float | None = None
    rel_improvement: float | None = None
    steps: int = 0
    wall_s: float = 0.0
    checkpoint: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "plan": self.plan,
            "plan_key": self.plan_key,
            "final_train_loss": self.final_train_loss,
            "init_dev_loss": self.init_dev_loss,
            "final_dev_loss": self.final_dev_loss,
            "test_wer": self.test_wer,
            "base_test_wer": self.base_test_wer,
            "rel_improvement": self.rel_improvement,
            "steps": self.steps,
            "wall_s": self.wall_s,
            "checkpoint": self.checkpoint,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def relative_improvement(base_wer: float, finetuned_wer: float) -> float:
    """(base - finetuned) / base; 0 when the base is already perfect."""
    if base_wer <= 0.0:
        return 0.0
    return (base_wer - finetuned_wer) / base_wer


# ------------------------------------------------------------- data access

@dataclass
class TrainItem:
    utterance_id: str
    speaker_id: str
    transcript: str
    frames: np.ndarray  # (T', D) float32 super-frames
    labels: np.ndarray  # (U,) int64


def load_items(manifest: Manifest, corpus_dir, vocab, stack_factor: int) -> list[TrainItem]:
    corpus_dir = Path(corpus_dir)
    items = []
    for rec in manifest.records:
        raw = read_feature_dump(corpus_dir / rec.feature_path)
        stacked = stack_frames(FeatureMatrix(raw, 10.0, rec.utterance_id), stack_factor)
        items.append(
            TrainItem(
                utterance_id=rec.utterance_id,
                speaker_id=rec.speaker_id,
                transcript=rec.transcript,
                frames=stacked.frames.astype(np.float32),
                labels=vocab.encode(rec.transcript),
            )
        )
    return items


def _pad_batch(items: list[TrainItem]):
    b = len(items)
    t_max = max(it.frames.shape[0] for it in items)
    u_max = max(len(it.labels) for it in items)
    dim = items[0].frames.shape[1]
    x = np.zeros((b, t_max, dim))
    tokens = np.zeros((b, u_max + 1), dtype=np.int64)
    for i, it in enumerate(items):
        x[i, : it.frames.shape[0]] = it.frames
        tokens[i, 1 : 1 + len(it.labels)] = it.labels
    return x, tokens


def _forward_lattices(params: Params, items: list[TrainItem], keep_caches: bool):
    """Shared forward pass; yields per-utterance lattices."""
    layers = len([g for g in params if g.startswith("enc.")])
    x, tokens = _pad_batch(items)
    enc_h, enc_caches = encoder_forward(x, params, layers)
    dec_in = params["dec"]["embed"][tokens]
    dec_h, dec_cache = lstm_forward(dec_in, params["dec"])
    per_utt = []
    for i, it in enumerate(items):
        t_i = it.frames.shape[0]
        u_i = len(it.labels)
        logits, log_probs, act = joint_forward(enc_h[i, :t_i], dec_h[i, : u_i + 1], params)
        per_utt.append((logits, log_probs, act))
    state = (x, tokens, enc_h, enc_caches, dec_h, dec_cache) if keep_caches else None
    return per_utt, state


def batch_loss(params: Params, items: list[TrainItem]) -> float:
    """Mean transduction loss over a batch (forward only)."""
    if not items:
        raise DataError("empty batch")
    per_utt, _ = _forward_lattices(params, items, keep_caches=False)
    losses = [
        rnnt_loss(LossInput(log_probs, it.labels))
        for (_, log_probs, _), it in zip(per_utt, items)
    ]
    return float(np.mean(losses))


def batch_backward(params: Params, items: list[TrainItem]):
    """Mean batch loss plus gradients for every parameter group."""
    if not items:
        raise DataError("empty batch")
    layers = len([g for g in params if g.startswith("enc.")])
    per_utt, state = _forward_lattices(params, items, keep_caches=True)
    x, tokens, enc_h, enc_caches, dec_h, dec_cache = state

    b = len(items)
    grads: dict[str, dict[str, np.ndarray]] = {
        g: {k: np.zeros_like(v) for k, v in params[g].items()} for g in params
    }
    d_enc = np.zeros_like(enc_h)
    d_dec = np.zeros_like(dec_h)
    losses = []
    for i, it in enumerate(items):
        t_i = it.frames.shape[0]
        u_i = len(it.labels)
        logits, log_probs, act = per_utt[i]
        loss_i, dlat = rnnt_loss_and_grad(LossInput(log_probs, it.labels))
        losses.append(loss_i)
        dlat /= b
        # Through the log-softmax: dlogits = dlogp - softmax * sum(dlogp).
        dlogits = dlat - np.exp(log_probs) * dlat.sum(axis=-1, keepdims=True)
        denc_i, dpred_i, jg = joint_backward(
            dlogits, act, enc_h[i, :t_i], dec_h[i, : u_i + 1], params
        )
        for k, v in jg.items():
            grads["joint"][k] += v
        d_enc[i, :t_i] += denc_i
        d_dec[i, : u_i + 1] += dpred_i

    # Decoder BPTT and embedding scatter.
    dx_dec, dec_grads = lstm_backward(d_dec, dec_cache, params["dec"])
    for k, v in dec_grads.items():
        grads["dec"][k] += v
    np.add.at(grads["dec"]["embed"], tokens.reshape(-1), dx_dec.reshape(-1, dx_dec.shape[-1]))

    # Encoder BPTT, top layer down.
    dh = d_enc
    for li in range(layers - 1, -1, -1):
        name = f"enc.{li}"
        dh, layer_grads = lstm_backward(dh, enc_caches[li], params[name])
        for k, v in layer_grads.items():
            grads[name][k] += v
    return float(np.mean(losses)), grads


def apply_freeze(grads: dict, mask: FreezeMask) -> dict:
    """Zero the gradients of groups outside the mask, exactly."""
    mask.validate(grads.keys())
    for group in grads:
        if group not in mask.trainable:
            for k in grads[group]:
                grads[group][k][...] = 0.0
    return grads


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Global-norm clip; a no-op when the norm is under the threshold."""
    sq = 0.0
    for group in grads.values():
        for v in group.values():
            sq += float(np.sum(v * v))
    norm = np.sqrt(sq)
    if norm > clip_norm:
        scale = clip_norm / norm
        for group in grads.values():
            for k in group:
                group[k] *= scale
    return float(norm)


class Adam:
    """Per-tensor Adam state for the trainable groups only."""

    def __init__(self, params: Params, hp: HyperParams, trainable: frozenset[str]):
        self.hp = hp
        self.trainable = trainable
        self.t = 0
        self.m = {g: {k: np.zeros_like(v) for k, v in params[g].items()} for g in trainable}
        self.v = {g: {k: np.zeros_like(v) for k, v in params[g].items()} for g in trainable}

    def step(self, params: Params, grads: dict) -> None:
        hp = self.hp
        self.t += 1
        bc1 = 1.0 - hp.beta1**self.t
        bc2 = 1.0 - hp.beta2**self.t
        for g in sorted(self.trainable):
            for k in params[g]:
                grad = grads[g][k]
                m = self.m[g][k]
                v = self.v[g][k]
                m *= hp.beta1
                m += (1.0 - hp.beta1) * grad
                v *= hp.beta2
                v += (1.0 - hp.beta2) * grad * grad
                params[g][k] -= hp.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)


# ------------------------------------------------------------ training loop

@dataclass
class TrainStats:
    init_dev_loss: float
    best_dev_loss: float
    final_train_loss: float
    steps: int
    epochs: int


def _dataset_loss(params: Params, items: list[TrainItem], batch_size: int) -> float:
    losses = []
    weights = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        losses.append(batch_loss(params, chunk))
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def run_training(
    params: Params,
    train_items: list[TrainItem],
    dev_items: list[TrainItem],
    hp: HyperParams,
    mask: FreezeMask,
) -> TrainStats:
    """Adam training with early stopping on dev loss.

    Mutates ``params`` and returns stats; the returned best parameters
    are written back into ``params`` (never worse than the best dev loss
    seen). Raises DivergenceError on a non-finite loss.
    """
    mask.validate(params.keys())
    rng = np.random.default_rng(hp.seed)
    adam = Adam(params, hp, mask.trainable)
    best = {g: {k: v.copy() for k, v in t.items()} for g, t in params.items()}
    init_dev = best_dev = _dataset_loss(params, dev_items, hp.batch_size)
    steps = 0
    bad_epochs = 0
    final_train = float("nan")
    epochs = 0
    for epoch in range(hp.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(len(train_items))
        epoch_losses = []
        for start in range(0, len(order), hp.batch_size):
            chunk = [train_items[i] for i in order[start : start + hp.batch_size]]
            loss, grads = batch_backward(params, chunk)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {steps}")
            apply_freeze(grads, mask)
            clip_gradients(grads, hp.clip_norm)
            adam.step(params, grads)
            steps += 1
            epoch_losses.append(loss)
        final_train = float(np.mean(epoch_losses))
        dev = _dataset_loss(params, dev_items, hp.batch_size)
        if not np.isfinite(dev):
            raise DivergenceError(f"non-finite dev loss after epoch {epoch}")
        if dev < best_dev:
            best_dev = dev
            best = {g: {k: v.copy() for k, v in t.items()} for g, t in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= hp.patience:
                break
    for g in params:
        for k in params[g]:
            params[g][k][...] = best[g][k]
    return TrainStats(
        init_dev_loss=init_dev,
        best_dev_loss=best_dev,
        final_train_loss=final_train,
        steps=steps,
        epochs=epochs,
    )


def _carve_dev(items: list[TrainItem], seed: int) -> tuple[list[TrainItem], list[TrainItem]]:
    """Hold out ~10% (at least 1) of the items for early stopping."""
    if len(items) < 2:
        return list(items), list(items)
    n_dev = max(1, len(items) // 10)
    order = np.random.default_rng([seed, 0xDE]).permutation(len(items))
    dev_idx = set(int(i) for i in order[:n_dev])
    train = [it for i, it in enumerate(items) if i not in dev_idx]
    dev = [it for i, it in enumerate(items) if i in dev_idx]
    return train, dev


# -------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    hypotheses: list[dict]
    per_speaker: dict[str, dict]
    macro_wer: float
    micro: dict

    def speaker_wer(self, speaker_id: str) -> float:
        return self.per_speaker[speaker_id]["wer"]


def evaluate_checkpoint(
    ckpt: ModelCheckpoint,
    manifest: Manifest,
    corpus_dir,
    split: str = "test",
    max_symbols_per_frame: int = 8,
) -> EvalResult:
    """Greedy-decode a split; macro (per-speaker mean) and micro WER."""
    subset = manifest.subset(split)
    if not subset.records:
        raise DataError(f"no records in split {split!r}")
    items = load_items(subset, corpus_dir, ckpt.vocab, ckpt.config.stack_factor)
    hyps = []
    per_speaker_ops: dict[str, list] = {}
    for it in items:
        hyp = greedy_decode(ckpt, it.frames.astype(np.float64), max_symbols_per_frame)
        hyps.append(
            {
                "utterance_id": it.utterance_id,
                "speaker_id": it.speaker_id,
                "split": split,
                "ref": it.transcript,
                "hyp": hyp,
            }
        )
        per_speaker_ops.setdefault(it.speaker_id, []).append(
            wer(it.transcript.split(), hyp.split())
        )
    per_speaker = {}
    totals = {"substitutions": 0, "deletions": 0, "insertions": 0, "ref_len": 0}
    for spk, results in per_speaker_ops.items():
        s = sum(r.substitutions for r in results)
        d = sum(r.deletions for r in results)
        i = sum(r.insertions for r in results)
        n = sum(r.ref_len for r in results)
        per_speaker[spk] = {"S": s, "D": d, "I": i, "N": n, "wer": (s + d + i) / n}
        totals["substitutions"] += s
        totals["deletions"] += d
        totals["insertions"] += i
        totals["ref_len"] += n
    macro = float(np.mean([v["wer"] for v in per_speaker.values()]))
    micro_wer = (
        totals["substitutions"] + totals["deletions"] + totals["insertions"]
    ) / totals["ref_len"]
    micro = {
        "S": totals["substitutions"],
        "D": totals["deletions"],
        "I": totals["insertions"],
        "N": totals["ref_len"],
        "wer": micro_wer,
    }
    return EvalResult(hypotheses=hyps, per_speaker=per_speaker, macro_wer=macro, micro=micro)


# ----------------------------------------------------------- entry points

def train_base(
    manifest: Manifest,
    corpus_dir,
    init_ckpt: ModelCheckpoint,
    hp: HyperParams,
) -> tuple[ModelCheckpoint, RunRecord]:
    """Train from scratch on every speaker's train split."""
    train_manifest = manifest.subset("train")
    if not train_manifest.records:
        raise DataError("manifest has no train records")
    t0 = time.perf_counter()
    items = load_items(train_manifest, corpus_dir, init_ckpt.vocab, init_ckpt.config.stack_factor)
    train_items, dev_items = _carve_dev(items, hp.seed)
    params = init_ckpt.clone_params()
    mask = FreezeMask(frozenset(init_ckpt.group_names))
    stats = run_training(params, train_items, dev_items, hp, mask)
    ckpt = ModelCheckpoint(
        config=init_ckpt.config,
        vocab=init_ckpt.vocab,
        feature=init_ckpt.feature,
        params=params,
        step=init_ckpt.step + stats.steps,
    )
    result = evaluate_checkpoint(ckpt, manifest, corpus_dir, "test")
    plan = {"hyper": hp.to_dict(), "speakers": manifest.speakers}
    payload = json.dumps(plan, sort_keys=True, separators=(",", ":"))
    record = RunRecord(
        kind="base",
        plan=plan,
        plan_key=hashlib.sha1(payload.encode()).hexdigest()[:16],
        final_train_loss=stats.final_train_loss,
        init_dev_loss=stats.init_dev_loss,
        final_dev_loss=stats.best_dev_loss,
        test_wer=result.macro_wer,
        steps=stats.steps,
        wall_s=time.perf_counter() - t0,
    )
    return ckpt, record


def finetune(
    plan: FinetunePlan,
    manifest: Manifest,
    corpus_dir,
    base: ModelCheckpoint,
    base_speaker_wer: float | None = None,
) -> tuple[ModelCheckpoint, RunRecord]:
    """Per-speaker finetuning under a freeze mask and a data budget."""
    if plan.speaker_id not in manifest.speakers:
        raise DataError(f"speaker {plan.speaker_id!r} not in manifest")
    plan.mask.validate(base.group_names)
    t0 = time.perf_counter()
    subset = make_budget_subset(manifest, plan.speaker_id, plan.budget)
    items = load_items(subset, corpus_dir, base.vocab, base.config.stack_factor)
    train_items, dev_items = _carve_dev(items, plan.hyper.seed)
    params = base.clone_params()
    stats = run_training(params, train_items, dev_items, plan.hyper, plan.mask)
    ckpt = ModelCheckpoint(
        config=base.config,
        vocab=base.vocab,
        feature=base.feature,
        params=params,
        step=base.step + stats.steps,
    )
    speaker_manifest = Manifest(manifest.for_speaker(plan.speaker_id))
    result = evaluate_checkpoint(ckpt, speaker_manifest, corpus_dir, "test")
    test_wer = result.speaker_wer(plan.speaker_id)
    if base_speaker_wer is None:
        base_result = evaluate_checkpoint(base, speaker_manifest, corpus_dir, "test")
        base_speaker_wer = base_result.speaker_wer(plan.speaker_id)
    record = RunRecord(
        kind="finetune",
        plan=plan.to_dict(),
        plan_key=plan.key,
        final_train_loss=stats.final_train_loss,
        init_dev_loss=stats.init_dev_loss,
        final_dev_loss=stats.best_dev_loss,
        test_wer=test_wer,
        base_test_wer=base_speaker_wer,
        rel_improvement=relative_improvement(base_speaker_wer, test_wer),
        steps=stats.steps,
        wall_s=time.perf_counter() - t0,
    )
    return ckpt, record


def cell_seed(master_seed: int, speaker_id: str, mask: FreezeMask, budget: BudgetSpec) -> int:
    """Independent per-cell seed derived from (master, mask, budget, speaker)."""
    tag = f"{speaker_id}|{mask.label}|{budget.budget_s}"
    return (master_seed * 1000003 + zlib.crc32(tag.encode())) % (2**31 - 1)


def sweep_layers(
    base: ModelCheckpoint,
    manifest: Manifest,
    corpus_dir,
    speaker_id: str,
    masks: list[FreezeMask],
    hp: HyperParams,
    budget: BudgetSpec | None = None,
    master_seed: int = 0,
    base_ref: str = "base",
    base_speaker_wer: float | None = None,
) -> list[RunRecord]:
    """One finetune per mask; failures recorded per cell, never raised."""
    if not masks:
        raise ConfigError("sweep needs at least one mask")
    budget = budget or BudgetSpec("all", master_seed)
    records = []
    for mask in masks:
        plan = FinetunePlan(
            base_ref=base_ref,
            speaker_id=speaker_id,
            budget=budget,
            mask=mask,
            hyper=replace(hp, seed=cell_seed(master_seed, speaker_id, mask, budget)),
        )
        try:
            _, record = finetune(plan, manifest, corpus_dir, base, base_speaker_wer)
        except (DataError, ConfigError, DivergenceError) as exc:
            record = RunRecord(kind="finetune", plan=plan.to_dict(), plan_key=plan.key,
                               error=f"{type(exc).__name__}: {exc}")
        records.append(record)
    return records


def sweep_budget(
    base: ModelCheckpoint,
    manifest: Manifest,
    corpus_dir,
    speaker_id: str,
    budgets: list[BudgetSpec],
    mask: FreezeMask,
    hp: HyperParams,
    master_seed: int = 0,
    base_ref: str = "base",
    base_speaker_wer: float | None = None,
) -> tuple[list[RunRecord], list[dict]]:
    """One finetune per budget plus the relative-improvement curve."""
    if not budgets:
        raise ConfigError("sweep needs at least one budget")
    records = []
    for budget in budgets:
        plan = FinetunePlan(
            base_ref=base_ref,
            speaker_id=speaker_id,
            budget=budget,
            mask=mask,
            hyper=replace(hp, seed=cell_seed(master_seed, speaker_id, mask, budget)),
        )
        try:
            _, record = finetune(plan, manifest, corpus_dir, base, base_speaker_wer)
        except (DataError, ConfigError, DivergenceError) as exc:
            record = RunRecord(kind="finetune", plan=plan.to_dict(), plan_key=plan.key,
                               error=f"{type(exc).__name__}: {exc}")
        records.append(record)
    curve = [
        {
            "budget": b.label,
            "budget_s": None if b.budget_s == "all" else float(b.budget_s),
            "rel_improvement": r.rel_improvement,
        }
        for b, r in zip(budgets, records)
        if r.error is None
    ]
    return records, curve


# ------------------------------------------------------------- results log

def append_records(path, records: list[RunRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: r.plan_key):
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RunRecord.from_dict(json.loads(line)))
    return out
