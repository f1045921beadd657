"""Batch sampling, the SGD loop over the weighted objective, and the ablation suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .core import (
    VARIANTS,
    AblationFlags,
    ConfigError,
    DatasetSplit,
    Domain,
    LossWeights,
    ModelConfig,
    TrainConfig,
    derived_seed,
    seeded_rng,
    validate_config,
)
from .evaluator import evaluate
from .losses import (
    LossReport,
    classification_loss,
    contrastive_loss,
    difference_loss,
    pair_index,
    reconstruction_loss,
    total_loss,
)
from .network import ARN, COMPONENTS, build_model, images_to_tensor, save_checkpoint

log = logging.getLogger(__name__)

LR_FIELD = {
    "E_I": "lr_backbone",
    "E_C": "lr_encoders",
    "E_S": "lr_encoders",
    "E_T": "lr_encoders",
    "D_C": "lr_encoders",
    "C_S": "lr_classifier",
}


class NumericError(FloatingPointError):
    """A loss term became non-finite during training."""


@dataclass
class TrainBatch:
    source: list  # LabeledSample, P identities x Kp images
    target: list  # UnlabeledSample
    labels: np.ndarray  # contiguous class index per source sample
    pairs: torch.Tensor  # (n_pairs, 3) rows of (i, j, same identity)


class BatchSampler:
    """Draws P x Kp source batches and uniform target halves from a split."""

    def __init__(self, split: DatasetSplit, config: TrainConfig):
        self.config = config
        self.source = split.train_source
        self.target = split.target_unlabeled()
        self.class_of = {ident: k for k, ident in enumerate(split.source_identities)}
        by_id: dict[int, list[int]] = {}
        for i, sample in enumerate(self.source):
            by_id.setdefault(sample.identity, []).append(i)
        self.by_id = {k: np.array(v) for k, v in sorted(by_id.items())}
        if len(self.by_id) < config.identities_per_batch:
            raise ConfigError(
                f"identities_per_batch={config.identities_per_batch} but only {len(self.by_id)} source identities"
            )
        self.half = config.batch_size // 2
        if len(self.target) < self.half:
            raise ConfigError(f"target set has {len(self.target)} images, fewer than half a batch ({self.half})")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, min(len(self.source), len(self.target)) // self.half)

    def _source_half(self, rng):
        ids = list(self.by_id)
        chosen = rng.choice(len(ids), size=self.config.identities_per_batch, replace=False)
        picks = []
        for c in chosen:
            pool = self.by_id[ids[c]]
            k = self.config.images_per_identity
            picks.extend(rng.choice(pool, size=k, replace=len(pool) < k))
        source = [self.source[i] for i in picks]
        labels = np.array([self.class_of[s.identity] for s in source])
        return source, labels

    def sample(self, rng, target_indices=None) -> TrainBatch:
        source, labels = self._source_half(rng)
        if target_indices is None:
            target_indices = rng.choice(len(self.target), size=self.half, replace=False)
        target = [self.target[i] for i in target_indices]
        return TrainBatch(source, target, labels, pair_index(labels))

    def epoch(self, rng):
        """Batches for one epoch; the target half walks a fresh permutation."""
        perm = rng.permutation(len(self.target))
        for step in range(self.steps_per_epoch):
            yield self.sample(rng, perm[step * self.half : (step + 1) * self.half])


def sample_batch(split: DatasetSplit, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    return BatchSampler(split, config).sample(rng)


@dataclass
class TrainState:
    model: ARN
    optimizer: torch.optim.Optimizer
    learning_rates: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    diff_form: str = "sample"


def make_state(model: ARN, config: TrainConfig) -> TrainState:
    groups, rates = [], {}
    for name, params in model.parameter_groups().items():
        rates[name] = getattr(config, LR_FIELD[name])
        if params:
            groups.append({"params": params, "lr": rates[name], "name": name})
    optimizer = torch.optim.SGD(groups, lr=config.lr_encoders, momentum=config.momentum)
    return TrainState(model, optimizer, rates, diff_form=config.diff_form)


def compute_losses(
    model: ARN,
    batch: TrainBatch,
    weights: LossWeights,
    flags: AblationFlags,
    train_backbone: bool = True,
    diff_form: str = "sample",
):
    """Forward pass over both halves; returns (total tensor, LossReport, intermediates)."""
    dtype = next(model.parameters()).dtype
    images = images_to_tensor([s.image for s in batch.source] + [s.image for s in batch.target], dtype)
    n_s = len(batch.source)
    with torch.set_grad_enabled(train_backbone and torch.is_grad_enabled()):
        maps = model.extract_feature_map(images)
    maps_s, maps_t = maps[:n_s], maps[n_s:]
    shared = model.encode_shared(maps)
    e_c_s, e_c_t = shared[:n_s], shared[n_s:]
    e_p_s = model.encode_private(maps_s, Domain.SOURCE)
    e_p_t = model.encode_private(maps_t, Domain.TARGET)

    terms = {}
    if flags.use_class:
        labels = torch.as_tensor(batch.labels)
        terms["class"] = classification_loss(model.classify(e_c_s, Domain.SOURCE), labels)
    if flags.use_ctrs:
        terms["ctrs"] = contrastive_loss(F.normalize(e_c_s, dim=1), batch.pairs, weights.margin)
    if flags.use_rec:
        recon = model.decode(shared, torch.cat([e_p_s, e_p_t]))
        # reconstruction targets are fixed features; only the encoders/decoder chase them
        target = maps.detach()
        terms["rec"] = reconstruction_loss(target[:n_s], recon[:n_s], target[n_s:], recon[n_s:])
    if flags.use_diff and flags.use_private:
        terms["diff"] = difference_loss(e_c_s, e_p_s, e_c_t, e_p_t, form=diff_form)
    try:
        total, report = total_loss(terms, weights, flags)
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from exc
    return total, report, {"shared": shared, "private": torch.cat([e_p_s, e_p_t])}


def train_step(state: TrainState, batch: TrainBatch, weights: LossWeights, flags: AblationFlags, train_backbone=True):
    """One SGD update on the active terms; returns the pre-update LossReport."""
    state.model.train()
    total, report, _ = compute_losses(state.model, batch, weights, flags, train_backbone, state.diff_form)
    state.optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        state.optimizer.step()
    state.step += 1
    state.history.append(report)
    return report


def backbone_trainable(config: TrainConfig, epoch: int) -> bool:
    # without source supervision the backbone keeps its initial weights
    if not config.ablation.supervised:
        return False
    if epoch < config.backbone_warmup_epochs:
        return True
    return not config.freeze_backbone_after_warmup and config.backbone_warmup_epochs > 0


def _mean_report(reports: list[LossReport]) -> dict:
    keys = ("class_loss", "ctrs_loss", "rec_loss", "diff_loss", "total")
    names = ("class", "ctrs", "rec", "diff", "total")
    return {n: float(np.mean([getattr(r, k) for r in reports])) for k, n in zip(keys, names)}


def fit(
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights,
    out_dir=None,
    protocol: str = "cross_camera",
    evaluate_each_epoch: bool = False,
):
    """Train a fresh model; returns (model, log records).

    The log holds one record per step (``step, class, ctrs, rec, diff,
    total``) and one per epoch (``epoch, mean`` plus ``eval`` when
    evaluating). With ``out_dir`` the log is streamed to
    ``train_log.jsonl`` and ``last.npz`` is rewritten each epoch;
    ``best.npz`` tracks the best target mAP when evaluating.
    """
    problems = validate_config(model_config, train_config, weights)
    if problems:
        raise ConfigError("; ".join(problems))
    if model_config.num_classes != len(split.source_identities):
        raise ConfigError(
            f"num_classes={model_config.num_classes} but the source set has {len(split.source_identities)} identities"
        )
    flags = train_config.ablation
    seed = train_config.seed
    model = build_model(model_config, flags.use_private, seed=derived_seed(seed, "init"))
    state = make_state(model, train_config)
    sampler = BatchSampler(split, train_config)
    rng = seeded_rng(seed, "sampler")
    records: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    def emit(record):
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    best_map = -1.0
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derived_seed(seed, "dropout"))
            for epoch in range(train_config.epochs):
                state.epoch = epoch
                train_backbone = backbone_trainable(train_config, epoch)
                epoch_reports = []
                for batch in sampler.epoch(rng):
                    report = train_step(state, batch, weights, flags, train_backbone)
                    epoch_reports.append(report)
                    emit(report.to_record(state.step))
                summary = {"epoch": epoch + 1, "mean": _mean_report(epoch_reports)}
                if evaluate_each_epoch:
                    metrics, _ = evaluate(model, split.query, split.gallery, protocol)
                    summary["eval"] = metrics
                emit(summary)
                log.info("epoch %d %s", epoch + 1, summary)
                if out is not None:
                    save_checkpoint(model, out / "checkpoints" / "last.npz", {"epoch": epoch + 1})
                    if evaluate_each_epoch and summary["eval"]["mAP"] > best_map:
                        best_map = summary["eval"]["mAP"]
                        save_checkpoint(model, out / "checkpoints" / "best.npz", {"epoch": epoch + 1})
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return model, records


def epoch_means(records: list[dict], term: str) -> list[float]:
    return [r["mean"][term] for r in records if "mean" in r]


def run_ablation_suite(
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights,
    variants=tuple(VARIANTS),
    seeds=None,
    protocol: str = "cross_camera",
    weights_by_variant: dict | None = None,
    keep_artifacts: bool = False,
):
    """Train and evaluate every variant for every seed.

    Returns ``{variant: {"median": metrics, "runs": [metrics per seed]}}``;
    the median is taken per metric across seeds. With ``keep_artifacts``
    each variant also carries ``"models"`` and ``"logs"`` lists in seed order.
    """
    seeds = list(seeds) if seeds is not None else [train_config.seed]
    table = {}
    for name in variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {name!r}; expected one of {sorted(VARIANTS)}")
        runs, models, logs = [], [], []
        for seed in seeds:
            cfg = replace(train_config, ablation=VARIANTS[name], seed=seed)
            w = (weights_by_variant or {}).get(name, weights)
            model, records = fit(split, model_config, cfg, w)
            metrics, _ = evaluate(model, split.query, split.gallery, protocol)
            metrics["seed"] = seed
            runs.append(metrics)
            if keep_artifacts:
                models.append(model)
                logs.append(records)
        numeric = [k for k, v in runs[0].items() if isinstance(v, float)]
        median = {k: float(np.median([r[k] for r in runs])) for k in numeric}
        median["num_queries"] = runs[0]["num_queries"]
        median["protocol"] = runs[0]["protocol"]
        table[name] = {"median": median, "runs": runs}
        if keep_artifacts:
            table[name].update(models=models, logs=logs)
    return table
