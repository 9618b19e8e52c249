"""Optimizer and the three training procedures.

Stages: joint pretraining over pseudo-labeled documents (backbone unfrozen,
both tasks), then two prompt-tuning stages that each update exactly one soft
prompt while everything else stays byte-identical. The summed pretraining
loss is reported per task so the additivity invariant is checkable at every
report step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint, new_checkpoint
from .data import (Document, EntityChain, LabeledExample, TrainItem, Tokenizer,
                   build_pretrain_batch)
from .errors import ConfigError, ContractError, DataError, DomainError
from .tensor import ParamGroup, masked_update

STAGES = (M.STAGE_PRETRAIN, M.STAGE_TUNE_ENTITY, M.STAGE_TUNE_SUMMARY)


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 30
    effective_batch: int = 8
    lr: float = 0.02               # relative-step ceiling (rho) unless relative_step=False
    relative_step: bool = True
    eval_every: int = 0            # optimizer steps between reports; 0 = once per epoch
    teacher_force_chain: bool = True
    seed: int = 0
    gap_ratio: float = 0.3

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.effective_batch < 1:
            raise ConfigError("effective_batch must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw).validate()


@dataclass
class LossReport:
    step: int
    loss_entity: float
    loss_summary: float
    loss_total: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adafactor
# ---------------------------------------------------------------------------

class Adafactor:
    """Factored-second-moment optimizer with RMS update clipping.

    Matrices keep row/column accumulators, vectors and scalars a full one.
    Decay follows beta2_t = 1 - t^decay_exponent. In relative-step mode
    (default) the step size is max(eps2, RMS(param)) * min(lr, 1/sqrt(t));
    otherwise lr is the absolute step scale. State is allocated lazily and
    only ever for trainable parameters; frozen entries are untouched.
    """

    def __init__(self, lr: float = 0.01, decay_exponent: float = -0.8,
                 clip_threshold: float = 1.0, eps1: float = 1e-30,
                 eps2: float = 1e-3, relative_step: bool = True):
        if lr <= 0:
            raise ConfigError("lr must be positive")
        self.lr = lr
        self.decay_exponent = decay_exponent
        self.clip_threshold = clip_threshold
        self.eps1 = eps1
        self.eps2 = eps2
        self.relative_step = relative_step
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params: ParamGroup, grad_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        beta2t = 1.0 - t ** self.decay_exponent
        rho_t = min(self.lr, 1.0 / math.sqrt(t)) if self.relative_step else self.lr
        updates: dict[str, np.ndarray] = {}
        for name in params.trainable_names():
            tensor = params.entries[name]
            grad = tensor.grad
            if grad is None:
                continue
            grad = grad * grad_scale
            if not math.isfinite(float(grad.sum())):
                raise DomainError(f"non-finite gradient for parameter {name!r}; step aborted")
            gsq = grad * grad + self.eps1
            if grad.ndim == 2:
                st = self.state.setdefault(name, {
                    "row": np.zeros(grad.shape[0]), "col": np.zeros(grad.shape[1]),
                })
                st["row"] = beta2t * st["row"] + (1.0 - beta2t) * gsq.sum(axis=1)
                st["col"] = beta2t * st["col"] + (1.0 - beta2t) * gsq.sum(axis=0)
                denom = np.sqrt(np.outer(st["row"], st["col"]) / st["row"].sum())
            else:
                st = self.state.setdefault(name, {"acc": np.zeros(grad.shape)})
                st["acc"] = beta2t * st["acc"] + (1.0 - beta2t) * gsq
                denom = np.sqrt(st["acc"])
            update = grad / denom
            rms = math.sqrt(float((update * update).mean()))
            update /= max(1.0, rms / self.clip_threshold)
            if self.relative_step:
                x = tensor.values
                alpha = max(self.eps2, math.sqrt(float((x * x).mean()))) * rho_t
            else:
                alpha = self.lr
            updates[name] = -alpha * update
        if updates:
            masked_update(params, updates)


# ---------------------------------------------------------------------------
# Shared step helpers
# ---------------------------------------------------------------------------

def _item_loss(params: ParamGroup, config: M.ModelConfig, tokenizer: Tokenizer,
               item: TrainItem) -> T.Tensor:
    source_ids = tokenizer.encode(item.source_tokens)
    chain_ids = None
    if item.task == M.TASK_SUMMARY:
        chain_ids = tokenizer.encode(item.chain.token_form) if item.chain is not None else []
    composed = M.compose_input(params, config, source_ids, item.task, chain_ids)
    target_ids = tokenizer.encode(item.target_tokens) + [M.EOS_ID]
    return M.forward_loss(params, config, composed, target_ids)


def mean_loss(ckpt: Checkpoint, items: list[TrainItem]) -> float:
    """Mean per-item loss without touching gradients."""
    tokenizer = ckpt.tokenizer()
    total = 0.0
    with T.no_grad():
        for item in items:
            total += _item_loss(ckpt.params, ckpt.config, tokenizer, item).item()
    return total / len(items) if items else 0.0


def _entity_item(ex: LabeledExample) -> TrainItem:
    return TrainItem(task=M.TASK_ENTITY, source_tokens=ex.source.tokens, chain=None,
                     target_tokens=ex.entity_chain.token_form, doc_id=ex.source.id)


def _summary_item(ex: LabeledExample, chain: EntityChain) -> TrainItem:
    return TrainItem(task=M.TASK_SUMMARY, source_tokens=ex.source.tokens, chain=chain,
                     target_tokens=ex.summary, doc_id=ex.source.id)


def _frozen_names(params: ParamGroup) -> list[str]:
    return [n for n in params.names() if not params.trainable[n]]


def _target_fits(config: M.ModelConfig, tokenizer: Tokenizer, item: TrainItem) -> bool:
    # BOS plus target (with EOS appended) must fit the decoder positions.
    return len(item.target_tokens) + 2 <= config.max_tgt_positions


def _run_epochs(
    ckpt: Checkpoint,
    train_items: list[TrainItem],
    val_items: list[TrainItem],
    cfg: TrainConfig,
    best_param: str,
) -> tuple[Checkpoint, list[LossReport]]:
    """Epoch loop for a prompt-tuning stage with best-validation selection.

    The complement of the tuned prompt is hash-checked after every epoch.
    """
    params, config = ckpt.params, ckpt.config
    tokenizer = ckpt.tokenizer()
    train_items = [it for it in train_items if _target_fits(config, tokenizer, it)]
    val_items = [it for it in val_items if _target_fits(config, tokenizer, it)]
    if not train_items:
        raise DataError("no training items fit the decoder position budget")
    frozen = _frozen_names(params)
    frozen_hash = params.checksum(frozen)
    opt = Adafactor(lr=cfg.lr, relative_step=cfg.relative_step)
    rng = np.random.default_rng(cfg.seed)
    reports: list[LossReport] = []

    best_val = mean_loss(ckpt, val_items) if val_items else math.inf
    best_values = params[best_param].values.copy()
    task = train_items[0].task if train_items else M.TASK_SUMMARY

    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_items))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.effective_batch):
            batch = [train_items[i] for i in order[start:start + cfg.effective_batch]]
            params.zero_grad()
            for item in batch:
                loss = _item_loss(params, config, tokenizer, item)
                epoch_loss += loss.item()
                T.backward(loss)
            opt.step(params, grad_scale=1.0 / len(batch))
            step += 1
        if params.checksum(frozen) != frozen_hash:
            raise ContractError("frozen parameters changed during prompt tuning")
        mean_train = epoch_loss / max(1, len(train_items))
        entity_part = mean_train if task == M.TASK_ENTITY else 0.0
        summary_part = mean_train if task == M.TASK_SUMMARY else 0.0
        reports.append(LossReport(step=step, loss_entity=entity_part,
                                  loss_summary=summary_part,
                                  loss_total=entity_part + summary_part))
        if val_items:
            val = mean_loss(ckpt, val_items)
            if val < best_val:
                best_val = val
                best_values = params[best_param].values.copy()
    if val_items:
        params[best_param].values = best_values
    return ckpt, reports


# ---------------------------------------------------------------------------
# Stage procedures
# ---------------------------------------------------------------------------

def pretrain(
    docs: list[Document],
    ckpt: Checkpoint,
    cfg: TrainConfig,
) -> tuple[Checkpoint, list[LossReport]]:
    """Joint two-task pretraining on pseudo-labels; every weight updates.

    Each usable document contributes one chain-generation item and one
    chain-conditioned summary item per epoch, interleaved. Reported losses
    are per-task means over the report window; their sum is the total.
    """
    cfg = TrainConfig(**{**cfg.to_dict(), "stage": M.STAGE_PRETRAIN}).validate()
    out = ckpt.clone()
    out.provenance = {"stage": M.STAGE_PRETRAIN, "seed": cfg.seed,
                      "parent_checksum": ckpt.params_checksum()}
    params, config = out.params, out.config
    tokenizer = out.tokenizer()
    M.set_stage_trainability(params, M.STAGE_PRETRAIN)

    # Per epoch, every document is re-labeled on a shuffled sentence order at
    # a gap ratio cycled around the configured one: same content, but each
    # epoch yields distinct (remainder, chain, target) triples, so the
    # teacher-forced chain stays the only reliable predictor of the target.
    # The smallest ratio produces one-sentence pseudo-summaries, keeping short
    # chains (the common intervention shape) represented.
    ratios = []
    for step in (0.0, -0.1, 0.1, 0.2, -0.05, 0.05, 0.15, -0.25):
        r = min(0.6, max(0.05, round(cfg.gap_ratio + step, 3)))
        if r not in ratios:
            ratios.append(r)

    def epoch_pairs(epoch: int) -> list[tuple[TrainItem, TrainItem]]:
        epoch_rng = np.random.default_rng((cfg.seed, epoch))
        shuffled = []
        for doc in docs:
            order = epoch_rng.permutation(len(doc.sentences)) if epoch else \
                np.arange(len(doc.sentences))
            sentences = [doc.sentences[i] for i in order]
            shuffled.append(Document(
                id=doc.id,
                text=" ".join(" ".join(s) for s in sentences),
                sentences=sentences,
            ))
        items, _ = build_pretrain_batch(shuffled, ratios[epoch % len(ratios)])
        pairs = []
        for i in range(0, len(items), 2):
            pair = (items[i], items[i + 1])
            if all(_target_fits(config, tokenizer, it) for it in pair):
                pairs.append(pair)
        return pairs

    if not epoch_pairs(0):
        raise DataError("no usable pretraining documents")

    opt = Adafactor(lr=cfg.lr, relative_step=cfg.relative_step)
    rng = np.random.default_rng(cfg.seed)
    reports: list[LossReport] = []
    window = {"entity": [], "summary": []}
    step = 0
    report_every = cfg.eval_every

    def flush():
        if not window["entity"] and not window["summary"]:
            return
        le = float(np.mean(window["entity"])) if window["entity"] else 0.0
        ls = float(np.mean(window["summary"])) if window["summary"] else 0.0
        reports.append(LossReport(step=step, loss_entity=le, loss_summary=ls,
                                  loss_total=le + ls))
        window["entity"].clear()
        window["summary"].clear()

    for epoch in range(cfg.epochs):
        pairs = epoch_pairs(epoch)
        if not pairs:
            continue
        order = rng.permutation(len(pairs))
        flat = [item for i in order for item in pairs[i]]
        for start in range(0, len(flat), cfg.effective_batch):
            batch = flat[start:start + cfg.effective_batch]
            params.zero_grad()
            for item in batch:
                loss = _item_loss(params, config, tokenizer, item)
                window[item.task].append(loss.item())
                T.backward(loss)
            opt.step(params, grad_scale=1.0 / len(batch))
            step += 1
            if report_every and step % report_every == 0:
                flush()
        if not report_every:
            flush()
    flush()
    return out, reports


def tune_entity_prompt(
    train: list[LabeledExample],
    val: list[LabeledExample],
    ckpt: Checkpoint,
    cfg: TrainConfig,
) -> tuple[Checkpoint, list[LossReport]]:
    """Optimize only the entity prompt on (source, chain) supervision."""
    cfg = TrainConfig(**{**cfg.to_dict(), "stage": M.STAGE_TUNE_ENTITY}).validate()
    if not train:
        raise DataError("empty entity-tuning dataset")
    out = ckpt.clone()
    out.provenance = {"stage": M.STAGE_TUNE_ENTITY, "seed": cfg.seed,
                      "parent_checksum": ckpt.params_checksum()}
    M.set_stage_trainability(out.params, M.STAGE_TUNE_ENTITY)
    return _run_epochs(out, [_entity_item(ex) for ex in train],
                       [_entity_item(ex) for ex in val], cfg,
                       best_param=M.PROMPT_PARAM[M.TASK_ENTITY])


def tune_summary_prompt(
    train: list[LabeledExample],
    val: list[LabeledExample],
    ckpt: Checkpoint,
    cfg: TrainConfig,
    inferred_chains: list[EntityChain] | None = None,
) -> tuple[Checkpoint, list[LossReport]]:
    """Optimize only the summary prompt on (source, chain, summary) triples.

    With teacher_force_chain the ground-truth chain conditions each item (no
    decoding anywhere in this stage); otherwise pre-inferred chains, aligned
    with `train`, must be supplied.
    """
    cfg = TrainConfig(**{**cfg.to_dict(), "stage": M.STAGE_TUNE_SUMMARY}).validate()
    if not train:
        raise DataError("empty summary-tuning dataset")
    if cfg.teacher_force_chain:
        chains = [ex.entity_chain for ex in train]
    else:
        if inferred_chains is None or len(inferred_chains) != len(train):
            raise ContractError("teacher_force_chain=false requires one inferred chain per example")
        chains = inferred_chains
    out = ckpt.clone()
    out.provenance = {"stage": M.STAGE_TUNE_SUMMARY, "seed": cfg.seed,
                      "parent_checksum": ckpt.params_checksum()}
    M.set_stage_trainability(out.params, M.STAGE_TUNE_SUMMARY)
    train_items = [_summary_item(ex, ch) for ex, ch in zip(train, chains)]
    val_items = [_summary_item(ex, ex.entity_chain) for ex in val]
    return _run_epochs(out, train_items, val_items, cfg,
                       best_param=M.PROMPT_PARAM[M.TASK_SUMMARY])
