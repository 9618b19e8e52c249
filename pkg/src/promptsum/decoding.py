"""Autoregressive generation: beam search, diverse beam search, entity-chain
sampling, and the two-stage inference pipeline (chain first, then summary).

All decoding is deterministic given a checkpoint; only entity-chain sampling
consumes a seed. Ties in candidate selection break lexicographically on the
token sequence, so results are stable across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .data import (BOS, EOS, PAD, SEP_ENT, Document, EntityChain,
                   parse_chain_tokens, tag_entities, truncate_chain)
from .errors import ConfigError, ContractError, DocumentSkipped
from .tensor import ParamGroup


@dataclass
class GenConfig:
    beam_width: int = 4
    max_len: int = 64
    length_penalty: float = 1.0
    repetition_penalty: float = 1.0
    diverse_groups: int = 1
    diversity_penalty: float = 0.0
    seed: int = 0
    max_source_tokens: int | None = None

    def validate(self) -> "GenConfig":
        if self.beam_width < 1 or self.max_len < 1:
            raise ConfigError("beam_width and max_len must be >= 1")
        if self.repetition_penalty <= 0:
            raise ConfigError("repetition_penalty must be positive")
        if self.diverse_groups < 1:
            raise ConfigError("diverse_groups must be >= 1")
        if self.diverse_groups > 1:
            if self.diverse_groups > self.beam_width:
                raise ConfigError("more diverse groups than beams")
            if self.beam_width % self.diverse_groups != 0:
                raise ConfigError("diverse_groups must divide beam_width")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        return cls(**raw).validate()


# Named generation profiles: (max source tokens, max target tokens) with the
# shared beam width 4 and neutral penalties.
GEN_PRESETS: dict[str, GenConfig] = {
    "cnn_dm": GenConfig(max_len=128, max_source_tokens=768),
    "xsum": GenConfig(max_len=64, max_source_tokens=768),
    "billsum": GenConfig(max_len=256, max_source_tokens=1024),
    "samsum": GenConfig(max_len=64, max_source_tokens=512),
}


# Reserved tokens never emitted at inference: the chain stage may produce the
# separator, the summary stage may not.
CHAIN_SUPPRESS: tuple[int, ...] = (M.PAD_ID, M.BOS_ID, M.UNK_ID)
SUMMARY_SUPPRESS: tuple[int, ...] = (M.PAD_ID, M.BOS_ID, M.SEP_ENT_ID, M.UNK_ID)


@dataclass
class GenerationResult:
    tokens: list[int]
    score: float
    finished: bool


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _apply_repetition_penalty(logits: np.ndarray, emitted: tuple[int, ...],
                              penalty: float) -> np.ndarray:
    if penalty == 1.0 or not emitted:
        return logits
    out = logits.copy()
    for tok in set(emitted):
        out[tok] = out[tok] / penalty if out[tok] > 0 else out[tok] * penalty
    return out


def _final_score(sum_logp: float, length: int, length_penalty: float) -> float:
    return sum_logp / (length ** length_penalty)


def _beam_frontier(
    params: ParamGroup,
    config: M.ModelConfig,
    enc_states: T.Tensor,
    cfg: GenConfig,
    width: int,
    step_bias: "list[np.ndarray] | None" = None,
    suppress_ids: tuple[int, ...] = (),
) -> list[GenerationResult]:
    """Frontier beam search of the given width.

    Each step expands every live hypothesis, then keeps the global top
    `width` candidates (finished hypotheses occupy slots, so width 1 is exactly
    greedy decoding). step_bias, when given, supplies one additive logit bias
    per step (diverse-group penalties).
    """
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[GenerationResult] = []
    vocab = config.vocab_size
    per_beam = min(vocab, 2 * width)
    capacity = width  # frontier slots; finished hypotheses retire and keep theirs

    for step in range(cfg.max_len):
        if not live or capacity <= 0:
            break
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for ids, sum_logp in live:
            logits = M.next_token_logits(params, config, enc_states, list(ids))
            logits = _apply_repetition_penalty(logits, ids, cfg.repetition_penalty)
            if suppress_ids:
                logits = logits.copy()
                logits[list(suppress_ids)] = -1e9
            if step_bias is not None:
                logits = logits + step_bias[step]
            logp = _log_softmax(logits)
            top = np.argsort(-logp, kind="stable")[:per_beam]
            for tok in top:
                tok = int(tok)
                candidates.append((sum_logp + float(logp[tok]), ids + (tok,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for sum_logp, ids in candidates[:capacity]:
            if ids[-1] == M.EOS_ID or step == cfg.max_len - 1:
                finished.append(GenerationResult(
                    tokens=list(ids),
                    score=_final_score(sum_logp, len(ids), cfg.length_penalty),
                    finished=ids[-1] == M.EOS_ID,
                ))
                capacity -= 1
            else:
                live.append((ids, sum_logp))
    finished.sort(key=lambda r: (-r.score, r.tokens))
    return finished


def beam_search(
    params: ParamGroup,
    config: M.ModelConfig,
    composed: M.ComposedInput,
    cfg: GenConfig,
    suppress_ids: tuple[int, ...] = (),
) -> list[GenerationResult]:
    """Deterministic beam search; hypotheses end at EOS or max_len.

    Scores are length-penalized mean log-probabilities:
    sum(log p) / len ** length_penalty. suppress_ids are never emitted
    (reserved control tokens at inference time).
    """
    cfg.validate()
    with T.no_grad():
        enc = M.encode(params, config, composed)
    results = _beam_frontier(params, config, enc, cfg, cfg.beam_width,
                             suppress_ids=suppress_ids)
    return results[: cfg.beam_width]


def diverse_beam_search(
    params: ParamGroup,
    config: M.ModelConfig,
    composed: M.ComposedInput,
    cfg: GenConfig,
    suppress_ids: tuple[int, ...] = (),
) -> list[GenerationResult]:
    """Group-wise diverse beam search.

    The beam is split into diverse_groups equal groups decoded sequentially at
    each step; group g sees a logit penalty of diversity_penalty times the
    number of times each token was already selected at this step by earlier
    groups. Results are returned group-major (top of each group first).
    """
    cfg.validate()
    if cfg.diverse_groups < 2:
        raise ConfigError("diverse_beam_search needs diverse_groups >= 2")
    group_width = cfg.beam_width // cfg.diverse_groups
    with T.no_grad():
        enc = M.encode(params, config, composed)

    # Sequential-group approximation: each group runs frontier beam search with
    # a per-step penalty accumulated from the token choices of earlier groups.
    step_counts: list[np.ndarray] = [np.zeros(config.vocab_size) for _ in range(cfg.max_len)]
    out: list[GenerationResult] = []
    for _ in range(cfg.diverse_groups):
        bias = None
        if cfg.diversity_penalty > 0.0:
            bias = [-cfg.diversity_penalty * counts for counts in step_counts]
        group_cfg = GenConfig(**{**cfg.to_dict(), "diverse_groups": 1,
                                 "beam_width": group_width})
        results = _beam_frontier(params, config, enc, group_cfg, group_width,
                                 step_bias=bias, suppress_ids=suppress_ids)
        results = results[:group_width]
        out.extend(results)
        for res in results:
            for step, tok in enumerate(res.tokens):
                step_counts[step][tok] += 1.0
    return out


def sample_entity_chain(
    doc: Document,
    mode: str = "random_k",
    k: int = 1,
    n: int = 10,
    seed: int = 0,
    gazetteer: frozenset[str] = frozenset(),
    max_chain_entities: int = 4,
) -> list[EntityChain]:
    """Uniform sampling (without replacement) over the document's unique
    taggable entities; chain order is the sampled order.

    random_k: one chain of exactly k entities; documents with fewer than k
    entities are skipped. random_chains: n chains of random size in
    [1, max_chain_entities].
    """
    entities = tag_entities(doc.text, gazetteer)
    rng = np.random.default_rng(seed)
    pool = np.array(entities, dtype=object)
    if mode == "random_k":
        if len(entities) < k:
            raise DocumentSkipped(f"document {doc.id!r} has {len(entities)} < {k} entities")
        picked = [str(e) for e in rng.choice(pool, size=k, replace=False)]
        return [EntityChain(picked)]
    if mode == "random_chains":
        if not entities:
            raise DocumentSkipped(f"document {doc.id!r} has no taggable entities")
        chains = []
        for _ in range(n):
            size = int(rng.integers(1, min(max_chain_entities, len(entities)) + 1))
            picked = [str(e) for e in rng.choice(pool, size=size, replace=False)]
            chains.append(EntityChain(picked))
        return chains
    raise ContractError(f"unknown sampling mode {mode!r}")


@dataclass
class TwoStageResult:
    chain: EntityChain
    summary_tokens: list[str]
    summary_score: float
    chain_source: str            # "predicted" | "override"
    chain_parse_ok: bool = True
    source_truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "chain": self.chain.entities,
            "summary_tokens": self.summary_tokens,
            "summary_score": self.summary_score,
            "chain_source": self.chain_source,
            "chain_parse_ok": self.chain_parse_ok,
            "source_truncated": self.source_truncated,
        }


def predict_chain(ckpt: Checkpoint, doc: Document, cfg: GenConfig) -> tuple[EntityChain, bool]:
    """Stage 1: decode an entity chain with the entity prompt.

    Output without separator structure degrades to a one-entity chain; the
    returned flag is False when that fallback merged multiple tokens.
    """
    tokenizer = ckpt.tokenizer()
    source_ids = _source_ids(ckpt, doc, cfg)
    composed = M.compose_input(ckpt.params, ckpt.config, source_ids, M.TASK_ENTITY)
    chain_cfg = GenConfig(**{**cfg.to_dict(), "max_len": ckpt.config.entity_chain_cap,
                             "diverse_groups": 1, "diversity_penalty": 0.0})
    results = beam_search(ckpt.params, ckpt.config, composed, chain_cfg,
                          suppress_ids=CHAIN_SUPPRESS)
    tokens = tokenizer.decode(results[0].tokens)
    content = [t for t in tokens if t not in (PAD, BOS, EOS)]
    parse_ok = SEP_ENT in content or len(content) <= 1
    chain = parse_chain_tokens(tokens)
    return truncate_chain(chain, ckpt.config.entity_chain_cap), parse_ok


def _source_ids(ckpt: Checkpoint, doc: Document, cfg: GenConfig) -> list[int]:
    tokens = doc.tokens
    if cfg.max_source_tokens is not None:
        tokens = tokens[: cfg.max_source_tokens]
    return ckpt.tokenizer().encode(tokens)


def generate_two_stage(
    ckpt: Checkpoint,
    doc: Document,
    cfg: GenConfig,
    chain_override: EntityChain | None = None,
    include_summary_prompt: bool = True,
) -> TwoStageResult:
    """Full inference: predict (or accept) an entity chain, then decode the
    summary conditioned on it."""
    cfg.validate()
    tokenizer = ckpt.tokenizer()
    if chain_override is None:
        chain, parse_ok = predict_chain(ckpt, doc, cfg)
        chain_source = "predicted"
    else:
        chain = truncate_chain(chain_override, ckpt.config.entity_chain_cap)
        parse_ok = True
        chain_source = "override"

    source_ids = _source_ids(ckpt, doc, cfg)
    chain_ids = tokenizer.encode(chain.token_form)
    composed = M.compose_input(ckpt.params, ckpt.config, source_ids, M.TASK_SUMMARY,
                               chain_ids, include_prompt=include_summary_prompt)
    results = beam_search(ckpt.params, ckpt.config, composed, cfg,
                          suppress_ids=SUMMARY_SUPPRESS)
    best = results[0]
    summary_ids = [t for t in best.tokens if t != M.EOS_ID]
    return TwoStageResult(
        chain=chain,
        summary_tokens=tokenizer.decode(summary_ids),
        summary_score=best.score,
        chain_source=chain_source,
        chain_parse_ok=parse_ok,
        source_truncated=composed.source_truncated,
    )
