"""End-to-end runs: corpus preparation, the standard two-prompt training
pipeline, the ablation variants, and the controllability / hallucination /
diversity / correlation experiments.

Every run is a pure function of (profile, sizes, seeds, configs), so repeated
invocations produce byte-identical checkpoints and metric reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics as X
from . import model as M
from .checkpoint import Checkpoint, new_checkpoint
from .data import (Document, EntityChain, LabeledExample, SynthProfile, Tokenizer,
                   fewshot_split, synth_corpus, detokenize)
from .decoding import GenConfig, TwoStageResult, diverse_beam_search, generate_two_stage, \
    predict_chain, sample_entity_chain
from .errors import ConfigError, DocumentSkipped
from .training import LossReport, TrainConfig, pretrain, tune_entity_prompt, tune_summary_prompt

ABLATION_VARIANTS = ("full", "no_pretrain", "no_tune_E", "no_chain", "no_tune_S", "no_S_prompt")


@dataclass
class RunSettings:
    """Desk-scale defaults for synthetic end-to-end runs."""

    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 1
    n_dec_layers: int = 1
    d_ff: int = 256
    prompt_len: int = 16
    entity_chain_cap: int = 24
    max_src_positions: int = 320
    max_tgt_positions: int = 80

    pretrain_docs: int = 200
    pool_size: int = 300
    test_size: int = 100
    fewshot_n: int = 100

    pretrain_epochs: int = 20
    pretrain_lr: float = 0.02
    tune_epochs: int = 30
    tune_lr: float = 0.02
    effective_batch: int = 8
    gap_ratio: float = 0.3

    beam_width: int = 4
    max_summary_len: int = 32
    model_seed: int = 17

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            d_ff=self.d_ff,
            max_src_positions=self.max_src_positions,
            max_tgt_positions=self.max_tgt_positions,
            prompt_len=self.prompt_len,
            entity_chain_cap=self.entity_chain_cap,
        ).validate()

    def gen_config(self) -> GenConfig:
        return GenConfig(beam_width=self.beam_width, max_len=self.max_summary_len).validate()

    def pretrain_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(stage=M.STAGE_PRETRAIN, epochs=self.pretrain_epochs,
                           effective_batch=self.effective_batch, lr=self.pretrain_lr,
                           gap_ratio=self.gap_ratio, seed=seed).validate()

    def tune_config(self, stage: str, seed: int) -> TrainConfig:
        return TrainConfig(stage=stage, epochs=self.tune_epochs,
                           effective_batch=self.effective_batch, lr=self.tune_lr,
                           seed=seed).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorpusBundle:
    profile: SynthProfile
    pretrain_examples: list[LabeledExample]
    pool: list[LabeledExample]
    test: list[LabeledExample]

    @property
    def pretrain_docs(self) -> list[Document]:
        return [ex.source for ex in self.pretrain_examples]


def make_corpus_bundle(profile: SynthProfile, settings: RunSettings,
                       seed_base: int = 1000) -> CorpusBundle:
    return CorpusBundle(
        profile=profile,
        pretrain_examples=synth_corpus(seed_base, settings.pretrain_docs, profile),
        pool=synth_corpus(seed_base + 1, settings.pool_size, profile),
        test=synth_corpus(seed_base + 2, settings.test_size, profile),
    )


def build_initial_checkpoint(bundle: CorpusBundle, settings: RunSettings) -> Checkpoint:
    """Fresh model: vocabulary from the training-side corpus, deterministic
    weights, soft prompts initialized from the most frequent token embeddings.

    Each prompt uses the frequency table of its own task's target text (chain
    serializations for the entity prompt, summaries for the summary prompt) so
    the two prompts are distinguishable from the first step.
    """
    examples = bundle.pretrain_examples + bundle.pool
    texts = [ex.source.text for ex in examples]
    texts += [detokenize(ex.summary) for ex in examples]
    tokenizer = Tokenizer.build(texts)
    config = settings.model_config(len(tokenizer))
    params = M.build_model(config, settings.model_seed)

    def id_freqs(sample_texts: list[str]) -> dict[int, int]:
        freqs = tokenizer.frequencies(sample_texts)
        return {tokenizer.token_to_id[t]: c for t, c in freqs.items()}

    chain_texts = [detokenize(ex.entity_chain.token_form) for ex in examples]
    summary_texts = [detokenize(ex.summary) for ex in examples]
    M.init_soft_prompt(params, M.TASK_ENTITY, id_freqs(chain_texts) or id_freqs(texts))
    M.init_soft_prompt(params, M.TASK_SUMMARY, id_freqs(summary_texts) or id_freqs(texts))
    return new_checkpoint(config, tokenizer.vocab, params, stage="init",
                          seed=settings.model_seed)


@dataclass
class TrainedRun:
    seed: int
    checkpoint: Checkpoint
    reports: dict[str, list[LossReport]] = field(default_factory=dict)


def train_standard(
    bundle: CorpusBundle,
    settings: RunSettings,
    seeds: list[int] = (1, 2, 3),
    skip_pretrain: bool = False,
    skip_tune_entity: bool = False,
    skip_tune_summary: bool = False,
) -> tuple[Checkpoint, list[TrainedRun]]:
    """Pretrain once, then run the two prompt-tuning stages per few-shot seed.

    Returns the shared pretrained checkpoint and one finished run per seed.
    """
    base = build_initial_checkpoint(bundle, settings)
    pretrain_reports: list[LossReport] = []
    if skip_pretrain:
        pretrained = base
    else:
        pretrained, pretrain_reports = pretrain(bundle.pretrain_docs, base,
                                                settings.pretrain_config())
    runs: list[TrainedRun] = []
    splits = fewshot_split(bundle.pool, settings.fewshot_n, list(seeds))
    for seed, (train, val) in zip(seeds, splits):
        reports: dict[str, list[LossReport]] = {"pretrain": pretrain_reports}
        current = pretrained
        if not skip_tune_entity:
            current, rep = tune_entity_prompt(train, val, current,
                                              settings.tune_config(M.STAGE_TUNE_ENTITY, seed))
            reports["tune_entity"] = rep
        if not skip_tune_summary:
            current, rep = tune_summary_prompt(train, val, current,
                                               settings.tune_config(M.STAGE_TUNE_SUMMARY, seed))
            reports["tune_summary"] = rep
        runs.append(TrainedRun(seed=seed, checkpoint=current, reports=reports))
    return pretrained, runs


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalOutputs:
    chains: list[EntityChain]
    summaries: list[list[str]]
    results: list[TwoStageResult]


def evaluate_checkpoint(
    ckpt: Checkpoint,
    examples: list[LabeledExample],
    gen: GenConfig,
    label: str = "",
    chain_override_empty: bool = False,
    include_summary_prompt: bool = True,
) -> tuple[X.MetricReport, EvalOutputs]:
    """Two-stage inference over a labeled set plus the core quality metrics."""
    chains, summaries, results = [], [], []
    for ex in examples:
        override = EntityChain([]) if chain_override_empty else None
        res = generate_two_stage(ckpt, ex.source, gen, chain_override=override,
                                 include_summary_prompt=include_summary_prompt)
        chains.append(res.chain)
        summaries.append(res.summary_tokens)
        results.append(res)

    r1s, r2s, rls, prfs, pairs = [], [], [], [], []
    abstract = {1: [], 2: [], 3: []}
    for ex, chain, summary in zip(examples, chains, summaries):
        scores = X.rouge_suite(summary, ex.summary)
        r1s.append(scores["rouge1"])
        r2s.append(scores["rouge2"])
        rls.append(scores["rougeL"])
        prfs.append(X.entity_prf(chain, ex.entity_chain))
        chain_scores = X.rouge_suite(chain.token_form, ex.entity_chain.token_form)
        pairs.append((X.mean_rouge_f(chain_scores), X.mean_rouge_f(scores)))
        for n, v in X.abstractiveness(summary, ex.source.tokens).items():
            abstract[n].append(v)

    def mean_score(scores: list[X.RougeScore]) -> X.RougeScore:
        return X.RougeScore(
            precision=float(np.mean([s.precision for s in scores])),
            recall=float(np.mean([s.recall for s in scores])),
            f1=float(np.mean([s.f1 for s in scores])),
        )

    report = X.MetricReport(
        label=label,
        rouge1=mean_score(r1s),
        rouge2=mean_score(r2s),
        rougeL=mean_score(rls),
        entity_prf=mean_score(prfs),
        abstractiveness={n: float(np.mean(v)) for n, v in abstract.items()},
        correlation=X.correlation_report(pairs) if len(pairs) >= 10 else None,
    )
    return report, EvalOutputs(chains=chains, summaries=summaries, results=results)


def run_ablation(
    variant: str,
    bundle: CorpusBundle,
    settings: RunSettings,
    seeds: list[int] = (1, 2, 3),
) -> list[X.MetricReport]:
    """Train and evaluate one pipeline variant; one report per few-shot seed.

    full          standard pipeline;
    no_pretrain   random backbone, prompts still tuned;
    no_tune_E     chains decoded with the pretraining-stage entity prompt;
    no_chain      summaries decoded with an empty discrete chain;
    no_tune_S     summary prompt left at its pretraining state;
    no_S_prompt   summary decoded without any soft prompt segment.
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    _, runs = train_standard(
        bundle, settings, seeds,
        skip_pretrain=(variant == "no_pretrain"),
        skip_tune_entity=(variant == "no_tune_E"),
        skip_tune_summary=(variant == "no_tune_S"),
    )
    gen = settings.gen_config()
    reports = []
    for run in runs:
        report, _ = evaluate_checkpoint(
            run.checkpoint, bundle.test, gen,
            label=f"{variant}/seed{run.seed}",
            chain_override_empty=(variant == "no_chain"),
            include_summary_prompt=(variant != "no_S_prompt"),
        )
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def controllability_experiment(
    ckpt: Checkpoint,
    examples: list[LabeledExample],
    ks: list[int] = (1, 2, 5),
    n_docs: int = 100,
    seed: int = 7,
    gen: GenConfig | None = None,
) -> dict[int, float]:
    """Success rate of forcing K source entities into the summary.

    For each K, sample documents that admit K unique entities, intervene with
    a random K-entity chain, and require every entity to appear.
    """
    gen = gen or GenConfig()
    rates: dict[int, float] = {}
    for k in ks:
        chains, summaries = [], []
        for ex in examples:
            if len(summaries) >= n_docs:
                break
            try:
                chain = sample_entity_chain(ex.source, mode="random_k", k=k,
                                            seed=seed + 1000 * k)[0]
            except DocumentSkipped:
                continue
            res = generate_two_stage(ckpt, ex.source, gen, chain_override=chain)
            chains.append(chain)
            summaries.append(res.summary_tokens)
        rates[k] = X.controllability_success(summaries, chains) if summaries else 0.0
    return rates


@dataclass
class HallucinationOutcome:
    n_hallucinated: int
    n_clean: int
    pct_uncontrolled: float
    pct_controlled: float
    mean_rouge_uncontrolled: float
    mean_rouge_controlled: float

    def to_dict(self) -> dict:
        return asdict(self)


def hallucination_experiment(
    ckpt: Checkpoint,
    examples: list[LabeledExample],
    gen: GenConfig | None = None,
) -> HallucinationOutcome:
    """Measure summary hallucination with and without pruning source-absent
    entities from the predicted chains, on the chain-hallucinating subset."""
    gen = gen or GenConfig()
    chains = [predict_chain(ckpt, ex.source, gen)[0] for ex in examples]
    sources = [ex.source for ex in examples]
    split = X.split_by_hallucination(chains, sources)

    def summarize(indices, control: bool):
        sums, rouges = [], []
        for i in indices:
            chain = X.control_chain(chains[i], sources[i].text) if control else chains[i]
            res = generate_two_stage(ckpt, sources[i], gen, chain_override=chain)
            sums.append(res.summary_tokens)
            rouges.append(X.mean_rouge_f(X.rouge_suite(res.summary_tokens, examples[i].summary)))
        return sums, rouges

    idx = split.hallucinated
    uncontrolled, rouge_u = summarize(idx, control=False)
    controlled, rouge_c = summarize(idx, control=True)
    docs = [sources[i] for i in idx]
    return HallucinationOutcome(
        n_hallucinated=len(idx),
        n_clean=len(split.non_hallucinated),
        pct_uncontrolled=X.hallucination_pct(uncontrolled, docs),
        pct_controlled=X.hallucination_pct(controlled, docs),
        mean_rouge_uncontrolled=float(np.mean(rouge_u)) if rouge_u else 0.0,
        mean_rouge_controlled=float(np.mean(rouge_c)) if rouge_c else 0.0,
    )


def diversity_experiment(
    ckpt: Checkpoint,
    examples: list[LabeledExample],
    n_docs: int = 50,
    n_candidates: int = 10,
    seed: int = 11,
    gen: GenConfig | None = None,
) -> dict[str, X.DiversityReport]:
    """Candidate diversity from two generators: chains sampled from source
    entities versus diverse beam search on the predicted chain."""
    gen = gen or GenConfig()
    dbs_cfg = GenConfig(beam_width=n_candidates, max_len=gen.max_len,
                        diverse_groups=n_candidates, diversity_penalty=1.0).validate()
    sampled_sets, dbs_sets, references = [], [], []
    tokenizer = ckpt.tokenizer()
    for ex in examples:
        if len(references) >= n_docs:
            break
        try:
            chains = sample_entity_chain(ex.source, mode="random_chains",
                                         n=n_candidates, seed=seed + len(references))
        except DocumentSkipped:
            continue
        cand_set = [
            generate_two_stage(ckpt, ex.source, gen, chain_override=c).summary_tokens
            for c in chains
        ]
        pred_chain, _ = predict_chain(ckpt, ex.source, gen)
        source_ids = tokenizer.encode(ex.source.tokens)
        chain_ids = tokenizer.encode(pred_chain.token_form)
        composed = M.compose_input(ckpt.params, ckpt.config, source_ids,
                                   M.TASK_SUMMARY, chain_ids)
        from .decoding import SUMMARY_SUPPRESS
        dbs_results = diverse_beam_search(ckpt.params, ckpt.config, composed, dbs_cfg,
                                          suppress_ids=SUMMARY_SUPPRESS)
        dbs_set = [tokenizer.decode([t for t in r.tokens if t != M.EOS_ID])
                   for r in dbs_results]
        sampled_sets.append(cand_set)
        dbs_sets.append(dbs_set)
        references.append(ex.summary)
    return {
        "entity_sampling": X.diversity_report(sampled_sets, references, seed=seed),
        "diverse_beam": X.diversity_report(dbs_sets, references, seed=seed),
    }
