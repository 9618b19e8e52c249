"""Evaluation instruments: ROUGE, entity precision/recall/F1, controllability
success rate, hallucination analysis and control, abstractiveness, candidate
diversity, and the entity-vs-summary quality correlation.

Everything here is a pure function over token lists or entity chains, so
repeated calls are bit-identical and safe to parallelize over examples.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Document, EntityChain, split_sentences, tag_entity_spans, tokenize
from .errors import ContractError

_TERMINAL_PUNCT = "".join(c for c in string.punctuation if c not in "%")


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, cand_total: float, ref_total: float) -> "RougeScore":
        p = overlap / cand_total if cand_total else 0.0
        r = overlap / ref_total if ref_total else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(precision=p, recall=r, f1=f)

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: list[str], reference: list[str], n: int) -> RougeScore:
    """Clipped n-gram overlap: P over candidate n-grams, R over reference."""
    if n not in (1, 2):
        raise ContractError(f"rouge_n supports n in {{1, 2}}, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def _lcs_hit_positions(ref: list[str], cand: list[str]) -> set[int]:
    """Reference-token positions matched by one LCS of (ref, cand)."""
    n, m = len(ref), len(cand)
    if n == 0 or m == 0:
        return set()
    dp = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if ref[i - 1] == cand[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    hits: set[int] = set()
    i, j = n, m
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1] and dp[i, j] == dp[i - 1, j - 1] + 1:
            hits.add(i - 1)
            i -= 1
            j -= 1
        elif dp[i - 1, j] >= dp[i, j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def rouge_l_summary(candidate_sentences: list[list[str]],
                    reference_sentences: list[list[str]]) -> RougeScore:
    """Summary-level ROUGE-L: per reference sentence, the union of LCS hits
    against every candidate sentence; P over candidate length, R over
    reference length."""
    cand_total = sum(len(s) for s in candidate_sentences)
    ref_total = sum(len(s) for s in reference_sentences)
    hits = 0
    for ref_sent in reference_sentences:
        union: set[int] = set()
        for cand_sent in candidate_sentences:
            union |= _lcs_hit_positions(ref_sent, cand_sent)
        hits += len(union)
    return RougeScore.from_counts(hits, cand_total, ref_total)


def rouge_suite(candidate: list[str], reference: list[str]) -> dict[str, RougeScore]:
    """ROUGE-1/2 plus summary-level ROUGE-L over sentence-split inputs."""
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l_summary(split_sentences(candidate), split_sentences(reference)),
    }


# ---------------------------------------------------------------------------
# Entity matching
# ---------------------------------------------------------------------------

def normalize_entity(entity: str) -> str:
    """Lowercase, collapse whitespace, strip terminal punctuation."""
    collapsed = " ".join(entity.lower().split())
    return collapsed.strip(_TERMINAL_PUNCT + " ")


def entity_in_text(entity: str, text: str) -> bool:
    """Word-boundary substring membership after normalization (no stemming,
    no partial-token overlap)."""
    norm_ent = normalize_entity(entity)
    if not norm_ent:
        return False
    norm_text = " ".join(tokenize(text)).lower()
    return f" {norm_ent} " in f" {norm_text} "


def entity_prf(predicted: EntityChain, reference: EntityChain) -> RougeScore:
    """Set-based, order-insensitive match over normalized entity strings.

    Both sides empty counts as a perfect prediction; exactly one side empty
    scores zero.
    """
    pred = {normalize_entity(e) for e in predicted.entities if normalize_entity(e)}
    ref = {normalize_entity(e) for e in reference.entities if normalize_entity(e)}
    if not pred and not ref:
        return RougeScore(1.0, 1.0, 1.0)
    if not pred or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = len(pred & ref)
    return RougeScore.from_counts(overlap, len(pred), len(ref))


def controllability_success(summaries: list[list[str]],
                            chains: list[EntityChain]) -> float:
    """Percent of examples whose summary mentions every chain entity.

    All-or-nothing per example: one missing entity fails the whole example.
    """
    if len(summaries) != len(chains):
        raise ContractError(f"{len(summaries)} summaries vs {len(chains)} chains")
    if not summaries:
        return 0.0
    successes = 0
    for summary, chain in zip(summaries, chains):
        text = " ".join(summary)
        if all(entity_in_text(e, text) for e in chain.entities):
            successes += 1
    return 100.0 * successes / len(summaries)


# ---------------------------------------------------------------------------
# Hallucination suite
# ---------------------------------------------------------------------------

@dataclass
class HallucinationSplit:
    non_hallucinated: list[int]             # indices into the input lists
    hallucinated: list[int]
    hallucinated_entities: dict[int, list[str]]


def hallucinated_entities(chain: EntityChain, source_text: str) -> list[str]:
    return [e for e in chain.entities if not entity_in_text(e, source_text)]


def split_by_hallucination(chains: list[EntityChain],
                           sources: list[Document]) -> HallucinationSplit:
    """Partition examples by whether the predicted chain contains at least one
    entity absent from the source."""
    if len(chains) != len(sources):
        raise ContractError(f"{len(chains)} chains vs {len(sources)} sources")
    split = HallucinationSplit([], [], {})
    for i, (chain, doc) in enumerate(zip(chains, sources)):
        bad = hallucinated_entities(chain, doc.text)
        if bad:
            split.hallucinated.append(i)
            split.hallucinated_entities[i] = bad
        else:
            split.non_hallucinated.append(i)
    return split


def control_chain(chain: EntityChain, source_text: str) -> EntityChain:
    """Remove exactly the entities not matched in the source (idempotent);
    may yield an empty chain."""
    kept = [e for e in chain.entities if entity_in_text(e, source_text)]
    return EntityChain(kept)


def hallucination_pct(summaries: list[list[str]], sources: list[Document],
                      gazetteer: frozenset[str] = frozenset()) -> float:
    """Percent of entity mentions in generated summaries that are absent from
    their source documents. Mention-level: repeated occurrences all count."""
    if len(summaries) != len(sources):
        raise ContractError(f"{len(summaries)} summaries vs {len(sources)} sources")
    total = 0
    bad = 0
    for summary, doc in zip(summaries, sources):
        text = " ".join(summary)
        for _, surface in tag_entity_spans(text, gazetteer):
            total += 1
            if not entity_in_text(surface, doc.text):
                bad += 1
    return 100.0 * bad / total if total else 0.0


# ---------------------------------------------------------------------------
# Abstractiveness, diversity, correlation
# ---------------------------------------------------------------------------

def abstractiveness(summary: list[str], source: list[str]) -> dict[int, float]:
    """Fraction of distinct summary n-grams absent from the source, n in 1..3.

    A summary shorter than n has no n-grams; that entry reports 0.0.
    """
    out: dict[int, float] = {}
    for n in (1, 2, 3):
        grams = set(_ngrams(summary, n))
        if not grams:
            out[n] = 0.0
            continue
        src = set(_ngrams(source, n))
        out[n] = len([g for g in grams if g not in src]) / len(grams)
    return out


@dataclass
class DiversityReport:
    oracle_r1: float
    inter_r1: float | None
    random_r1: float

    def to_dict(self) -> dict:
        return asdict(self)


def diversity_report(candidate_sets: list[list[list[str]]],
                     references: list[list[str]], seed: int = 0) -> DiversityReport:
    """Candidate-set quality/diversity in ROUGE-1 F fractions.

    oracle: mean over documents of the best candidate. inter: mean pairwise
    score among candidates (absent with a single candidate). random: one
    seeded uniform pick per document.
    """
    if len(candidate_sets) != len(references):
        raise ContractError(f"{len(candidate_sets)} candidate sets vs {len(references)} references")
    if not candidate_sets:
        raise ContractError("no candidate sets")
    rng = np.random.default_rng(seed)
    oracle_vals, inter_vals, random_vals = [], [], []
    for cands, ref in zip(candidate_sets, references):
        if not cands:
            raise ContractError("empty candidate set")
        scores = [rouge_n(c, ref, 1).f1 for c in cands]
        oracle_vals.append(max(scores))
        random_vals.append(scores[int(rng.integers(0, len(scores)))])
        if len(cands) >= 2:
            pair_scores = [
                rouge_n(cands[i], cands[j], 1).f1
                for i in range(len(cands)) for j in range(i + 1, len(cands))
            ]
            inter_vals.append(float(np.mean(pair_scores)))
    inter = float(np.mean(inter_vals)) if inter_vals else None
    return DiversityReport(
        oracle_r1=float(np.mean(oracle_vals)),
        inter_r1=inter,
        random_r1=float(np.mean(random_vals)),
    )


@dataclass
class CorrelationReport:
    pearson: float | None
    bins: list[tuple[float, float]]         # (mean entity score, mean summary score)

    def to_dict(self) -> dict:
        return {"pearson": self.pearson, "bins": [list(b) for b in self.bins]}


def correlation_report(pairs: list[tuple[float, float]], n_bins: int = 10) -> CorrelationReport:
    """Pearson correlation over (entity score, summary score) pairs plus a
    binned curve: sorted by entity score, split into n_bins equal-size bins
    (remainder spread over the earliest bins), reporting per-bin means."""
    if len(pairs) < n_bins:
        raise ContractError(f"need at least {n_bins} pairs, got {len(pairs)}")
    xs = np.array([p[0] for p in pairs], dtype=np.float64)
    ys = np.array([p[1] for p in pairs], dtype=np.float64)
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    denom = np.sqrt((xd * xd).sum() * (yd * yd).sum())
    pearson = float((xd * yd).sum() / denom) if denom > 0 else None

    order = np.argsort(xs, kind="stable")
    base, extra = divmod(len(pairs), n_bins)
    bins: list[tuple[float, float]] = []
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        idx = order[start:start + size]
        bins.append((float(xs[idx].mean()), float(ys[idx].mean())))
        start += size
    return CorrelationReport(pearson=pearson, bins=bins)


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Everything a run can measure; unused sections stay None.

    rouge scores and entity_prf are fractions in [0, 1]; success_rate and
    hallucination_pct are percents in [0, 100]; abstractiveness and diversity
    are fractions.
    """

    label: str = ""
    rouge1: RougeScore | None = None
    rouge2: RougeScore | None = None
    rougeL: RougeScore | None = None
    entity_prf: RougeScore | None = None
    success_rate: dict[int, float] = field(default_factory=dict)
    hallucination_pct: float | None = None
    abstractiveness: dict[int, float] = field(default_factory=dict)
    diversity: DiversityReport | None = None
    correlation: CorrelationReport | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rouge1": self.rouge1.to_dict() if self.rouge1 else None,
            "rouge2": self.rouge2.to_dict() if self.rouge2 else None,
            "rougeL": self.rougeL.to_dict() if self.rougeL else None,
            "entity_prf": self.entity_prf.to_dict() if self.entity_prf else None,
            "success_rate": {str(k): v for k, v in self.success_rate.items()},
            "hallucination_pct": self.hallucination_pct,
            "abstractiveness": {str(k): v for k, v in self.abstractiveness.items()},
            "diversity": self.diversity.to_dict() if self.diversity else None,
            "correlation": self.correlation.to_dict() if self.correlation else None,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def mean_rouge_f(scores: dict[str, RougeScore]) -> float:
    """Mean of the R-1 / R-2 / R-L F-scores (the headline 'mean' column)."""
    return (scores["rouge1"].f1 + scores["rouge2"].f1 + scores["rougeL"].f1) / 3.0


def render_table(report: MetricReport) -> str:
    """Plain-text rendering of a MetricReport (percent-scaled where usual)."""
    lines = [f"== {report.label or 'metrics'} =="]

    def pct(x: float | None) -> str:
        return "-" if x is None else f"{100.0 * x:6.2f}"

    if report.rouge1:
        lines.append(f"{'':12} {'R-1':>7} {'R-2':>7} {'R-L':>7}")
        lines.append(f"{'summary F':12} {pct(report.rouge1.f1):>7} "
                     f"{pct(report.rouge2.f1):>7} {pct(report.rougeL.f1):>7}")
    if report.entity_prf:
        e = report.entity_prf
        lines.append(f"{'entities':12} P {pct(e.precision)}  R {pct(e.recall)}  F {pct(e.f1)}")
    if report.success_rate:
        cells = "  ".join(f"K={k}: {v:5.1f}" for k, v in sorted(report.success_rate.items()))
        lines.append(f"{'success %':12} {cells}")
    if report.hallucination_pct is not None:
        lines.append(f"{'halluc. %':12} {report.hallucination_pct:5.1f}")
    if report.abstractiveness:
        cells = "  ".join(f"{n}-grams: {pct(v)}" for n, v in sorted(report.abstractiveness.items()))
        lines.append(f"{'novel':12} {cells}")
    if report.diversity:
        d = report.diversity
        lines.append(f"{'diversity':12} oracle {pct(d.oracle_r1)}  "
                     f"inter {pct(d.inter_r1)}  random {pct(d.random_r1)}")
    if report.correlation:
        pearson = "-" if report.correlation.pearson is None else f"{report.correlation.pearson:.3f}"
        lines.append(f"{'pearson':12} {pearson}")
        for i, (ex, sy) in enumerate(report.correlation.bins):
            lines.append(f"  bin {i:2d}  entity {pct(ex)}  summary {pct(sy)}")
    for key, value in sorted(report.extras.items()):
        lines.append(f"{key:12} {value}")
    return "\n".join(lines)
