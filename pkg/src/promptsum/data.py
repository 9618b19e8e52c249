"""Corpus handling: tokenization, entity tagging, pretraining pseudo-labels,
few-shot splits, and the synthetic corpus generator.

All functions here are pure and deterministic given their seeds, so every
downstream artifact (splits, pseudo-labels, synthetic corpora) is exactly
reproducible.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DocumentSkipped

PAD, BOS, EOS, SEP_ENT, UNK = "<pad>", "<bos>", "<eos>", "<sep_ent>", "<unk>"
RESERVED_TOKENS = (PAD, BOS, EOS, SEP_ENT, UNK)

# Words: letters with internal apostrophes. Numbers: digits with internal
# separators (so "49,000" and "1.5" stay single tokens). Everything else is a
# one-character token.
_TOKEN_RE = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)*|\d+(?:[.,]\d+)*|[^\sA-Za-z\d]")
_NUMBER_RE = re.compile(r"^\d+(?:[.,]\d+)*$")
_NO_SPACE_BEFORE = set(".,!?;:%)]}'")
_NO_SPACE_AFTER = set("([{$")
_SENT_END = {".", "!", "?"}

# Single capitalized tokens that are capitalization-of-convention, not names.
_STOPWORDS = frozenset(
    """a an the this that these those it its he she they them his her their we
    you i me my your our us who what which when where why how and or but nor so
    yet for of in on at by to from with without about into onto over under
    after before during between among through against is are was were be been
    being am do does did done has have had having will would shall should can
    could may might must not no yes if then else while as than there here
    very all any each some most more less few many much one two such own same
    other another new next last just also too only even still now today
    tomorrow yesterday mr mrs ms dr""".split()
)


def tokenize(text: str) -> list[str]:
    """Split text into word, number, and punctuation tokens."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: list[str]) -> str:
    """Join tokens back into text with standard punctuation spacing."""
    out: list[str] = []
    for tok in tokens:
        if out and not (tok and tok[0] in _NO_SPACE_BEFORE) and out[-1] not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(tok)
    return "".join(out)


def normalize_text(text: str) -> str:
    """Canonical surface form: tokenize then detokenize."""
    return detokenize(tokenize(text))


def split_sentences(tokens: list[str]) -> list[list[str]]:
    """Partition a token stream into sentences at . ! ? boundaries."""
    sentences: list[list[str]] = []
    current: list[str] = []
    for tok in tokens:
        current.append(tok)
        if tok in _SENT_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


class Tokenizer:
    """Word-level vocabulary with reserved control tokens.

    The vocabulary order is part of the checkpoint contract: id(token) is the
    token's index in `vocab`.
    """

    def __init__(self, vocab: list[str]):
        if list(vocab[: len(RESERVED_TOKENS)]) != list(RESERVED_TOKENS):
            raise ContractError("vocabulary must start with the reserved tokens")
        if len(set(vocab)) != len(vocab):
            raise ContractError("vocabulary contains duplicates")
        self.vocab = list(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.sep_ent_id = self.token_to_id[SEP_ENT]
        self.unk_id = self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: list[str], extra_tokens: list[str] = ()) -> "Tokenizer":
        """Vocabulary = reserved tokens + corpus tokens by frequency (ties by
        first occurrence)."""
        counts: dict[str, int] = {}
        order: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
                order.setdefault(tok, len(order))
        for tok in extra_tokens:
            counts.setdefault(tok, 0)
            order.setdefault(tok, len(order))
        ranked = sorted(counts, key=lambda t: (-counts[t], order[t]))
        return cls(list(RESERVED_TOKENS) + ranked)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def encode_with_report(self, tokens: list[str]) -> tuple[list[int], int]:
        ids = self.encode(tokens)
        return ids, sum(1 for i in ids if i == self.unk_id)

    def decode(self, ids: list[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def frequencies(self, texts: list[str]) -> dict[str, int]:
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                if tok in self.token_to_id:
                    counts[tok] = counts.get(tok, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# Documents and entity chains
# ---------------------------------------------------------------------------

@dataclass
class Document:
    id: str
    text: str
    sentences: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.sentences:
            self.sentences = split_sentences(tokenize(self.text))

    @property
    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s]


@dataclass
class EntityChain:
    entities: list[str]
    truncated: bool = False

    @property
    def token_form(self) -> list[str]:
        toks: list[str] = []
        for i, ent in enumerate(self.entities):
            if i:
                toks.append(SEP_ENT)
            toks.extend(tokenize(ent))
        return toks

    def __len__(self) -> int:
        return len(self.entities)


@dataclass
class LabeledExample:
    source: Document
    summary: list[str]
    entity_chain: EntityChain


@dataclass
class PseudoLabelPair:
    remainder: Document
    pseudo_summary: list[str]
    pseudo_chain: EntityChain


def _is_capitalized(tok: str) -> bool:
    return bool(tok) and tok[0].isalpha() and tok[0].isupper()


def tag_entity_spans(text: str, gazetteer: set[str] | frozenset[str] = frozenset()) -> list[tuple[int, str]]:
    """All entity mentions as (token_start, surface) pairs, in text order.

    Rules, in precedence order over non-overlapping token spans:
      1. longest gazetteer phrase match;
      2. maximal runs of capitalized tokens, except single-token runs whose
         lowercase form is a conventional capitalization (stopword);
      3. number tokens.
    """
    tokens = tokenize(text)
    n = len(tokens)
    gaz_tokenized = sorted((tokenize(p) for p in gazetteer if p.strip()),
                           key=len, reverse=True)
    claimed = [False] * n
    spans: list[tuple[int, int, str]] = []

    for phrase in gaz_tokenized:
        m = len(phrase)
        if m == 0:
            continue
        i = 0
        while i + m <= n:
            if not any(claimed[i:i + m]) and tokens[i:i + m] == phrase:
                spans.append((i, m, detokenize(phrase)))
                for j in range(i, i + m):
                    claimed[j] = True
                i += m
            else:
                i += 1

    i = 0
    while i < n:
        if claimed[i] or not _is_capitalized(tokens[i]):
            i += 1
            continue
        j = i
        while j < n and not claimed[j] and _is_capitalized(tokens[j]):
            j += 1
        run = tokens[i:j]
        if not (len(run) == 1 and run[0].lower() in _STOPWORDS):
            spans.append((i, j - i, detokenize(run)))
            for k in range(i, j):
                claimed[k] = True
        i = j

    for i, tok in enumerate(tokens):
        if not claimed[i] and _NUMBER_RE.match(tok):
            spans.append((i, 1, tok))
            claimed[i] = True

    spans.sort(key=lambda s: s[0])
    return [(start, surface) for start, _, surface in spans]


def tag_entities(text: str, gazetteer: set[str] | frozenset[str] = frozenset()) -> list[str]:
    """Unique entity surfaces in order of first occurrence."""
    seen: set[str] = set()
    out: list[str] = []
    for _, surface in tag_entity_spans(text, gazetteer):
        if surface not in seen:
            seen.add(surface)
            out.append(surface)
    return out


def extract_entity_chain(
    summary_tokens: list[str],
    gazetteer: set[str] | frozenset[str] = frozenset(),
    cap: int = 100,
) -> EntityChain:
    """Tag entities in a summary and pack them into a capped chain.

    The cap applies to the chain's token form (entities plus separators);
    trailing entities are dropped first.
    """
    entities = tag_entities(detokenize(summary_tokens), gazetteer)
    return truncate_chain(EntityChain(entities), cap)


def truncate_chain(chain: EntityChain, cap: int) -> EntityChain:
    kept: list[str] = []
    used = 0
    truncated = False
    for ent in chain.entities:
        cost = len(tokenize(ent)) + (1 if kept else 0)
        if used + cost > cap:
            truncated = True
            break
        kept.append(ent)
        used += cost
    return EntityChain(kept, truncated=truncated or chain.truncated)


def parse_chain_tokens(tokens: list[str]) -> EntityChain:
    """Inverse of EntityChain.token_form; tolerant of malformed output.

    Output with no separator structure collapses to a single entity.
    """
    groups: list[list[str]] = [[]]
    for tok in tokens:
        if tok == SEP_ENT:
            groups.append([])
        elif tok not in (PAD, BOS, EOS):
            groups[-1].append(tok)
    seen: set[str] = set()
    entities = []
    for g in groups:
        surface = detokenize(g).strip()
        if surface and surface not in seen:
            seen.add(surface)
            entities.append(surface)
    return EntityChain(entities)


# ---------------------------------------------------------------------------
# Gap-sentence pseudo-summaries
# ---------------------------------------------------------------------------

def _rouge1_f(cand: list[str], ref: list[str]) -> float:
    # Local clipped-unigram F1; the metrics module owns the public version.
    if not cand or not ref:
        return 0.0
    counts: dict[str, int] = {}
    for t in ref:
        counts[t] = counts.get(t, 0) + 1
    overlap = 0
    for t in cand:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            overlap += 1
    p = overlap / len(cand)
    r = overlap / len(ref)
    return 2 * p * r / (p + r) if p + r else 0.0


def gsg_pseudo_summary(doc: Document, gap_ratio: float = 0.3) -> PseudoLabelPair:
    """Greedy gap-sentence selection for self-supervised pretraining labels.

    Iteratively grows the selected set by the sentence that maximizes the
    clipped unigram F1 of (selection so far + candidate) against the shrinking
    remainder; earliest index wins ties. Selected sentences, in original
    order, become the pseudo-summary.
    """
    if not 0.0 < gap_ratio < 1.0:
        raise ContractError(f"gap_ratio {gap_ratio} outside (0, 1)")
    n = len(doc.sentences)
    if n < 2:
        raise DocumentSkipped(f"document {doc.id!r} has fewer than 2 sentences")
    k = max(1, int(np.ceil(gap_ratio * n)))
    k = min(k, n - 1)

    def objective(chosen: list[int]) -> float:
        cand = [t for j in sorted(chosen) for t in doc.sentences[j]]
        rest = [t for j in range(n) if j not in chosen for t in doc.sentences[j]]
        return _rouge1_f(cand, rest)

    def grow(seed_selection: list[int]) -> list[int]:
        chosen = list(seed_selection)
        remaining = [i for i in range(n) if i not in chosen]
        while len(chosen) < k:
            best_idx, best_score = remaining[0], -1.0
            for idx in remaining:
                score = objective(chosen + [idx])
                if score > best_score:
                    best_idx, best_score = idx, score
            chosen.append(best_idx)
            remaining.remove(best_idx)
        # Exchange refinement: strictly improving single swaps to a fixpoint.
        while True:
            current = objective(chosen)
            improved = False
            for si in range(len(chosen)):
                for rj in range(len(remaining)):
                    trial = chosen[:si] + [remaining[rj]] + chosen[si + 1:]
                    if objective(trial) > current + 1e-12:
                        chosen[si], remaining[rj] = remaining[rj], chosen[si]
                        current = objective(chosen)
                        improved = True
            if not improved:
                return chosen

    # Greedy growth restarted from every candidate first sentence; the best
    # final objective wins, earliest selection on ties.
    selected, selected_score = None, -1.0
    for first in range(n):
        candidate = sorted(grow([first]))
        score = objective(candidate)
        if score > selected_score + 1e-12 or (
                abs(score - selected_score) <= 1e-12 and selected is not None
                and candidate < selected):
            selected, selected_score = candidate, score
    summary_tokens = [t for i in selected for t in doc.sentences[i]]
    remainder_sents = [doc.sentences[i] for i in range(n) if i not in selected]
    remainder = Document(
        id=doc.id,
        text=detokenize([t for s in remainder_sents for t in s]),
        sentences=remainder_sents,
    )
    chain = extract_entity_chain(summary_tokens)
    return PseudoLabelPair(remainder=remainder, pseudo_summary=summary_tokens, pseudo_chain=chain)


@dataclass
class TrainItem:
    """One composed training example, before embedding."""
    task: str  # "entity" | "summary"
    source_tokens: list[str]
    chain: EntityChain | None
    target_tokens: list[str]
    doc_id: str = ""


def build_pretrain_batch(docs: list[Document], gap_ratio: float = 0.3) -> tuple[list[TrainItem], list[str]]:
    """Two items per usable document: chain generation, then chain-conditioned
    summary generation (with the pseudo-chain teacher-forced as discrete input).

    Returns (items, skipped_doc_ids)."""
    items: list[TrainItem] = []
    skipped: list[str] = []
    for doc in docs:
        try:
            pair = gsg_pseudo_summary(doc, gap_ratio)
        except DocumentSkipped:
            skipped.append(doc.id)
            continue
        src = pair.remainder.tokens
        items.append(TrainItem(
            task="entity", source_tokens=src, chain=None,
            target_tokens=pair.pseudo_chain.token_form, doc_id=doc.id,
        ))
        items.append(TrainItem(
            task="summary", source_tokens=src, chain=pair.pseudo_chain,
            target_tokens=pair.pseudo_summary, doc_id=doc.id,
        ))
    return items, skipped


# ---------------------------------------------------------------------------
# Few-shot splits
# ---------------------------------------------------------------------------

def fewshot_split(
    dataset: list[LabeledExample], n: int = 100, seeds: list[int] = (1, 2, 3),
) -> list[tuple[list[LabeledExample], list[LabeledExample]]]:
    """Per seed: disjoint train/val samples of size n, without replacement."""
    if len(dataset) < 2 * n:
        raise DataError(f"dataset of {len(dataset)} cannot yield disjoint {n}/{n} splits")
    splits = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(dataset))
        train = [dataset[i] for i in perm[:n]]
        val = [dataset[i] for i in perm[n:2 * n]]
        splits.append((train, val))
    return splits


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_DEFAULT_ENTITIES = [
    "Alden", "Brix", "Calla", "Doran", "Elva", "Fenn", "Gilda", "Harlo",
    "Ilsa", "Jorun", "Kestrel", "Lira", "Maren", "Nolla", "Orin", "Pilar",
    "Quill", "Ronan", "Selka", "Torin", "Ulma", "Varek", "Weslyn", "Xandra",
    "Yorvi", "Zelda", "Ansel", "Briony", "Corvin", "Delia", "Edric", "Fiora",
    "Galen", "Hesper", "Ivo", "Juna", "Kovan", "Lumen", "Mirela",
    "Nerio", "Oswin", "Perrin", "Rhea", "Sorrel", "Tamsin", "Ursel", "Vesna",
    "Wren", "Yale", "Zared", "Amity", "Bram", "Cyra", "Dmitra", "Enno",
    "Freya", "Gideon", "Halcy", "Imre", "Jessa", "Kiran", "Lorcan", "Mave",
    "Nyssa", "Otis", "Petra", "Quorin", "Rufus", "Sable", "Tycho", "Una",
    "Vance", "Wilda", "Xeno", "Ysolt", "Zinnia", "Arbor", "Bellis", "Cormac",
    "Dagny", "Evander",
]

_SENTENCE_TEMPLATES = [
    "{ents} visited the harbor before dusk .",
    "{ents} spoke about the grain supply .",
    "{ents} signed the accord near the gate .",
    "{ents} stayed close to the old mill .",
    "{ents} joined the council session early .",
    "{ents} appears in the ledger of visitors .",
]

_NOISE_SENTENCES = [
    "the weather stayed calm through the week .",
    "traders argued about the price of salt .",
    "the ferry ran late across the channel .",
    "lanterns were lit along the wall .",
    "the archive stayed closed for repairs .",
]


@dataclass
class SynthProfile:
    """Recipe for a deterministic synthetic summarization corpus.

    Summaries are template sentences that also occur verbatim in the source
    (salient sentences), so chain supervision is exact and controllability
    success is always achievable by copying. The copy profile keeps documents
    small; the distractor profile adds many never-summarized entities so a
    saliency model has real rejection work to do.
    """

    name: str = "copy"
    entity_pool: list[str] = field(default_factory=lambda: list(_DEFAULT_ENTITIES[:40]))
    sentence_templates: list[str] = field(default_factory=lambda: list(_SENTENCE_TEMPLATES))
    noise_sentences: list[str] = field(default_factory=lambda: list(_NOISE_SENTENCES))
    source_entities: tuple[int, int] = (6, 8)
    summary_entities: tuple[int, int] = (1, 3)
    entities_per_sentence: tuple[int, int] = (1, 1)
    noise_rate: float = 0.2
    extra_mentions: tuple[int, int] = (0, 2)   # per-entity echo sentences

    @classmethod
    def copy_profile(cls) -> "SynthProfile":
        return cls(name="copy")

    @classmethod
    def distractor_profile(cls) -> "SynthProfile":
        return cls(
            name="distractor",
            entity_pool=list(_DEFAULT_ENTITIES),
            source_entities=(7, 10),
            summary_entities=(1, 2),
            noise_rate=0.1,
            extra_mentions=(1, 2),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthProfile":
        with open(path) as f:
            raw = json.load(f)
        kwargs = {}
        for key in ("name", "entity_pool", "sentence_templates", "noise_sentences",
                    "noise_rate"):
            if key in raw:
                kwargs[key] = raw[key]
        for key in ("source_entities", "entities_per_sentence", "summary_entities",
                    "extra_mentions"):
            if key in raw:
                kwargs[key] = tuple(raw[key])
        return cls(**kwargs)


def _fill_template(template: str, ents: list[str]) -> str:
    if len(ents) == 1:
        joined = ents[0]
    elif len(ents) == 2:
        joined = f"{ents[0]} and {ents[1]}"
    else:
        joined = ", ".join(ents[:-1]) + " and " + ents[-1]
    return template.format(ents=joined)


def synth_corpus(seed: int, size: int, profile: SynthProfile | None = None) -> list[LabeledExample]:
    """Deterministic corpus; every summary sentence is planted in the source.

    Construction per document: pick the summary entities, realize them as one
    or two template sentences, then scatter those among filler sentences built
    from the remaining document entities plus entity-free noise.
    """
    profile = profile or SynthProfile.copy_profile()
    rng = np.random.default_rng(seed)
    pool = np.array(profile.entity_pool, dtype=object)
    examples: list[LabeledExample] = []

    def group_into_sentences(entities: list[str]) -> list[str]:
        sents, i = [], 0
        while i < len(entities):
            take = min(int(rng.integers(profile.entities_per_sentence[0],
                                        profile.entities_per_sentence[1] + 1)),
                       len(entities) - i)
            take = max(take, 1)
            template = str(rng.choice(profile.sentence_templates))
            sents.append(_fill_template(template, entities[i:i + take]))
            i += take
        return sents

    for idx in range(size):
        e_doc = int(rng.integers(profile.source_entities[0], profile.source_entities[1] + 1))
        doc_pool = [str(e) for e in rng.choice(pool, size=min(e_doc, len(pool)), replace=False)]
        k_sum = min(int(rng.integers(profile.summary_entities[0],
                                     profile.summary_entities[1] + 1)), len(doc_pool))
        summary_sents = group_into_sentences(doc_pool[:k_sum])
        fillers = group_into_sentences(doc_pool[k_sum:])
        # Every entity gets a random number of extra mentions, so how often an
        # entity occurs carries no information about its salience (real text
        # re-mentions its actors an unpredictable number of times).
        lo, hi = profile.extra_mentions
        for e in doc_pool:
            for _ in range(int(rng.integers(lo, hi + 1))):
                fillers += group_into_sentences([e])
        n_noise = int(round(profile.noise_rate * (len(summary_sents) + len(fillers))))
        fillers += [str(rng.choice(profile.noise_sentences)) for _ in range(n_noise)]

        # Scatter summary sentences among the fillers; summary order follows
        # source order so chain extraction sees first-appearance order.
        total = len(summary_sents) + len(fillers)
        positions = sorted(int(p) for p in rng.choice(total, size=len(summary_sents), replace=False))
        sentences: list[str] = []
        si, fi = 0, 0
        for pos in range(total):
            if si < len(summary_sents) and pos == positions[si]:
                sentences.append(summary_sents[si])
                si += 1
            else:
                sentences.append(fillers[fi])
                fi += 1
        ordered_summary = [sentences[p] for p in positions]

        source_text = " ".join(sentences)
        doc = Document(id=f"{profile.name}-{seed}-{idx:05d}", text=source_text)
        summary_tokens = tokenize(" ".join(ordered_summary))
        chain = extract_entity_chain(summary_tokens)
        examples.append(LabeledExample(source=doc, summary=summary_tokens, entity_chain=chain))
    return examples


# ---------------------------------------------------------------------------
# External formats
# ---------------------------------------------------------------------------

def load_corpus_jsonl(path: str | Path, cap: int = 100) -> list[LabeledExample]:
    """Corpus format: one JSON object per line with keys id, source, and
    optional summary / entities (explicit chain override)."""
    examples: list[LabeledExample] = []
    ids: set[str] = set()
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON") from exc
            if "id" not in obj or "source" not in obj:
                raise DataError(f"{path}:{line_no}: missing id or source")
            if obj["id"] in ids:
                raise DataError(f"{path}:{line_no}: duplicate id {obj['id']!r}")
            ids.add(obj["id"])
            doc = Document(id=str(obj["id"]), text=obj["source"])
            summary = tokenize(obj.get("summary", ""))
            if "entities" in obj:
                chain = truncate_chain(EntityChain([str(e) for e in obj["entities"]]), cap)
            else:
                chain = extract_entity_chain(summary, cap=cap)
            examples.append(LabeledExample(source=doc, summary=summary, entity_chain=chain))
    if not examples:
        raise DataError(f"{path}: empty corpus")
    return examples


def save_corpus_jsonl(examples: list[LabeledExample], path: str | Path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            obj = {
                "id": ex.source.id,
                "source": ex.source.text,
                "summary": detokenize(ex.summary),
                "entities": ex.entity_chain.entities,
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_gazetteer(path: str | Path) -> frozenset[str]:
    with open(path) as f:
        return frozenset(line.strip() for line in f if line.strip())
