"""Corpus loading, tokenization, splits, batching, and synthetic benchmarks.

A Document is a tokenized text with sentence ranges, a domain index, and an
optional class label (None on the unlabeled channel).  Sentence ranges
partition [0, len(tokens)); the hierarchical extractor relies on that.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .embeddings import EmbeddingTable, Vocabulary

_PUNCT = set(string.punctuation)
_TERMINATORS = {".", "!", "?"}


@dataclass
class Document:
    tokens: list
    sentences: list          # list of (start, stop) ranges partitioning the tokens
    domain: int
    label: int | None = None
    uid: str = ""
    raw: str = ""


@dataclass
class Corpus:
    documents: list
    class_names: list
    domain_names: list
    malformed: int = 0

    def by_domain(self, domain):
        return [d for d in self.documents if d.domain == domain]


def tokenize(text):
    """Lowercase, split on whitespace, peel leading/trailing punctuation
    into their own tokens.  Returns (tokens, sentence_ranges); a sentence
    ends after a word whose final character is '.', '!' or '?'.
    """
    tokens, sentences = [], []
    start = 0
    for word in text.lower().split():
        i, j = 0, len(word)
        while i < j and word[i] in _PUNCT:
            i += 1
        while j > i and word[j - 1] in _PUNCT:
            j -= 1
        tokens.extend(word[:i])
        if i < j:
            tokens.append(word[i:j])
        tokens.extend(word[j:])
        if word[-1] in _TERMINATORS:
            sentences.append((start, len(tokens)))
            start = len(tokens)
    if len(tokens) > start:
        sentences.append((start, len(tokens)))
    return tokens, sentences


_RATING_SCHEMES = {
    "amazon-binary": ({1: 0, 2: 0, 3: None, 4: 1, 5: 1}, ["negative", "positive"]),
    "yelp-3class": ({1: 0, 2: 0, 3: 1, 4: 2, 5: 2}, ["negative", "neutral", "positive"]),
}


def rating_classes(scheme):
    if scheme not in _RATING_SCHEMES:
        raise ValueError(f"unknown rating scheme {scheme!r}")
    return list(_RATING_SCHEMES[scheme][1])


def map_rating(rating, scheme):
    """Map a 1..5 star rating to a class index (None = drop the document)."""
    if scheme not in _RATING_SCHEMES:
        raise ValueError(f"unknown rating scheme {scheme!r}")
    table = _RATING_SCHEMES[scheme][0]
    if rating not in table:
        raise ValueError(f"rating {rating!r} outside 1..5")
    return table[rating]


@dataclass
class FieldMap:
    """How to read one JSONL corpus.

    Exactly one of ``rating_field`` (plus ``rating_scheme``) or
    ``label_field`` (plus ``label_values``, the ordered class names) must be
    set.  ``domain_field`` is optional; without it every document lands in
    ``default_domain``.
    """
    text_field: str = "text"
    rating_field: str | None = None
    rating_scheme: str = "amazon-binary"
    label_field: str | None = None
    label_values: list = field(default_factory=list)
    domain_field: str | None = None
    domain_names: list = field(default_factory=list)
    default_domain: str = "all"

    def class_names(self):
        if self.rating_field is not None:
            return rating_classes(self.rating_scheme)
        return list(self.label_values)


def load_jsonl(path, fmap, strict=True):
    """Read one JSON object per line into a Corpus.

    Malformed lines (bad JSON, missing mandatory fields, out-of-range
    ratings, unknown label strings) are counted; with ``strict`` the load
    fails if any were seen.  Documents whose text tokenizes to nothing, and
    ratings mapped to None by the scheme, are silently excluded.
    """
    if (fmap.rating_field is None) == (fmap.label_field is None):
        raise ValueError("field map needs exactly one of rating_field or label_field")
    class_names = fmap.class_names()
    label_index = {name: i for i, name in enumerate(fmap.label_values)}
    domain_names = list(fmap.domain_names)
    domain_index = {name: i for i, name in enumerate(domain_names)}
    documents, malformed = [], 0
    with open(path, "r", encoding="utf-8") as stream:
        for lineno, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                malformed += 1
                continue
            text = rec.get(fmap.text_field)
            if not isinstance(text, str):
                malformed += 1
                continue
            try:
                if fmap.rating_field is not None:
                    if fmap.rating_field not in rec:
                        raise KeyError
                    label = map_rating(rec[fmap.rating_field], fmap.rating_scheme)
                else:
                    label = label_index.get(rec.get(fmap.label_field))
                    if label is None:
                        raise KeyError
            except (KeyError, ValueError, TypeError):
                malformed += 1
                continue
            if label is None:
                continue  # excluded by the rating scheme, not malformed
            if fmap.domain_field is not None:
                dname = rec.get(fmap.domain_field)
                if not isinstance(dname, str):
                    malformed += 1
                    continue
            else:
                dname = fmap.default_domain
            if dname not in domain_index:
                if fmap.domain_names:
                    malformed += 1  # fixed domain list, unknown name
                    continue
                domain_index[dname] = len(domain_names)
                domain_names.append(dname)
            tokens, sentences = tokenize(text)
            if not tokens:
                continue
            documents.append(Document(tokens, sentences, domain_index[dname],
                                      label=label, uid=f"{path}:{lineno}", raw=text))
    if strict and malformed:
        raise ValueError(f"{path}: {malformed} malformed lines")
    return Corpus(documents, class_names, domain_names, malformed=malformed)


def _strip_label(doc):
    return replace(doc, label=None)


def truncate_document(doc, n):
    """Copy of ``doc`` keeping the first ``n`` tokens, sentence ranges clipped."""
    if len(doc.tokens) <= n:
        return doc
    sentences = [(a, min(b, n)) for a, b in doc.sentences if a < n]
    return replace(doc, tokens=doc.tokens[:n], sentences=sentences)


@dataclass
class SamplingPlan:
    n_target_labeled: int = 500
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.n_target_labeled < 0:
            raise ValueError("n_target_labeled must be >= 0")


@dataclass
class PreparedData:
    """Train/test splits plus the unlabeled target stream for the critic.

    The unlabeled stream carries every target document with its class label
    stripped; it is domain evidence only.  Labeled train and test sets are
    disjoint within every domain.
    """
    source_train: list
    source_test: list
    target_train: list
    target_test: list
    target_unlabeled: list
    class_names: list
    domain_names: list
    target_domain: int
    zero_shot: bool = False

    def manifest(self):
        return {
            "class_names": self.class_names,
            "domain_names": self.domain_names,
            "target_domain": self.target_domain,
            "zero_shot": self.zero_shot,
            "source_train": sorted(d.uid for d in self.source_train),
            "source_test": sorted(d.uid for d in self.source_test),
            "target_train": sorted(d.uid for d in self.target_train),
            "target_test": sorted(d.uid for d in self.target_test),
            "target_unlabeled": sorted(d.uid for d in self.target_unlabeled),
        }


def make_splits(source, target, plan, zero_shot=False):
    """Deterministic splits: per source domain a stratified 80/20 train/test
    split; for the target a uniform sample of ``n_target_labeled`` labeled
    train documents (none when zero-shot) with the remainder as test.
    """
    plan.validate()
    rng = seeding.rng_for(plan.seed, seeding.SPLIT)
    if source.class_names != target.class_names:
        raise ValueError("source and target class sets differ")

    src_train, src_test = [], []
    for domain in range(len(source.domain_names)):
        docs = source.by_domain(domain)
        if not docs:
            continue
        by_class = {}
        for d in docs:
            by_class.setdefault(d.label, []).append(d)
        for label in sorted(by_class):
            group = by_class[label]
            order = rng.permutation(len(group))
            cut = int(plan.train_fraction * len(group))
            src_train.extend(group[i] for i in order[:cut])
            src_test.extend(group[i] for i in order[cut:])

    tgt_docs = list(target.documents)
    n_tgt = 0 if zero_shot else plan.n_target_labeled
    if n_tgt > len(tgt_docs):
        raise ValueError(f"asked for {n_tgt} labeled target docs, corpus has {len(tgt_docs)}")
    picked = set(rng.choice(len(tgt_docs), size=n_tgt, replace=False)) if n_tgt else set()
    tgt_train = [d for i, d in enumerate(tgt_docs) if i in picked]
    tgt_test = [d for i, d in enumerate(tgt_docs) if i not in picked]

    target_offset = len(source.domain_names)
    if source is target:
        target_offset = 0

    def _retag(doc):
        # Target docs get the next free domain index after the source domains.
        if source is target:
            return doc
        return replace(doc, domain=doc.domain + target_offset)

    tgt_train = [_retag(d) for d in tgt_train]
    tgt_test = [_retag(d) for d in tgt_test]
    unlabeled = [_strip_label(d) for d in tgt_train + tgt_test]

    train_ids = {d.uid for d in tgt_train}
    test_ids = {d.uid for d in tgt_test}
    if train_ids & test_ids:
        raise AssertionError("target train/test overlap")

    domain_names = list(source.domain_names) + ([] if source is target else list(target.domain_names))
    return PreparedData(
        source_train=src_train,
        source_test=src_test,
        target_train=tgt_train,
        target_test=tgt_test,
        target_unlabeled=unlabeled,
        class_names=list(source.class_names),
        domain_names=domain_names,
        target_domain=len(domain_names) - 1,
        zero_shot=zero_shot,
    )


@dataclass
class Batch:
    docs: list
    pad_to: int | None = None


def batch_iter(docs, batch_size, seed, pad_to=None):
    """One seeded pass over ``docs`` in shuffled batches.

    The same seed yields the same order.  With ``pad_to`` documents are
    truncated to that many tokens (the embedding step zero-pads the rest).
    The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    docs = list(docs)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = rng.permutation(len(docs))
    for at in range(0, len(docs), batch_size):
        chunk = [docs[i] for i in order[at:at + batch_size]]
        if pad_to is not None:
            chunk = [truncate_document(d, pad_to) for d in chunk]
        yield Batch(chunk, pad_to=pad_to)


# ---------------------------------------------------------------------------
# Synthetic benchmarks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Controlled domain-shift generator settings.

    ``lexical-swap`` builds per-domain token variants of shared "concepts":
    class-conditional token distributions are identical across domains up to
    a token bijection, while the variant vectors are drawn independently
    (domain shift with no class shift).  ``shared_fraction`` of the
    indicative concepts keep one token everywhere, which is the only signal
    a source-only model can transfer.  Indicative vectors for one (class,
    domain) pool cluster around a prototype direction drawn for that pool,
    the same generative law in every domain, so domain shift concentrates
    in a few directions a domain critic can discover.

    ``rotation`` makes the vocabularies fully disjoint and sets every target
    vector to R @ (source counterpart) for one random orthogonal R: the
    spaces are isometric but unaligned, the regime projections are for.
    """
    vocab_size: int = 2000
    dim: int = 32
    n_classes: int = 2
    docs_per_domain: int = 2000
    shift: str = "lexical-swap"
    n_source_domains: int = 1
    doc_len: tuple = (5, 9)
    sent_len: tuple = (3, 6)
    indicative_prob: float = 0.7
    shared_fraction: float = 0.2

    def validate(self):
        if self.shift not in ("lexical-swap", "rotation"):
            raise ValueError(f"unknown shift mode {self.shift!r}")
        if self.n_classes < 2 or self.n_source_domains < 1:
            raise ValueError("need >= 2 classes and >= 1 source domain")
        if not 0.0 <= self.shared_fraction <= 1.0 or not 0.0 < self.indicative_prob <= 1.0:
            raise ValueError("fractions out of range")
        if self.vocab_size < 8 * self.n_classes * (self.n_source_domains + 1):
            raise ValueError("vocab_size too small for the requested layout")


@dataclass
class SynthData:
    source: Corpus
    target: Corpus
    table: EmbeddingTable
    rotation: np.ndarray | None
    bijection: dict            # target token -> source-domain-0 token
    aligned_table: EmbeddingTable | None  # rotation mode: ground-truth aligned copy


def _random_rotation(rng, k):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))  # fix signs: deterministic, orthogonal


def synth_generate(spec, seed):
    """Generate (source corpus, target corpus, frozen embedding table).

    Deterministic in (spec, seed).  See SynthSpec for the two shift modes.
    """
    spec.validate()
    rng = seeding.rng_for(seed, seeding.SYNTH)
    n_domains = spec.n_source_domains + 1
    shared_ok = spec.shift == "lexical-swap"

    # Concept layout: class-indicative concepts per class, plus neutrals.
    # Each concept owns either one shared token or one token per domain;
    # sizes are chosen so the emitted vocabulary is close to vocab_size.
    if shared_ok:
        tokens_per_ind = spec.shared_fraction + (1.0 - spec.shared_fraction) * n_domains
        per_class = max(4, int(spec.vocab_size / (spec.n_classes * tokens_per_ind + 1.0)))
    else:
        per_class = max(4, int(spec.vocab_size / ((spec.n_classes + 1.0) * n_domains)))
    concepts = []  # (kind, class index or None, shared)
    for c in range(spec.n_classes):
        n_shared = int(round(spec.shared_fraction * per_class)) if shared_ok else 0
        for j in range(per_class):
            concepts.append(("ind", c, j < n_shared))
    n_neutral = per_class
    for _ in range(n_neutral):
        concepts.append(("neu", None, shared_ok))

    # Lexical-swap indicative vectors cluster around one prototype per
    # (class, pool): pools are "shared" plus one per domain.  A domain
    # pool's prototype keeps an alpha-weighted component of the shared
    # class prototype, so the class identity of swapped tokens stays
    # partially readable while the rest of their mass sits in
    # domain-specific directions.  The same law applies in every domain,
    # so per-domain vector statistics agree.  Rotation mode clusters
    # source vectors around one prototype per class, and the whole cloud
    # rides on a common offset the way frequency effects shift real
    # embedding clouds off the origin.  The exact rotated copy carries
    # the offset to a generic far direction, so the identity projection
    # leaves the clouds displaced wholesale; a learned projection has to
    # fold the target cloud back onto the source support, with labels
    # pinning which cluster lands on which.
    sigma = 0.5
    alpha = 0.2
    sigma_rot = 0.25

    def _unit(scale=1.0):
        return scale * rng.standard_normal(spec.dim) / np.sqrt(spec.dim)

    offset = _unit(2.5) if spec.shift == "rotation" else None
    protos = {}
    if shared_ok or spec.shift == "rotation":
        for c in range(spec.n_classes):
            protos[("sh", c)] = _unit() if shared_ok else offset + _unit()
            if shared_ok:
                for d in range(n_domains):
                    protos[(d, c)] = alpha * protos[("sh", c)] + np.sqrt(1 - alpha ** 2) * _unit()

    token_of = []  # concept -> tuple of per-domain tokens
    vectors = {}
    rotation = np.asarray(_random_rotation(rng, spec.dim)) if spec.shift == "rotation" else None
    for ci, (kind, cls, shared) in enumerate(concepts):
        if shared:
            tok = f"{kind}{ci}"
            vectors[tok] = protos[("sh", cls)] + _unit(sigma) if kind == "ind" else _unit()
            token_of.append((tok,) * n_domains)
        else:
            names = tuple(f"d{d}_{kind}{ci}" for d in range(n_domains))
            for d, name in enumerate(names):
                if d == n_domains - 1 and spec.shift == "rotation":
                    # exact isometric copy of the domain-0 variant
                    vectors[name] = rotation @ vectors[names[0]]
                elif kind == "ind" and shared_ok:
                    vectors[name] = protos[(d, cls)] + _unit(sigma)
                elif kind == "ind" and spec.shift == "rotation":
                    vectors[name] = protos[("sh", cls)] + _unit(sigma_rot)
                elif spec.shift == "rotation":
                    vectors[name] = offset + _unit()
                else:
                    vectors[name] = _unit()
            token_of.append(names)

    ind_by_class = {c: [i for i, (k, cc, _) in enumerate(concepts) if k == "ind" and cc == c]
                    for c in range(spec.n_classes)}
    neutral = [i for i, (k, _, _) in enumerate(concepts) if k == "neu"]

    def make_docs(domain, domain_name):
        docs = []
        for i in range(spec.docs_per_domain):
            label = i % spec.n_classes
            length = int(rng.integers(spec.doc_len[0], spec.doc_len[1] + 1))
            picks = rng.random(length) < spec.indicative_prob
            pool_ind = ind_by_class[label]
            tokens = []
            for keep in picks:
                ci = pool_ind[rng.integers(len(pool_ind))] if keep else neutral[rng.integers(len(neutral))]
                tokens.append(token_of[ci][domain])
            sentences, at = [], 0
            while at < length:
                stop = min(length, at + int(rng.integers(spec.sent_len[0], spec.sent_len[1] + 1)))
                sentences.append((at, stop))
                at = stop
            docs.append(Document(tokens, sentences, domain, label=label,
                                 uid=f"synth:{domain_name}:{i}"))
        return docs

    class_names = [f"class{c}" for c in range(spec.n_classes)]
    src_names = [f"src{d}" for d in range(spec.n_source_domains)]
    src_docs = []
    for d, name in enumerate(src_names):
        src_docs.extend(make_docs(d, name))
    source = Corpus(src_docs, class_names, src_names)
    tgt_domain = n_domains - 1
    target = Corpus(make_docs(tgt_domain, "tgt"), class_names, ["tgt"])
    # make_splits retags target docs to come after the source domains; the
    # generator already numbered them that way, so normalize to 0 here.
    for d in target.documents:
        d.domain = 0

    order = sorted(vectors)
    vocab = Vocabulary(order)
    matrix = np.zeros((len(vocab), spec.dim))
    for tok in order:
        matrix[vocab.index(tok)] = vectors[tok]
    table = EmbeddingTable(vocab, matrix)

    aligned = None
    if spec.shift == "rotation":
        aligned_matrix = matrix.copy()
        for names in token_of:
            if len(set(names)) == 1:
                continue
            aligned_matrix[vocab.index(names[-1])] = vectors[names[0]]
        aligned = EmbeddingTable(vocab, aligned_matrix)

    bijection = {}
    for names in token_of:
        if len(set(names)) > 1:
            bijection[names[-1]] = names[0]
    return SynthData(source, target, table, rotation, bijection, aligned)
