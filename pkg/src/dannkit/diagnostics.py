"""Diagnostics over learned features: cloud separation, 2-D projections,
attention heatmap weights, and a JSON feature report.

Everything here reads feature vectors or attention weights as plain arrays;
nothing touches gradients or optimizer state.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import seeding
from .embeddings import hausdorff_undirected


@dataclass
class FeatureGroup:
    """A named cloud of feature vectors (rows)."""
    group_id: int
    name: str
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or len(self.vectors) == 0:
            raise ValueError(f"FeatureGroup {self.name!r}: vectors must be a nonempty 2-D array")


def sep_metric(a, b):
    """Separation between two feature clouds.

    With the groups ordered by ascending group id as (F1, F2), the value is
    (1/|F1|) * sum over w2 in F2 of the distance from w2 to its nearest
    member of F1.  Zero when the clouds coincide; grows as they drift apart.
    """
    f1, f2 = sorted((a, b), key=lambda g: g.group_id)
    if f1.group_id == f2.group_id:
        raise ValueError("sep_metric: the two groups must have distinct group ids")
    if f1.vectors.shape[1] != f2.vectors.shape[1]:
        raise ValueError("sep_metric: feature dimensions differ")
    d = cdist(f1.vectors, f2.vectors)       # (|F1|, |F2|)
    return float(d.min(axis=0).sum() / len(f1.vectors))


def pca_2d(vectors):
    """Project rows onto their first two principal components.

    Deterministic sign convention: each component's first nonzero entry is
    made positive.  A rank-deficient cloud (rank < 2) triggers a warning and
    zero-fills the missing coordinate.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("pca_2d: need a nonempty 2-D array")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(centered.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int((s > tol).sum())
    coords = np.zeros((len(x), 2))
    for k in range(min(2, rank)):
        comp = vt[k]
        nz = np.nonzero(np.abs(comp) > 1e-12)[0]
        if len(nz) and comp[nz[0]] < 0:
            comp = -comp
        coords[:, k] = centered @ comp
    if rank < 2:
        warnings.warn(f"pca_2d: input has rank {rank} < 2; missing coordinates are zero",
                      RuntimeWarning)
    return coords


def normalize_products(word_alphas, sent_alpha):
    """Combine word- and sentence-level attention into heatmap weights.

    Each word's raw weight is its word attention times its sentence's
    attention; all weights are divided by the document-wide maximum, so the
    strongest word is exactly 1.0 and everything lies in [0, 1].
    """
    sent_alpha = np.asarray(sent_alpha, dtype=float)
    if len(word_alphas) != len(sent_alpha):
        raise ValueError(f"normalize_products: {len(word_alphas)} sentences of word weights "
                         f"vs {len(sent_alpha)} sentence weights")
    raw = [np.asarray(w, dtype=float) * sent_alpha[i] for i, w in enumerate(word_alphas)]
    top = max(float(r.max()) for r in raw if r.size)
    if top <= 0.0:
        raise ValueError("normalize_products: attention weights must be positive")
    return [r / top for r in raw]


def normalized_attention(model, doc):
    """Heatmap weights for one document under a hierarchical-attention model.

    Returns (tokens per sentence, normalized weights per sentence); the
    document's most attended word has weight exactly 1.0.
    """
    if model.extractor.name != "han":
        raise ValueError("normalized_attention: model must use the 'han' extractor")
    from .data import truncate_document
    from .embeddings import embed
    doc = truncate_document(doc, model.cfg.max_len)
    table = model.md.tables[doc.domain]
    proj = model.projections.get(doc.domain)
    with ad.no_grad():
        rows = embed(doc, table, proj=proj)
        _, word_alphas, sent_alpha = model.extractor.forward_with_attention(doc, rows)
    weights = normalize_products(word_alphas, sent_alpha)
    sents = [doc.tokens[a:b] for a, b in doc.sentences]
    return sents, weights


@dataclass
class DiagnosticsReport:
    """JSON-serializable summary of how separated source and target look."""
    extractor: str
    n_source: int
    n_target: int
    sep_features: float
    src_accuracy: float | None = None
    tgt_accuracy: float | None = None
    hausdorff_before: float | None = None
    hausdorff_after: float | None = None
    pca_source: list = field(default_factory=list)
    pca_target: list = field(default_factory=list)

    def to_json(self, dest=None):
        text = json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8") as f:
                f.write(text)
        return text

    @classmethod
    def from_json(cls, source):
        if hasattr(source, "read"):
            text = source.read()
        elif isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            with open(source, "r", encoding="utf-8") as f:
                text = f.read()
        return cls(**json.loads(text))


def _feature_array(model, docs, cap, rng):
    if len(docs) > cap:
        idx = rng.choice(len(docs), size=cap, replace=False)
        docs = [docs[i] for i in idx]
    with ad.no_grad():
        return model.feature_matrix(docs).value.copy()


def _top_token_rows(table, docs, top, proj=None):
    """Embedding rows (optionally projected) of the ``top`` most frequent
    in-vocabulary tokens over ``docs``."""
    counts = {}
    for d in docs:
        for t in d.tokens:
            if t in table.vocab:
                counts[t] = counts.get(t, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:top]
    if not ranked:
        raise ValueError("no in-vocabulary tokens to rank")
    rows = np.stack([table.vector(t) for t in ranked])
    if proj is not None:
        rows = rows @ proj.node.value.T
    return rows


def feature_report(model, prepared, sample_cap=1000, pca_points=200, top_tokens=500):
    """Build a DiagnosticsReport from a trained model and its data split.

    Feature clouds are capped at ``sample_cap`` documents per side (seeded
    subsample).  In cross-lingual mode the report also carries the
    undirected Hausdorff distance between the most frequent source and
    target token embeddings before and after the learned projections.
    """
    rng = seeding.rng_for(model.cfg.seed, seeding.REPORT)
    src_docs = prepared.source_train + prepared.source_test
    tgt_docs = prepared.target_unlabeled or (prepared.target_train + prepared.target_test)
    if not src_docs or not tgt_docs:
        raise ValueError("feature_report: need documents on both sides")
    z_src = _feature_array(model, src_docs, sample_cap, rng)
    z_tgt = _feature_array(model, tgt_docs, sample_cap, rng)
    sep = sep_metric(FeatureGroup(0, "source", z_src), FeatureGroup(1, "target", z_tgt))

    report = DiagnosticsReport(extractor=model.extractor.name,
                               n_source=len(z_src), n_target=len(z_tgt),
                               sep_features=sep)
    from .trainer import evaluate
    if prepared.source_test:
        report.src_accuracy = evaluate(model, prepared.source_test)
    if prepared.target_test:
        report.tgt_accuracy = evaluate(model, prepared.target_test)

    both = np.vstack([z_src, z_tgt])
    coords = pca_2d(both)
    keep_s = min(pca_points, len(z_src))
    keep_t = min(pca_points, len(z_tgt))
    report.pca_source = [[round(float(v), 6) for v in row] for row in coords[:keep_s]]
    report.pca_target = [[round(float(v), 6) for v in row] for row in coords[len(z_src):len(z_src) + keep_t]]

    if model.projections:
        src_domain = next(d for d in sorted(model.md.tables) if d != model.md.target_domain)
        tgt_domain = model.md.target_domain
        src_pool = [d for d in src_docs if d.domain == src_domain]
        rows_s = _top_token_rows(model.md.tables[src_domain], src_pool, top_tokens)
        rows_t = _top_token_rows(model.md.tables[tgt_domain], tgt_docs, top_tokens)
        report.hausdorff_before = hausdorff_undirected(rows_s, rows_t)
        rows_s_p = _top_token_rows(model.md.tables[src_domain], src_pool, top_tokens,
                                   proj=model.projections[src_domain])
        rows_t_p = _top_token_rows(model.md.tables[tgt_domain], tgt_docs, top_tokens,
                                   proj=model.projections[tgt_domain])
        report.hausdorff_after = hausdorff_undirected(rows_s_p, rows_t_p)
    return report
