"""Adversarial training: a label predictor and a domain critic sharing one
feature extractor.

Each outer iteration runs ``n_critic`` critic steps (updating only the
critic head; under the Wasserstein objective its weights are clipped to
[-c, c] after every step) and one joint step (updating extractor, label
head, and projections; the critic's objective reaches the extractor
through the gradient-reversal layer scaled by lambda).  Optimizers are two
independent Adam instances.

Determinism contract: (config, seed) fixes every trajectory bit-for-bit.
All stochastic draws use keyed streams (see ``seeding``), so e.g. a
lambda=0 adversarial run and an adversarial-off run consume identical
randomness on the predictor path.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import seeding
from .data import batch_iter, truncate_document
from .embeddings import EmbeddingTable, ProjectionMatrix, embed, embed_padded
from .extractors import (AvgExtractor, CnnExtractor, HanExtractor, IdfTable,
                         TfidfExtractor, fit_idf, max_norm_rescale)

EXTRACTORS = ("avg", "tfidf", "cnn", "han")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingDiverged(RuntimeError):
    """A loss stopped being finite."""


@dataclass
class DannConfig:
    extractor: str = "avg"
    lam: float = 0.1
    n_critic: int = 5
    clip_c: float = 0.01
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    critic_loss: str = "wasserstein"   # or "ce"
    n_domains: int = 2
    adversarial: bool = True
    seed: int = 0
    one_vs_rest: bool = False
    cross_lingual: bool = False
    train_embeddings: bool = False
    freeze_source_projection: bool = False
    max_len: int = 400
    cnn_dropout: float = 0.5
    cnn_max_norm: float = 3.0
    han_units: int = 100
    patience: int | None = None

    def validate(self):
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"unknown extractor {self.extractor!r}; choose from {EXTRACTORS}")
        if self.critic_loss not in ("wasserstein", "ce"):
            raise ConfigError(f"critic_loss must be 'wasserstein' or 'ce', got {self.critic_loss!r}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.n_domains < 2:
            raise ConfigError(f"n_domains must be >= 2, got {self.n_domains}")
        if self.critic_loss == "wasserstein" and self.n_domains > 2 and not self.one_vs_rest:
            raise ConfigError("wasserstein critic with more than two domains needs the "
                              "one-vs-rest scheme: set one_vs_rest=true (or use critic_loss='ce')")
        if self.n_critic < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("n_critic, batch_size must be >= 1 and epochs >= 0")
        if self.clip_c <= 0 or self.lr <= 0:
            raise ConfigError("clip_c and lr must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.max_len < 5:
            raise ConfigError("max_len must be >= 5")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelData:
    """Everything data-derived that the model needs besides the config."""
    class_names: list
    domain_names: list
    target_domain: int
    dim: int
    tables: dict                  # domain index -> EmbeddingTable
    n_max: int = 400
    idf_tables: dict | None = None


class DenseHead:
    """Single fully connected layer producing class logits."""

    def __init__(self, dim_in, n_out, rng, name="P"):
        self.W = ad.parameter(ad.glorot_uniform(rng, dim_in, n_out), name=f"{name}.W")
        self.b = ad.parameter(np.zeros(n_out), name=f"{name}.b")
        self.name = name

    def forward(self, z):
        return ad.add(ad.matmul(z, self.W), self.b)

    def named_params(self):
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]


class CriticHead:
    """Domain critic: 100-unit ReLU hidden layer, unsquashed linear output."""

    def __init__(self, dim_in, n_out, rng, hidden=100, name="Q"):
        self.W1 = ad.parameter(ad.glorot_uniform(rng, dim_in, hidden), name=f"{name}.W1")
        self.b1 = ad.parameter(np.zeros(hidden), name=f"{name}.b1")
        self.W2 = ad.parameter(ad.glorot_uniform(rng, hidden, n_out), name=f"{name}.W2")
        self.b2 = ad.parameter(np.zeros(n_out), name=f"{name}.b2")
        self.name = name

    def forward(self, z):
        h = ad.relu(ad.add(ad.matmul(z, self.W1), self.b1))
        return ad.add(ad.matmul(h, self.W2), self.b2)

    def named_params(self):
        return [(f"{self.name}.W1", self.W1), (f"{self.name}.b1", self.b1),
                (f"{self.name}.W2", self.W2), (f"{self.name}.b2", self.b2)]


class DannModel:
    def __init__(self, cfg, md, extractor, P, Q, projections):
        self.cfg = cfg
        self.md = md
        self.extractor = extractor
        self.P = P
        self.Q = Q
        self.projections = projections    # {} outside cross-lingual mode
        self.joint_steps = 0
        self.critic_steps = 0
        p_params = [n for _, n in self.p_path_named()]
        self.opt_P = ad.Adam(p_params, lr=cfg.lr)
        self.opt_Q = ad.Adam([n for _, n in Q.named_params()], lr=cfg.lr)

    # -- parameters ---------------------------------------------------------

    def p_path_named(self):
        """Named parameters updated by joint steps (never the critic's)."""
        out = list(self.extractor.named_params()) + self.P.named_params()
        for d in sorted(self.projections):
            proj = self.projections[d]
            if proj.trainable:
                out.append((f"proj.{d}", proj.node))
        seen = set()
        for d in sorted(self.md.tables):
            table = self.md.tables[d]
            if table.trainable and id(table.node) not in seen:
                seen.add(id(table.node))
                out.append((f"emb.{d}", table.node))
        return out

    def q_named(self):
        return self.Q.named_params()

    def named_params(self):
        out = self.p_path_named() + self.q_named()
        for d in sorted(self.projections):
            proj = self.projections[d]
            if not proj.trainable:
                out.append((f"proj.{d}", proj.node))
        return out

    # -- forward ------------------------------------------------------------

    def doc_feature(self, doc, dropout_rng=None):
        table = self.md.tables[doc.domain]
        proj = self.projections.get(doc.domain)
        if self.extractor.name == "cnn":
            rows = embed_padded(doc, table, self.md.n_max, proj=proj)
        else:
            doc = truncate_document(doc, self.cfg.max_len)
            rows = embed(doc, table, proj=proj)
        return self.extractor.forward(doc, rows, dropout_rng=dropout_rng)

    def feature_matrix(self, docs, dropout_rng=None):
        if not docs:
            raise ValueError("feature_matrix: empty document list")
        return ad.stack([self.doc_feature(d, dropout_rng) for d in docs])

    def critic_label(self, doc):
        """Domain label as the critic sees it (pooled binary or per-domain)."""
        if self.cfg.n_domains == 2:
            return 1 if doc.domain == self.md.target_domain else 0
        if doc.domain >= self.cfg.n_domains:
            raise ValueError(f"document domain {doc.domain} outside the {self.cfg.n_domains}-domain critic")
        return doc.domain


def _needs_dropout(cfg):
    return cfg.extractor == "cnn" and cfg.cnn_dropout > 0.0


def derive_model_data(cfg, prepared, tables):
    """Compute the data-derived model spec: embedding wiring, document cap,
    and (for tfidf) per-domain idf statistics from training documents."""
    n_domains_total = len(prepared.domain_names)
    if isinstance(tables, EmbeddingTable):
        tables = {d: tables for d in range(n_domains_total)}
    dims = {t.dim for t in tables.values()}
    if len(dims) != 1:
        raise ConfigError(f"embedding tables disagree on dimension: {sorted(dims)}")
    dim = dims.pop()

    train_docs = prepared.source_train + prepared.target_train
    n_max = min(cfg.max_len, max((len(d.tokens) for d in train_docs), default=cfg.max_len))
    n_max = max(n_max, 5)

    idf_tables = None
    if cfg.extractor == "tfidf":
        idf_tables = {}
        if cfg.cross_lingual:
            for d in range(n_domains_total):
                docs = [x for x in train_docs if x.domain == d]
                if not docs and d == prepared.target_domain:
                    docs = prepared.target_unlabeled  # zero-shot fallback: inputs only
                if not docs:
                    raise ConfigError(f"no training documents for domain {d} to fit idf")
                idf_tables[d] = fit_idf(docs)
        else:
            shared = fit_idf(train_docs)
            idf_tables = {d: shared for d in range(n_domains_total)}

    return ModelData(class_names=list(prepared.class_names),
                     domain_names=list(prepared.domain_names),
                     target_domain=prepared.target_domain,
                     dim=dim, tables=tables, n_max=n_max, idf_tables=idf_tables)


def build_model(cfg, md):
    """Assemble extractor, label head, critic, and (cross-lingual only)
    per-domain projections, all Glorot/zero initialized from the init
    stream of the run seed."""
    cfg.validate()
    n_domains_total = len(md.domain_names)
    if cfg.n_domains not in (2, n_domains_total):
        raise ConfigError(f"n_domains must be 2 (pooled) or {n_domains_total} (all domains), "
                          f"got {cfg.n_domains}")
    rng = seeding.rng_for(cfg.seed, seeding.INIT)
    if cfg.extractor == "avg":
        extractor = AvgExtractor(md.dim, rng)
    elif cfg.extractor == "tfidf":
        if md.idf_tables is None:
            raise ConfigError("tfidf extractor needs idf tables (derive_model_data provides them)")
        extractor = TfidfExtractor(md.dim, md.idf_tables, rng)
    elif cfg.extractor == "cnn":
        extractor = CnnExtractor(md.dim, md.n_max, rng,
                                 dropout_rate=cfg.cnn_dropout, max_norm=cfg.cnn_max_norm)
    else:
        extractor = HanExtractor(md.dim, rng, units=cfg.han_units)

    P = DenseHead(extractor.feature_dim, len(md.class_names), rng, name="P")
    q_out = 1 if (cfg.critic_loss == "wasserstein" and cfg.n_domains == 2) else cfg.n_domains
    Q = CriticHead(extractor.feature_dim, q_out, rng, name="Q")

    projections = {}
    if cfg.cross_lingual:
        for d in range(n_domains_total):
            trainable = not (cfg.freeze_source_projection and d != md.target_domain)
            projections[d] = ProjectionMatrix(d, md.dim, trainable=trainable)
    return DannModel(cfg, md, extractor, P, Q, projections)


def multi_domain_critic_loss(scores, domain_labels):
    """One-vs-rest Kantorovich-Rubinstein estimate for several domains.

    For each domain d: mean of column d over in-domain rows minus the mean
    over all other rows; the per-domain terms are averaged.  With two
    domains and antisymmetric columns this reduces to the binary estimate.
    """
    labels = np.asarray(domain_labels)
    n, d_out = scores.value.shape
    if labels.shape != (n,):
        raise ValueError(f"multi_domain_critic_loss: {labels.shape} labels for {scores.value.shape} scores")
    if labels.min() < 0 or labels.max() >= d_out:
        raise ValueError("multi_domain_critic_loss: domain label outside the critic's output arity")
    cols = ad.transpose(scores)
    total = None
    for d in range(d_out):
        inside = labels == d
        n_in, n_out_ = int(inside.sum()), int((~inside).sum())
        if n_in == 0 or n_out_ == 0:
            raise ValueError(f"multi_domain_critic_loss: domain {d} needs in- and out-of-domain rows")
        col = ad.row(cols, d)
        term = ad.sub(ad.matmul(col, ad.constant(np.where(inside, 1.0 / n_in, 0.0))),
                      ad.matmul(col, ad.constant(np.where(inside, 0.0, 1.0 / n_out_))))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / d_out)


def _critic_objective(model, z_src, z_tgt, labels):
    """The loss the critic minimizes, as a node over ``z`` inputs."""
    cfg = model.cfg
    if cfg.critic_loss == "ce":
        logits = model.Q.forward(ad.concat([z_src, z_tgt], axis=0))
        return ad.batch_cross_entropy(logits, labels)
    if cfg.n_domains == 2:
        return ad.scale(ad.wasserstein_loss(model.Q.forward(z_src), model.Q.forward(z_tgt)), -1.0)
    scores = model.Q.forward(ad.concat([z_src, z_tgt], axis=0))
    return ad.scale(multi_domain_critic_loss(scores, labels), -1.0)


def critic_step(model, src_docs, tgt_docs):
    """Train the critic one step on frozen features; clip its weights.

    Touches only critic parameters.  Returns the critic loss value.
    """
    if not model.cfg.adversarial:
        raise ConfigError("critic_step: adversarial mode is off")
    if not src_docs or not tgt_docs:
        raise ValueError("critic_step: empty batch")
    model.critic_steps += 1
    with ad.no_grad():
        z_src = model.feature_matrix(src_docs)
        z_tgt = model.feature_matrix(tgt_docs)
    labels = [model.critic_label(d) for d in src_docs + tgt_docs]
    loss = _critic_objective(model, z_src, z_tgt, labels)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingDiverged(f"critic loss became {value} at critic step {model.critic_steps}")
    ad.backward(loss)
    model.opt_Q.step()
    if model.cfg.critic_loss == "wasserstein":
        # weight clipping approximates the Lipschitz constraint the
        # Kantorovich-Rubinstein estimate needs; the CE critic runs free
        ad.clip_params(model.opt_Q.params, model.cfg.clip_c)
    model.opt_Q.zero_grad()
    return value


def joint_step(model, labeled_batches, unlabeled_batch=None):
    """One predictor-path update: label cross-entropy plus (in adversarial
    mode) the critic objective routed through the gradient-reversal layer.
    Critic parameters are read but never updated here.

    Returns (label loss value, critic objective value or nan).
    """
    labeled_batches = [b for b in labeled_batches if b]
    if not labeled_batches:
        raise ValueError("joint_step: no labeled documents")
    cfg = model.cfg
    step = model.joint_steps
    model.joint_steps += 1
    use_dropout = _needs_dropout(cfg)

    feats, docs = [], []
    for role, batch in enumerate(labeled_batches):
        rng = seeding.rng_for(cfg.seed, seeding.DROPOUT, step, role) if use_dropout else None
        for doc in batch:
            if doc.label is None:
                raise ValueError("joint_step: unlabeled document in a labeled batch")
            feats.append(model.doc_feature(doc, rng))
            docs.append(doc)
    logits = model.P.forward(ad.stack(feats))
    p_loss = ad.batch_cross_entropy(logits, [d.label for d in docs])

    q_value = float("nan")
    loss = p_loss
    if cfg.adversarial:
        if not unlabeled_batch:
            raise ValueError("joint_step: adversarial mode needs an unlabeled target batch")
        rng = seeding.rng_for(cfg.seed, seeding.DROPOUT, step, len(labeled_batches)) if use_dropout else None
        src_pairs = [(f, d) for f, d in zip(feats, docs) if d.domain != model.md.target_domain]
        if not src_pairs:
            raise ValueError("joint_step: adversarial mode needs labeled source documents")
        z_src = ad.grl(ad.stack([f for f, _ in src_pairs]), cfg.lam)
        z_tgt = ad.grl(ad.stack([model.doc_feature(d, rng) for d in unlabeled_batch]), cfg.lam)
        labels = [model.critic_label(d) for _, d in src_pairs] + \
                 [model.critic_label(d) for d in unlabeled_batch]
        q_term = _critic_objective(model, z_src, z_tgt, labels)
        q_value = float(q_term.value)
        loss = ad.add(p_loss, q_term)

    p_value = float(p_loss.value)
    if not math.isfinite(p_value):
        raise TrainingDiverged(f"label loss became {p_value} at joint step {step}")
    ad.backward(loss)
    model.opt_P.step()
    if cfg.extractor == "cnn":
        max_norm_rescale(model.P.W, model.extractor.max_norm)
    model.opt_P.zero_grad()
    ad.zero_grad(model.opt_Q.params)   # grads reached Q through the reversal layer
    return p_value, q_value


def evaluate(model, docs, batch=256):
    """Accuracy of the label head; argmax ties go to the lowest class index."""
    if not docs:
        raise ValueError("evaluate: empty dataset")
    correct = 0
    with ad.no_grad():
        for at in range(0, len(docs), batch):
            chunk = docs[at:at + batch]
            for d in chunk:
                if d.label is None:
                    raise ValueError("evaluate: dataset must be labeled")
            logits = model.P.forward(model.feature_matrix(chunk)).value
            preds = logits.argmax(axis=1)
            correct += int(sum(p == d.label for p, d in zip(preds, chunk)))
    return correct / len(docs)


@dataclass
class EpochRecord:
    epoch: int
    p_loss: float
    q_loss: float
    src_acc: float
    tgt_acc: float
    lam: float
    seconds: float


class TrainHistory:
    COLUMNS = ("epoch", "p_loss", "q_loss", "src_acc", "tgt_acc", "lambda", "seconds")

    def __init__(self):
        self.records = []

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_csv(self, dest, include_seconds=True):
        """Write the history.  ``include_seconds=False`` drops the one
        wall-clock column so the file is identical across repeat runs."""
        cols = self.COLUMNS if include_seconds else self.COLUMNS[:-1]
        lines = [",".join(cols)]
        for r in self.records:
            vals = [str(r.epoch), repr(r.p_loss), repr(r.q_loss),
                    repr(r.src_acc), repr(r.tgt_acc), repr(r.lam)]
            if include_seconds:
                vals.append(repr(r.seconds))
            lines.append(",".join(vals))
        text = "\n".join(lines) + "\n"
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8") as f:
                f.write(text)


def _cycle(docs, batch_size, seed_key):
    """Endless batches over ``docs``, reshuffled (keyed) on every wrap."""
    wrap = 0
    while True:
        for batch in batch_iter(docs, batch_size, seed_key + (wrap,)):
            yield batch.docs
        wrap += 1


def _sample(pool, n, rng):
    if len(pool) <= n:
        return list(pool)
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def train(cfg, prepared, tables, checkpoint_path=None, on_epoch=None):
    """Run the full loop; returns (model, history).

    Each outer iteration: ``n_critic`` critic steps on freshly sampled
    source/unlabeled-target batches, then one joint step on per-domain
    labeled batches plus an unlabeled target batch.  One epoch makes one
    pass (in expectation) over the pooled labeled source documents.
    """
    cfg.validate()
    md = derive_model_data(cfg, prepared, tables)
    model = build_model(cfg, md)
    if not prepared.source_train:
        raise ValueError("train: no labeled source documents")
    if cfg.adversarial and not prepared.target_unlabeled:
        raise ValueError("train: adversarial mode needs unlabeled target documents")

    src_domains = sorted({d.domain for d in prepared.source_train})
    groups = [[d for d in prepared.source_train if d.domain == g] for g in src_domains]
    if prepared.target_train:
        groups.append(prepared.target_train)
    labeled_iters = [_cycle(g, cfg.batch_size, (cfg.seed, seeding.SHUFFLE, gi))
                     for gi, g in enumerate(groups)]
    unlabeled_iter = _cycle(prepared.target_unlabeled, cfg.batch_size,
                            (cfg.seed, seeding.SHUFFLE, len(groups))) \
        if prepared.target_unlabeled else None

    steps_per_epoch = max(1, math.ceil(len(prepared.source_train) / cfg.batch_size))
    per_domain_n = max(1, cfg.batch_size // len(src_domains))
    history = TrainHistory()
    best_acc, stale = -1.0, 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        p_losses, q_losses = [], []
        for _ in range(steps_per_epoch):
            if cfg.adversarial:
                for _k in range(cfg.n_critic):
                    rng = seeding.rng_for(cfg.seed, seeding.CRITIC, model.critic_steps)
                    if cfg.n_domains == 2:
                        src_batch = _sample(prepared.source_train, cfg.batch_size, rng)
                    else:
                        src_batch = []
                        for g in groups[:len(src_domains)]:
                            src_batch.extend(_sample(g, per_domain_n, rng))
                    tgt_batch = _sample(prepared.target_unlabeled, cfg.batch_size, rng)
                    q_losses.append(critic_step(model, src_batch, tgt_batch))
            labeled = [next(it) for it in labeled_iters]
            unlabeled = next(unlabeled_iter) if (cfg.adversarial and unlabeled_iter) else None
            p_loss, _ = joint_step(model, labeled, unlabeled)
            p_losses.append(p_loss)
        src_acc = evaluate(model, prepared.source_test) if prepared.source_test else float("nan")
        tgt_acc = evaluate(model, prepared.target_test) if prepared.target_test else float("nan")
        rec = EpochRecord(epoch=epoch,
                          p_loss=float(np.mean(p_losses)),
                          q_loss=float(np.mean(q_losses)) if q_losses else float("nan"),
                          src_acc=src_acc, tgt_acc=tgt_acc,
                          lam=cfg.lam if cfg.adversarial else 0.0,
                          seconds=time.perf_counter() - t0)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if cfg.patience is not None and prepared.source_test:
            if src_acc > best_acc + 1e-12:
                best_acc, stale = src_acc, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints: versioned text format, one named block per parameter
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "DANNKIT-CHECKPOINT 1"


def _format_block(name, value):
    value = np.atleast_1d(value)
    dims = " ".join(str(s) for s in value.shape)
    lines = [f"PARAM {name} {dims}"]
    rows = value if value.ndim == 2 else [value]
    for r in rows:
        lines.append(" ".join(repr(float(v)) for v in r))
    return lines


def save_checkpoint(model, dest):
    lines = [CHECKPOINT_MAGIC,
             "CONFIG " + json.dumps(model.cfg.to_dict(), sort_keys=True),
             "META " + json.dumps({
                 "class_names": model.md.class_names,
                 "domain_names": model.md.domain_names,
                 "target_domain": model.md.target_domain,
                 "dim": model.md.dim,
                 "n_max": model.md.n_max,
             }, sort_keys=True)]
    if model.md.idf_tables is not None:
        written = {}
        for d in sorted(model.md.idf_tables):
            table = model.md.idf_tables[d]
            if id(table) in written:
                lines.append(f"IDFREF {d} {written[id(table)]}")
                continue
            written[id(table)] = d
            lines.append(f"IDF {d} {table.n_docs} {len(table.doc_freq)}")
            for tok in sorted(table.doc_freq):
                lines.append(f"{tok} {table.doc_freq[tok]}")
    for name, node in model.named_params():
        lines.extend(_format_block(name, node.value))
    lines.append("END")
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8") as f:
            f.write(text)


def load_checkpoint(source, tables):
    """Rebuild a model from a checkpoint plus the embedding tables it was
    trained with (frozen tables are not stored in the file)."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a recognizable checkpoint (bad magic line)")
    if not lines[1].startswith("CONFIG ") or not lines[2].startswith("META "):
        raise ValueError("checkpoint missing CONFIG/META lines")
    cfg = DannConfig.from_dict(json.loads(lines[1][len("CONFIG "):]))
    meta = json.loads(lines[2][len("META "):])

    idf_tables = None
    at = 3
    while at < len(lines) and (lines[at].startswith("IDF ") or lines[at].startswith("IDFREF ")):
        idf_tables = idf_tables or {}
        head = lines[at].split()
        if head[0] == "IDFREF":
            idf_tables[int(head[1])] = idf_tables[int(head[2])]
            at += 1
            continue
        domain, n_docs, n_entries = int(head[1]), int(head[2]), int(head[3])
        freq = {}
        for k in range(n_entries):
            tok, df = lines[at + 1 + k].rsplit(" ", 1)
            freq[tok] = int(df)
        idf_tables[domain] = IdfTable(n_docs=n_docs, doc_freq=freq)
        at += 1 + n_entries

    if isinstance(tables, EmbeddingTable):
        tables = {d: tables for d in range(len(meta["domain_names"]))}
    md = ModelData(class_names=meta["class_names"], domain_names=meta["domain_names"],
                   target_domain=meta["target_domain"], dim=meta["dim"],
                   tables=tables, n_max=meta["n_max"], idf_tables=idf_tables)
    model = build_model(cfg, md)

    params = dict(model.named_params())
    loaded = set()
    while at < len(lines) and lines[at] != "END":
        head = lines[at].split()
        if head[0] != "PARAM":
            raise ValueError(f"unexpected checkpoint line: {lines[at]!r}")
        name = head[1]
        shape = tuple(int(s) for s in head[2:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = [np.array([float(v) for v in lines[at + 1 + r].split()])
                for r in range(n_rows)]
        value = np.vstack(rows) if len(shape) == 2 else rows[0]
        if name not in params:
            raise ValueError(f"checkpoint parameter {name!r} not in this model")
        node = params[name]
        if value.shape != node.value.shape:
            raise ValueError(f"checkpoint parameter {name}: shape {value.shape} "
                             f"vs model {node.value.shape}")
        node.value[...] = value
        loaded.add(name)
        at += 1 + n_rows
    missing = set(params) - loaded
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    return model
