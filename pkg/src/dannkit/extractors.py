"""Feature extractors: averaged, tf-idf-weighted, convolutional, hierarchical.

Every extractor maps one embedded document to a fixed-width feature vector
node: ``avg`` and ``tfidf`` pool the embedding rows and pass them through a
100-unit ReLU dense layer, ``cnn`` runs width-{3,4,5} filter banks with
max-over-time pooling (300 features), and ``han`` is a two-level
bidirectional GRU with attention at both levels (200 features).

The GRU runs as a single fused graph node per sequence: the forward loop
stores gate activations and the backward rule replays them in reverse.
That keeps the tape small enough to train hierarchical models at
interactive speed without changing any semantics (the cell is still the
standard update/reset-gate recurrence and is finite-difference checked).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class IdfTable:
    """Smoothed inverse document frequencies from a training split."""
    n_docs: int
    doc_freq: dict

    def idf(self, token):
        df = self.doc_freq.get(token, 0)
        return math.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0


def fit_idf(docs):
    if not docs:
        raise ValueError("fit_idf: empty document list")
    doc_freq = Counter()
    for doc in docs:
        doc_freq.update(set(doc.tokens))
    return IdfTable(n_docs=len(docs), doc_freq=dict(doc_freq))


# ---------------------------------------------------------------------------
# Recurrent building blocks
# ---------------------------------------------------------------------------

class GruParams:
    """Weights of one GRU direction: W* (input), U* (recurrent), b* (bias)
    for the update gate z, reset gate r, and candidate state."""

    def __init__(self, dim_in, units, rng, name="gru"):
        self.dim_in = dim_in
        self.units = units

        def w(tag):
            return ad.parameter(ad.glorot_uniform(rng, dim_in, units), name=f"{name}.W{tag}")

        def u(tag):
            return ad.parameter(ad.glorot_uniform(rng, units, units), name=f"{name}.U{tag}")

        def b(tag):
            return ad.parameter(np.zeros(units), name=f"{name}.b{tag}")

        self.Wz, self.Uz, self.bz = w("z"), u("z"), b("z")
        self.Wr, self.Ur, self.br = w("r"), u("r"), b("r")
        self.Wh, self.Uh, self.bh = w("h"), u("h"), b("h")

    def named(self, prefix):
        return [(f"{prefix}.{n.name.split('.')[-1]}", n) for n in
                (self.Wz, self.Uz, self.bz, self.Wr, self.Ur, self.br, self.Wh, self.Uh, self.bh)]


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def gru_sequence(params, xs, h0=None, reverse=False):
    """Hidden states for a whole sequence as one fused op.

    ``xs``: (T, dim_in) node.  Returns a (T, units) node whose row t is the
    state after consuming token t (scanning from the end when ``reverse``).
    """
    if xs.value.ndim != 2 or xs.value.shape[0] == 0:
        raise ad.ShapeError(f"gru_sequence: need non-empty (T, dim) input, got {xs.value.shape}")
    p = params
    X = xs.value[::-1] if reverse else xs.value
    T, H = X.shape[0], p.units
    h_prev = np.zeros(H) if h0 is None else h0.value
    xz = X @ p.Wz.value + p.bz.value
    xr = X @ p.Wr.value + p.br.value
    xc = X @ p.Wh.value + p.bh.value
    Z, R, C = np.empty((T, H)), np.empty((T, H)), np.empty((T, H))
    Hprev = np.empty((T, H))
    states = np.empty((T, H))
    Uzv, Urv, Uhv = p.Uz.value, p.Ur.value, p.Uh.value
    h = h_prev
    for t in range(T):
        Hprev[t] = h
        z = _sigmoid(xz[t] + h @ Uzv)
        r = _sigmoid(xr[t] + h @ Urv)
        c = np.tanh(xc[t] + (r * h) @ Uhv)
        h = (1.0 - z) * h + z * c
        Z[t], R[t], C[t] = z, r, c
        states[t] = h
    out = states[::-1].copy() if reverse else states

    def backward(g):
        G = g[::-1] if reverse else g
        dXz, dXr, dXc = np.empty((T, H)), np.empty((T, H)), np.empty((T, H))
        dh = np.zeros(H)
        for t in range(T - 1, -1, -1):
            dht = G[t] + dh
            z, r, c, hp = Z[t], R[t], C[t], Hprev[t]
            dz = dht * (c - hp)
            dc = dht * z
            dh = dht * (1.0 - z)
            da_c = dc * (1.0 - c * c)
            dq = da_c @ Uhv.T
            dh += dq * r
            dr = dq * hp
            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            dh += da_z @ Uzv.T + da_r @ Urv.T
            dXz[t], dXr[t], dXc[t] = da_z, da_r, da_c
        dX = dXz @ p.Wz.value.T + dXr @ p.Wr.value.T + dXc @ p.Wh.value.T
        if reverse:
            dX = dX[::-1].copy()
        Q = R * Hprev
        grads = [dX,
                 X.T @ dXz, Hprev.T @ dXz, dXz.sum(axis=0),
                 X.T @ dXr, Hprev.T @ dXr, dXr.sum(axis=0),
                 X.T @ dXc, Q.T @ dXc, dXc.sum(axis=0)]
        if h0 is not None:
            grads.append(dh.copy())
        return tuple(grads)

    parents = [xs, p.Wz, p.Uz, p.bz, p.Wr, p.Ur, p.br, p.Wh, p.Uh, p.bh]
    if h0 is not None:
        parents.append(h0)
    return ad.custom(out, parents, "gru_sequence", backward)


def gru_cell(params, x_t, h_prev):
    """One recurrence step: sigmoid update/reset gates, tanh candidate,
    convex blend of previous state and candidate. 1-D in, 1-D out."""
    if x_t.value.ndim != 1 or h_prev.value.ndim != 1:
        raise ad.ShapeError("gru_cell: x_t and h_prev must be 1-D")
    seq = gru_sequence(params, ad.stack([x_t]), h0=h_prev)
    return ad.row(seq, 0)


def attention_pool(h_seq, W, b, u):
    """Additive attention over sequence rows.

    Scores tanh(h W + b) . u per row, softmax-normalizes them, and returns
    (weighted sum of rows, attention weights).
    """
    if h_seq.value.ndim != 2 or h_seq.value.shape[0] == 0:
        raise ad.ShapeError(f"attention_pool: need non-empty (T, H) input, got {h_seq.value.shape}")
    proj = ad.tanh(ad.add(ad.matmul(h_seq, W), b))
    alpha = ad.softmax(ad.matmul(proj, u), axis=-1)
    return ad.matmul(alpha, h_seq), alpha


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------

class AvgExtractor:
    """Mean of the embedding rows, then a 100-unit ReLU dense layer."""

    name = "avg"

    def __init__(self, dim, rng, hidden=100):
        self.feature_dim = hidden
        self.W = ad.parameter(ad.glorot_uniform(rng, dim, hidden), name="avg.W")
        self.b = ad.parameter(np.zeros(hidden), name="avg.b")

    @staticmethod
    def pool(embedded):
        return ad.mean(embedded, axis=0)

    def forward(self, doc, embedded, dropout_rng=None):
        return ad.relu(ad.add(ad.matmul(self.pool(embedded), self.W), self.b))

    def named_params(self):
        return [("avg.W", self.W), ("avg.b", self.b)]


class TfidfExtractor:
    """tf-idf-weighted mean of the embedding rows, same dense head as avg.

    Term frequency is the raw count of the token inside the document; the
    weighted sum over token positions is divided by the document length.
    idf tables are per domain and come from training-split statistics only.
    """

    name = "tfidf"

    def __init__(self, dim, idf_tables, rng, hidden=100):
        self.feature_dim = hidden
        self.idf_tables = idf_tables
        self.W = ad.parameter(ad.glorot_uniform(rng, dim, hidden), name="tfidf.W")
        self.b = ad.parameter(np.zeros(hidden), name="tfidf.b")

    def pool(self, doc, embedded):
        table = self.idf_tables[doc.domain]
        counts = Counter(doc.tokens)
        weights = np.fromiter((counts[t] * table.idf(t) for t in doc.tokens),
                              dtype=np.float64, count=len(doc.tokens))
        weights /= len(doc.tokens)
        return ad.matmul(ad.constant(weights), embedded)

    def forward(self, doc, embedded, dropout_rng=None):
        return ad.relu(ad.add(ad.matmul(self.pool(doc, embedded), self.W), self.b))

    def named_params(self):
        return [("tfidf.W", self.W), ("tfidf.b", self.b)]


class CnnExtractor:
    """Filter banks over token windows with max-over-time pooling.

    Documents arrive zero-padded/truncated to ``n_max`` rows.  Each width-h
    bank is a (h*dim, maps) kernel applied to every h-token window; ReLU,
    then the max over window positions, banks concatenated.  Dropout is
    applied to the concatenated vector at train time; the downstream
    classifier rows are kept under an l2 max-norm (see ``max_norm_rescale``).
    """

    name = "cnn"

    def __init__(self, dim, n_max, rng, widths=(3, 4, 5), maps=100,
                 dropout_rate=0.5, max_norm=3.0):
        if n_max < max(widths):
            raise ValueError(f"cnn: document cap {n_max} shorter than widest filter {max(widths)}")
        self.dim = dim
        self.n_max = n_max
        self.widths = tuple(widths)
        self.maps = maps
        self.dropout_rate = dropout_rate
        self.max_norm = max_norm
        self.feature_dim = maps * len(self.widths)
        self.banks = []
        for h in self.widths:
            W = ad.parameter(ad.glorot_uniform(rng, h * dim, maps), name=f"cnn.W{h}")
            b = ad.parameter(np.zeros(maps), name=f"cnn.b{h}")
            self.banks.append((h, W, b))

    def forward(self, doc, embedded, dropout_rng=None):
        if embedded.value.shape != (self.n_max, self.dim):
            raise ad.ShapeError(f"cnn: expected ({self.n_max}, {self.dim}) input, got {embedded.value.shape}")
        pooled = []
        n = self.n_max
        for h, W, b in self.banks:
            windows = ad.concat([ad.slice_rows(embedded, o, n - h + 1 + o) for o in range(h)], axis=1)
            conv = ad.relu(ad.add(ad.matmul(windows, W), b))
            pooled.append(ad.max_over_time(conv))
        feats = ad.concat(pooled, axis=0)
        if dropout_rng is not None:
            feats = ad.dropout(feats, self.dropout_rate, dropout_rng, training=True)
        return feats

    def named_params(self):
        out = []
        for h, W, b in self.banks:
            out.append((f"cnn.W{h}", W))
            out.append((f"cnn.b{h}", b))
        return out


class HanExtractor:
    """Hierarchical attention: word-level BiGRU + attention pooling per
    sentence, then sentence-level BiGRU + attention pooling over the
    document.  100 units per direction; the feature is the 200-wide
    attended sentence-level state."""

    name = "han"

    def __init__(self, dim, rng, units=100):
        self.units = units
        self.feature_dim = 2 * units
        attn = 2 * units
        self.word_f = GruParams(dim, units, rng, name="han.wf")
        self.word_b = GruParams(dim, units, rng, name="han.wb")
        self.sent_f = GruParams(2 * units, units, rng, name="han.sf")
        self.sent_b = GruParams(2 * units, units, rng, name="han.sb")
        self.Ww = ad.parameter(ad.glorot_uniform(rng, 2 * units, attn), name="han.Ww")
        self.bw = ad.parameter(np.zeros(attn), name="han.bw")
        self.uw = ad.parameter(ad.glorot_uniform(rng, attn, attn, shape=(attn,)), name="han.uw")
        self.Ws = ad.parameter(ad.glorot_uniform(rng, 2 * units, attn), name="han.Ws")
        self.bs = ad.parameter(np.zeros(attn), name="han.bs")
        self.us = ad.parameter(ad.glorot_uniform(rng, attn, attn, shape=(attn,)), name="han.us")

    def _encode(self, rows, fwd, bwd):
        return ad.concat([gru_sequence(fwd, rows), gru_sequence(bwd, rows, reverse=True)], axis=1)

    def _doc_states(self, doc, embedded):
        if not doc.sentences:
            raise ValueError("han: document has no sentences")
        svecs, alphas = [], []
        for a, b in doc.sentences:
            h = self._encode(ad.slice_rows(embedded, a, b), self.word_f, self.word_b)
            s, alpha = attention_pool(h, self.Ww, self.bw, self.uw)
            svecs.append(s)
            alphas.append(alpha)
        hs = self._encode(ad.stack(svecs), self.sent_f, self.sent_b)
        v, alpha_s = attention_pool(hs, self.Ws, self.bs, self.us)
        return v, alphas, alpha_s

    def forward(self, doc, embedded, dropout_rng=None):
        v, _, _ = self._doc_states(doc, embedded)
        return v

    def forward_with_attention(self, doc, embedded):
        """Feature plus word attention per sentence and sentence attention
        (weights as plain arrays)."""
        v, alphas, alpha_s = self._doc_states(doc, embedded)
        return v, [a.value.copy() for a in alphas], alpha_s.value.copy()

    def named_params(self):
        out = (self.word_f.named("han.wf") + self.word_b.named("han.wb")
               + self.sent_f.named("han.sf") + self.sent_b.named("han.sb"))
        out += [("han.Ww", self.Ww), ("han.bw", self.bw), ("han.uw", self.uw),
                ("han.Ws", self.Ws), ("han.bs", self.bs), ("han.us", self.us)]
        return out


def max_norm_rescale(weights, s):
    """Rescale each per-class weight vector of a (features, classes) matrix
    to l2 norm <= s, in place.  Applied after optimizer steps when the cnn
    extractor is active."""
    if s <= 0:
        raise ValueError(f"max_norm_rescale: s must be > 0, got {s}")
    buf = weights.value if isinstance(weights, ad.Node) else weights
    norms = np.sqrt((buf * buf).sum(axis=0))
    over = norms > s
    if np.any(over):
        buf[:, over] *= s / norms[over]
