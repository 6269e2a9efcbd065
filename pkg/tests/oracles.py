"""Independent reference implementations used to check the package.

Everything here is written directly from the defining formulas with plain
loops or scipy, deliberately ignoring how the package implements the same
quantities, so agreement is evidence rather than tautology.
"""

import numpy as np
from scipy.special import log_softmax as sp_log_softmax
from scipy.special import softmax as sp_softmax


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function at an array point."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        keep = x[idx]
        x[idx] = keep + h
        up = f(x)
        x[idx] = keep - h
        down = f(x)
        x[idx] = keep
        g[idx] = (up - down) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def softmax_ref(v, axis=-1):
    return sp_softmax(np.asarray(v, dtype=float), axis=axis)


def cross_entropy_ref(logits, label):
    return float(-sp_log_softmax(np.asarray(logits, dtype=float))[label])


def adam_ref(values, grads, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """Trajectory of one parameter under Adam given a list of gradients."""
    x = np.array(values, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    out = []
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=float)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(x.copy())
    return out


def gru_step_ref(x_t, h_prev, p):
    """One GRU step from the gate equations; p maps names to arrays."""
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    z = sig(x_t @ p["Wz"] + h_prev @ p["Uz"] + p["bz"])
    r = sig(x_t @ p["Wr"] + h_prev @ p["Ur"] + p["br"])
    c = np.tanh(x_t @ p["Wh"] + (r * h_prev) @ p["Uh"] + p["bh"])
    return (1.0 - z) * h_prev + z * c


def gru_sequence_ref(xs, p, h0=None, reverse=False):
    """All hidden states of a GRU over a sequence, one step at a time."""
    xs = np.asarray(xs, dtype=float)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    h = np.zeros(p["Uz"].shape[0]) if h0 is None else np.asarray(h0, dtype=float)
    states = {}
    for t in order:
        h = gru_step_ref(xs[t], h, p)
        states[t] = h
    return np.stack([states[t] for t in range(len(xs))])


def attention_ref(h_seq, W, b, u):
    """Additive attention pooling: weights and pooled vector by the formula."""
    scores = np.tanh(h_seq @ W + b) @ u
    alpha = softmax_ref(scores)
    return alpha @ h_seq, alpha


def conv_maxpool_ref(rows, W, bias, width):
    """Window filter bank + ReLU + max over positions, by explicit loops."""
    rows = np.asarray(rows, dtype=float)
    n, k = rows.shape
    feats = np.full(W.shape[1], -np.inf)
    for start in range(n - width + 1):
        window = rows[start:start + width].reshape(-1)
        act = np.maximum(window @ W + bias, 0.0)
        feats = np.maximum(feats, act)
    return feats


def idf_ref(n_docs, df):
    return np.log((1.0 + n_docs) / (1.0 + df)) + 1.0


def tfidf_vector_ref(tokens, rows_by_token, n_docs, doc_freq):
    """Sum over token positions of (count in doc) * idf * vector, divided by
    the document length."""
    dim = len(next(iter(rows_by_token.values())))
    acc = np.zeros(dim)
    counts = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    for t in tokens:
        acc += counts[t] * idf_ref(n_docs, doc_freq.get(t, 0)) * rows_by_token[t]
    return acc / len(tokens)


def hausdorff_directed_ref(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    worst = 0.0
    for p in a:
        best = min(float(np.sqrt(((p - q) ** 2).sum())) for q in b)
        worst = max(worst, best)
    return worst


def hausdorff_undirected_ref(a, b):
    return max(hausdorff_directed_ref(a, b), hausdorff_directed_ref(b, a))


def sep_ref(f1, f2):
    """Everything in the second group to its nearest neighbor in the first,
    summed and divided by the first group's size."""
    f1, f2 = np.asarray(f1, dtype=float), np.asarray(f2, dtype=float)
    total = 0.0
    for w2 in f2:
        total += min(float(np.sqrt(((w1 - w2) ** 2).sum())) for w1 in f1)
    return total / len(f1)


def multi_domain_loss_ref(scores, labels):
    """One-vs-rest mean-difference objective, domain by domain."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    d_out = scores.shape[1]
    total = 0.0
    for d in range(d_out):
        inside = [s[d] for s, l in zip(scores, labels) if l == d]
        outside = [s[d] for s, l in zip(scores, labels) if l != d]
        total += np.mean(inside) - np.mean(outside)
    return total / d_out


def normalized_attention_ref(word_alphas, sent_alpha):
    """Word-by-sentence attention products scaled by the document maximum."""
    raw = []
    for i, ws in enumerate(word_alphas):
        raw.append([w * sent_alpha[i] for w in ws])
    top = max(max(r) for r in raw if r)
    return [[w / top for w in r] for r in raw]


def pca_2d_ref(x):
    """First two principal directions from the covariance eigendecomposition,
    each direction's first nonzero entry made positive."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    coords = np.zeros((len(x), 2))
    for k in range(min(2, (vals[order] > 1e-10).sum())):
        v = vecs[:, order[k]]
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if len(nz) and v[nz[0]] < 0:
            v = -v
        coords[:, k] = centered @ v
    return coords
