"""Word vectors, per-domain projections, and point-set distances.

Embedding files use the common word-vector text format: an optional
"<count> <dim>" header line, then one token followed by ``dim`` decimal
values per line.  Serialization uses shortest round-trip float formatting,
so load -> save -> load is bit-exact.

A projection is a square K x K matrix attached to one domain.  Looked-up
rows are left-multiplied by it, which is how two unaligned embedding spaces
get pulled into a shared one during training.  Projections exist only in
cross-lingual mode and start at identity (a no-op until trained).
"""

from __future__ import annotations

import io

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad


class Vocabulary:
    """Token-to-index map with a reserved out-of-vocabulary slot at 0."""

    OOV = "<unk>"

    def __init__(self, tokens):
        self.tokens = [self.OOV]
        self._index = {self.OOV: 0}
        for tok in tokens:
            if tok not in self._index:
                self._index[tok] = len(self.tokens)
                self.tokens.append(tok)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def index(self, token):
        return self._index.get(token, 0)

    def indices(self, tokens):
        idx = self._index
        return np.fromiter((idx.get(t, 0) for t in tokens), dtype=np.intp, count=len(tokens))


class EmbeddingTable:
    """A vocabulary plus one float64 row per token.

    Row 0 belongs to the OOV token and is all zeros unless the table was
    built with a trainable OOV row.  ``node`` is the graph leaf used by
    lookups: a parameter when the table is trainable, a constant otherwise.
    """

    def __init__(self, vocab, matrix, trainable=False, name="emb"):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[0] != len(vocab):
            raise ValueError(f"embedding matrix has {matrix.shape[0]} rows for {len(vocab)} tokens")
        self.vocab = vocab
        self.matrix = matrix
        self.trainable = trainable
        self.dim = matrix.shape[1]
        self.node = ad.parameter(matrix, name=name) if trainable else ad.constant(matrix, name=name)
        if trainable:
            self.matrix = self.node.value  # share the buffer the optimizer updates

    def vector(self, token):
        return self.matrix[self.vocab.index(token)]


def _open_lines(source):
    if hasattr(source, "read"):
        return source
    return open(source, "r", encoding="utf-8")


def load_embeddings(source, restrict_to=None, trainable=False):
    """Parse a word-vector text stream into an EmbeddingTable.

    ``restrict_to``: optional token collection; other tokens are skipped.
    Duplicate tokens keep their first vector.  A malformed line (wrong
    dimension count, non-numeric field) fails with its line number.
    """
    restrict = set(restrict_to) if restrict_to is not None else None
    tokens, rows, dim = [], [], None
    seen = set()
    stream = _open_lines(source)
    try:
        for lineno, line in enumerate(stream, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    int(parts[0]), int(parts[1])
                    continue  # "<count> <dim>" header
                except ValueError:
                    pass
            token, fields = parts[0], parts[1:]
            if dim is None:
                dim = len(fields)
                if dim == 0:
                    raise ValueError(f"line {lineno}: no vector values")
            if len(fields) != dim:
                raise ValueError(f"line {lineno}: expected {dim} values, got {len(fields)}")
            if token in seen:
                continue
            if restrict is not None and token not in restrict:
                continue
            try:
                vec = [float(f) for f in fields]
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric vector value")
            seen.add(token)
            tokens.append(token)
            rows.append(vec)
    finally:
        if stream is not source:
            stream.close()
    if dim is None:
        raise ValueError("embedding stream contains no vectors")
    vocab = Vocabulary(tokens)
    matrix = np.zeros((len(vocab), dim))
    if rows:
        matrix[1:] = np.array(rows)
    return EmbeddingTable(vocab, matrix, trainable=trainable)


def save_embeddings(table, dest):
    """Write a table in the text format (header + one token per line)."""
    stream = dest if hasattr(dest, "write") else open(dest, "w", encoding="utf-8")
    try:
        n = len(table.vocab) - 1
        stream.write(f"{n} {table.dim}\n")
        for i, token in enumerate(table.vocab.tokens):
            if i == 0:
                continue  # OOV row is implicit
            values = " ".join(repr(float(v)) for v in table.matrix[i])
            stream.write(f"{token} {values}\n")
    finally:
        if stream is not dest:
            stream.close()


class ProjectionMatrix:
    """Per-domain K x K map applied to looked-up embedding rows."""

    def __init__(self, domain, dim, weights=None, trainable=True):
        if weights is None:
            weights = np.eye(dim)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (dim, dim):
            raise ValueError(f"projection for domain {domain} must be ({dim}, {dim}), got {weights.shape}")
        self.domain = domain
        self.dim = dim
        self.trainable = trainable
        name = f"proj.{domain}"
        self.node = ad.parameter(weights, name=name) if trainable else ad.constant(weights, name=name)

    @property
    def weights(self):
        return self.node.value


def save_projection(proj, dest):
    stream = dest if hasattr(dest, "write") else open(dest, "w", encoding="utf-8")
    try:
        stream.write(f"PROJ {proj.domain} {proj.dim}\n")
        for r in proj.weights:
            stream.write(" ".join(repr(float(v)) for v in r) + "\n")
    finally:
        if stream is not dest:
            stream.close()


def load_projection(source, trainable=True):
    stream = _open_lines(source)
    try:
        header = stream.readline().split()
        if len(header) != 3 or header[0] != "PROJ":
            raise ValueError("projection stream must start with 'PROJ <domain> <K>'")
        domain, dim = header[1], int(header[2])
        rows = []
        for lineno in range(dim):
            fields = stream.readline().split()
            if len(fields) != dim:
                raise ValueError(f"projection row {lineno}: expected {dim} values, got {len(fields)}")
            rows.append([float(f) for f in fields])
    finally:
        if stream is not source:
            stream.close()
    try:
        domain = int(domain)
    except ValueError:
        pass
    return ProjectionMatrix(domain, dim, weights=np.array(rows), trainable=trainable)


def embed(doc, table, proj=None):
    """Embedding rows for a document: (T, K) node, one row per token.

    Unknown tokens hit the OOV row.  With a projection, each row is
    left-multiplied by the projection weights.
    """
    if not doc.tokens:
        raise ValueError("embed: document has no tokens")
    rows = ad.gather_rows(table.node, table.vocab.indices(doc.tokens))
    if proj is not None:
        rows = ad.matmul(rows, ad.transpose(proj.node))
    return rows


def embed_padded(doc, table, n_rows, proj=None):
    """Like ``embed`` but truncated/zero-padded to exactly ``n_rows`` rows."""
    if n_rows < 1:
        raise ValueError(f"embed_padded: n_rows must be >= 1, got {n_rows}")
    tokens = doc.tokens[:n_rows]
    if not tokens:
        raise ValueError("embed_padded: document has no tokens")
    rows = ad.gather_rows(table.node, table.vocab.indices(tokens))
    if proj is not None:
        rows = ad.matmul(rows, ad.transpose(proj.node))
    missing = n_rows - len(tokens)
    if missing > 0:
        rows = ad.concat([rows, ad.constant(np.zeros((missing, table.dim)))], axis=0)
    return rows


def hausdorff_directed(a, b):
    """sup over a of inf over b of the euclidean distance."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("hausdorff: empty point set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"hausdorff: dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return float(cdist(a, b).min(axis=1).max())


def hausdorff_undirected(a, b):
    """max of the two directed distances (symmetric)."""
    return max(hausdorff_directed(a, b), hausdorff_directed(b, a))
