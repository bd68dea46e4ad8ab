"""Descriptor similarity and query-to-database vertex matching.

Two descriptors are compared by the size of the multiset intersection of their
walk rows, divided by the number of walks. For matching many query vertices
against a fixed database the rows are tokenized: the ``r``-th repetition of a row
inside one descriptor becomes its own token, which turns the multiset
intersection into a dot product of binary token vectors.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

DEFAULT_TOP_K = 5


class DescriptorMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MatchCandidate:
    query_vertex_id: int
    db_vertex_id: int
    score: float


@dataclass
class MatchSet:
    k: int
    candidates: dict = field(default_factory=dict)  # query id -> [MatchCandidate] best first

    def pairs(self):
        for qid in sorted(self.candidates):
            yield from self.candidates[qid]

    def __len__(self):
        return sum(len(c) for c in self.candidates.values())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "db_id", "score"])
        for c in self.pairs():
            w.writerow([c.query_vertex_id, c.db_vertex_id, repr(float(c.score))])
        return buf.getvalue()


def similarity(a, b):
    """Fraction of walks shared by ``a`` and ``b`` (multiset intersection), 0 across classes."""
    if a.shape != b.shape:
        raise DescriptorMismatch(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    if a.seed_class != b.seed_class:
        return 0.0
    ca = Counter(map(bytes, a.walks))
    cb = Counter(map(bytes, b.walks))
    return sum((ca & cb).values()) / a.shape[0]


def _descriptor_shape(descriptors):
    shapes = {d.shape for d in descriptors.values()}
    if len(shapes) > 1:
        raise DescriptorMismatch(f"descriptors with different shapes: {sorted(shapes)}")
    return shapes.pop() if shapes else None


class DescriptorIndex:
    """Tokenized database descriptors, built once and queried per window."""

    def __init__(self, descriptors):
        self.shape = _descriptor_shape(descriptors)
        self.tokens = {}  # (row bytes, repetition) -> token id
        by_class = {}
        for vid in sorted(descriptors):
            by_class.setdefault(descriptors[vid].seed_class, []).append(vid)
        self.ids = {}
        self.matrices = {}
        for cls, vids in by_class.items():
            rows, cols = [], []
            for r, vid in enumerate(vids):
                for tok in self._tokenize(descriptors[vid], grow=True):
                    rows.append(r)
                    cols.append(tok)
            self.ids[cls] = np.asarray(vids, dtype=np.int64)
            self.matrices[cls] = (rows, cols)
        n_tok = len(self.tokens)
        for cls, (rows, cols) in self.matrices.items():
            data = np.ones(len(rows), dtype=np.int32)
            self.matrices[cls] = sparse.csr_matrix((data, (rows, cols)), shape=(len(self.ids[cls]), n_tok))

    def _tokenize(self, desc, grow=False):
        out = []
        prev, rep = None, 0
        for row in desc.walks:  # rows are sorted, so repeats are adjacent
            key = row.tobytes()
            rep = rep + 1 if key == prev else 0
            prev = key
            tok = self.tokens.get((key, rep))
            if tok is None:
                if not grow:
                    continue
                tok = self.tokens[(key, rep)] = len(self.tokens)
            out.append(tok)
        return out

    def match(self, query_descriptors, k=DEFAULT_TOP_K):
        """Top-``k`` same-class database vertices with positive score for every query vertex."""
        if k < 1:
            raise ValueError("k must be >= 1")
        qshape = _descriptor_shape(query_descriptors)
        if qshape is not None and self.shape is not None and qshape != self.shape:
            raise DescriptorMismatch(f"query descriptors {qshape} vs database {self.shape}")
        result = MatchSet(k)
        by_class = {}
        for qid in sorted(query_descriptors):
            result.candidates[qid] = []
            by_class.setdefault(query_descriptors[qid].seed_class, []).append(qid)
        n_walks = qshape[0] if qshape else 1
        n_tok = len(self.tokens)
        for cls, qids in by_class.items():
            if cls not in self.matrices:
                continue
            rows, cols = [], []
            for r, qid in enumerate(qids):
                toks = self._tokenize(query_descriptors[qid])
                rows.extend([r] * len(toks))
                cols.extend(toks)
            Q = sparse.csr_matrix((np.ones(len(rows), dtype=np.int32), (rows, cols)), shape=(len(qids), n_tok))
            counts = (Q @ self.matrices[cls].T).toarray()
            db_ids = self.ids[cls]
            for r, qid in enumerate(qids):
                row = counts[r]
                pos = np.nonzero(row > 0)[0]
                if not len(pos):
                    continue
                # descending count, then ascending db id (db_ids is ascending)
                order = pos[np.lexsort((db_ids[pos], -row[pos]))][:k]
                result.candidates[qid] = [MatchCandidate(qid, int(db_ids[j]), row[j] / n_walks) for j in order]
        return result


def match_graphs(query_descriptors, db_descriptors, k=DEFAULT_TOP_K):
    """Match query vertices to database vertices by descriptor similarity.

    Both arguments map vertex id to ``WalkDescriptor``; ``db_descriptors`` may also be
    a prebuilt ``DescriptorIndex``.
    """
    index = db_descriptors if isinstance(db_descriptors, DescriptorIndex) else DescriptorIndex(db_descriptors)
    return index.match(query_descriptors, k)
