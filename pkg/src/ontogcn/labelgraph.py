"""Label graphs from annotation co-occurrence.

Stages: conditional probabilities ``P`` -> thresholded adjacency ``A`` (unit
diagonal) -> re-weighted ``A_rw`` (self mass ``1-p``, neighbour mass ``p``)
-> symmetric-degree smoothed ``A_hat``. Node features ``X`` come from word
embeddings of the label names.
"""

from __future__ import annotations

import csv
import hashlib
import os
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmbeddingError, GraphError
from .ontology import AnnotationCorpus

DEFAULT_TAU = 0.2
DEFAULT_P = 0.2
DEFAULT_EMBED_DIM = 300
GLOVE_SCALE = 0.4


@dataclass(frozen=True)
class CooccurrenceCounts:
    labels: tuple[str, ...]
    count: np.ndarray  # (n,) clips containing each label
    joint: np.ndarray  # (n, n) clips containing both labels


def count_cooccurrence(corpus: AnnotationCorpus, node_labels: Sequence[str]) -> CooccurrenceCounts:
    """Clip-level presence counts; a node may be a fine or a coarse label."""
    y = corpus.label_matrix(node_labels).astype(np.int64)
    joint = y.T @ y
    return CooccurrenceCounts(tuple(node_labels), np.diag(joint).copy(), joint)


def conditional_probability(counts: CooccurrenceCounts) -> np.ndarray:
    """``P[i, j] = joint[i, j] / count[j]``; columns of absent labels are zero."""
    count = counts.count.astype(np.float64)
    joint = counts.joint.astype(np.float64)
    safe = np.where(count > 0, count, 1.0)
    return np.where(count[None, :] > 0, joint / safe[None, :], 0.0)


def binarize(P: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold tau must lie in [0, 1], got {tau}")
    A = (np.asarray(P) >= tau).astype(np.float64)
    np.fill_diagonal(A, 1.0)
    return A


def reweight(A: np.ndarray, p: float = DEFAULT_P, include_self: bool = False) -> np.ndarray:
    """Split each row into self weight ``1-p`` and neighbour weight ``p``.

    By default the neighbour count excludes the self-loop, so a node's
    neighbours share exactly ``p``. ``include_self=True`` divides by the full
    row sum instead (neighbour mass ``p * deg / (deg + 1)``).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"re-weight parameter p must lie in (0, 1), got {p}")
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    off = A * (1.0 - np.eye(n))
    deg = off.sum(axis=1)
    if include_self:
        deg = deg + np.diag(A)
    safe = np.where(deg > 0, deg, 1.0)
    A_rw = np.where(deg[:, None] > 0, p * off / safe[:, None], 0.0)
    np.fill_diagonal(A_rw, 1.0 - p)
    return A_rw


def smooth(A_rw: np.ndarray) -> np.ndarray:
    """``D^-1/2 A D^-1/2`` with ``D`` the row sums."""
    A_rw = np.asarray(A_rw, dtype=np.float64)
    d = A_rw.sum(axis=1)
    if np.any(~(d > 0)):
        bad = np.flatnonzero(~(d > 0))
        raise GraphError(f"nonpositive row sum at nodes {bad.tolist()}")
    return A_rw / np.sqrt(np.outer(d, d))


# ---------------------------------------------------------------- embeddings


def label_words(label: str) -> list[str]:
    """``"small_engine"`` / ``"small-engine"`` / ``"small engine"`` -> ``["small", "engine"]``."""
    return [w for w in re.split(r"[\s_\-]+", label.strip().lower()) if w]


def fallback_vector(word: str, dim: int, seed: int = 0, scale: float | None = None) -> np.ndarray:
    """Deterministic vector derived from a hash of ``(seed, word)``.

    Unit length by default. With ``scale`` the entries are Gaussian with that
    standard deviation instead; ``GLOVE_SCALE`` roughly matches the spread of
    pretrained 300-d word vectors.
    """
    digest = hashlib.sha256(f"{seed}:{word}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v) if scale is None else scale * v


def write_word_vectors(vectors: Mapping[str, np.ndarray], path) -> None:
    """Write ``word v1 v2 ...`` lines, the layout :func:`read_word_vectors` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in vectors.items():
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def read_word_vectors(path, dim: int | None = None) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.rstrip("\n").split(" ")
            if not parts or not parts[0]:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:] if v != ""], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingError(f"{path}:{lineno}: bad vector value ({exc})") from None
            if dim is None:
                dim = vec.shape[0]
            if vec.shape[0] != dim:
                raise EmbeddingError(
                    f"{path}:{lineno}: word {parts[0]!r} has {vec.shape[0]} values, expected {dim}"
                )
            vectors[parts[0].lower()] = vec
    return vectors


def load_embeddings(path, labels: Sequence[str], dim: int = DEFAULT_EMBED_DIM,
                    fallback: bool = False, seed: int = 0) -> np.ndarray:
    """One row per label: the mean of its words' vectors.

    ``path`` may be ``None`` when ``fallback`` is set, in which case every word
    gets a hash-derived vector.
    """
    if path is None and not fallback:
        raise EmbeddingError("no embedding file given and fallback vectors disabled")
    vectors = read_word_vectors(path, dim) if path is not None else {}
    X = np.zeros((len(labels), dim))
    for i, label in enumerate(labels):
        words = label_words(label)
        if not words:
            raise EmbeddingError(f"label {label!r} has no words to embed")
        rows = []
        for w in words:
            if w in vectors:
                rows.append(vectors[w])
            elif fallback:
                rows.append(fallback_vector(w, dim, seed))
            else:
                raise EmbeddingError(f"no embedding for word {w!r} of label {label!r}")
        X[i] = np.mean(rows, axis=0)
    return X


# ---------------------------------------------------------------- graph


@dataclass(frozen=True, eq=False)
class LabelGraph:
    labels: tuple[str, ...]
    P: np.ndarray
    A: np.ndarray
    A_rw: np.ndarray
    A_hat: np.ndarray
    X: np.ndarray
    tau: float
    p: float

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def embed_dim(self) -> int:
        return self.X.shape[1]

    def stages(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "A": self.A, "A_rw": self.A_rw, "A_hat": self.A_hat}

    def edges(self) -> list[tuple[str, str, float]]:
        """Off-diagonal edges ``(j, i, P(i|j))`` for every ``A[i, j] == 1``.

        Node ``i`` aggregates from node ``j``, so ``j`` is the source.
        """
        out = []
        for i, j in zip(*np.nonzero(self.A)):
            if i != j:
                out.append((self.labels[j], self.labels[i], float(self.P[i, j])))
        return out

    def permuted(self, order: Sequence[int]) -> "LabelGraph":
        o = np.asarray(order)
        ix = np.ix_(o, o)
        return LabelGraph(
            tuple(self.labels[k] for k in o), self.P[ix], self.A[ix], self.A_rw[ix],
            self.A_hat[ix], self.X[o], self.tau, self.p,
        )


def graph_from_adjacency(labels: Sequence[str], P: np.ndarray, X: np.ndarray,
                         tau: float = DEFAULT_TAU, p: float = DEFAULT_P,
                         include_self: bool = False) -> LabelGraph:
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != len(labels) or P.shape != (len(labels), len(labels)):
        raise GraphError(f"{len(labels)} labels but P {P.shape} and X {X.shape}")
    A = binarize(P, tau)
    A_rw = reweight(A, p, include_self=include_self)
    return LabelGraph(tuple(labels), P, A, A_rw, smooth(A_rw), X, tau, p)


def build_graph(corpus: AnnotationCorpus, node_labels: Sequence[str],
                embeddings: Mapping[str, np.ndarray] | np.ndarray,
                tau: float = DEFAULT_TAU, p: float = DEFAULT_P,
                include_self: bool = False) -> LabelGraph:
    """Full pipeline for one graph; ``embeddings`` is a label->vector map or a row-aligned matrix."""
    if isinstance(embeddings, np.ndarray):
        X = np.asarray(embeddings, dtype=np.float64)
        if X.shape[0] != len(node_labels):
            raise EmbeddingError(f"{X.shape[0]} embedding rows for {len(node_labels)} labels")
    else:
        rows = []
        for label in node_labels:
            if label not in embeddings:
                raise EmbeddingError(f"missing embedding for label {label!r}")
            rows.append(np.asarray(embeddings[label], dtype=np.float64))
        X = np.stack(rows) if rows else np.zeros((0, 0))
    P = conditional_probability(count_cooccurrence(corpus, node_labels))
    return graph_from_adjacency(node_labels, P, X, tau, p, include_self)


def export_graph_csv(graph: LabelGraph, directory, prefix: str) -> list[str]:
    """One dense CSV per stage, header row of node labels."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for stage, M in graph.stages().items():
        path = os.path.join(directory, f"{prefix}_{stage}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(graph.labels)
            for row in M:
                w.writerow([repr(float(v)) for v in row])
        paths.append(path)
    return paths


def read_graph_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
