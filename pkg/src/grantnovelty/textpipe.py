"""Tokenization and tf-idf over a unigram + bigram vocabulary.

A document enters the pipeline either as a token list or as a term-count
mapping (``{"gravitational": 2, "gravitational_wave": 1, ...}``). Counts may
be real-valued; the clone probe feeds noisy term-frequency vectors through
the same path as ordinary summaries.
"""
from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
BIGRAM_SEP = "_"

Document = Union[Sequence[str], Mapping[str, float]]


class EmptyVocabularyError(ValueError):
    pass


def tokenize(text: str, min_len: int = 2) -> list[str]:
    """Lowercased maximal alphanumeric runs, dropping tokens shorter than ``min_len``."""
    return [tok for tok in _TOKEN_RE.findall(text.lower()) if len(tok) >= min_len]


def term_counts(doc: Document) -> dict[str, float]:
    """Unigram and adjacent-bigram counts of a token list.

    Mappings are taken to be term counts already and are returned with
    nonpositive entries removed.
    """
    if isinstance(doc, Mapping):
        return {t: float(c) for t, c in doc.items() if c > 0}
    counts: Counter = Counter(doc)
    counts.update(a + BIGRAM_SEP + b for a, b in zip(doc, doc[1:]))
    return {t: float(c) for t, c in counts.items()}


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    index: dict[str, int]
    df: np.ndarray

    def __len__(self) -> int:
        return len(self.terms)


def build_vocabulary(docs: Sequence[Document], min_df: int = 2, max_df_ratio: float = 0.95) -> Vocabulary:
    if not docs:
        raise ValueError("build_vocabulary needs at least one document")
    if min_df < 1:
        raise ValueError("min_df must be >= 1")
    if not 0.0 < max_df_ratio <= 1.0:
        raise ValueError("max_df_ratio must lie in (0, 1]")
    df: Counter = Counter()
    for doc in docs:
        df.update(term_counts(doc).keys())
    max_df = max_df_ratio * len(docs)
    kept = sorted(t for t, n in df.items() if min_df <= n <= max_df + 1e-9)
    if not kept:
        raise EmptyVocabularyError(
            f"no term survives min_df={min_df}, max_df_ratio={max_df_ratio} over {len(docs)} documents"
        )
    return Vocabulary(
        terms=tuple(kept),
        index={t: i for i, t in enumerate(kept)},
        df=np.array([df[t] for t in kept], dtype=np.int64),
    )


def smoothed_idf(df: np.ndarray, n_docs: int) -> np.ndarray:
    return np.log((1.0 + n_docs) / (1.0 + np.asarray(df, dtype=float))) + 1.0


@dataclass(frozen=True)
class TfIdfModel:
    vocab: Vocabulary
    idf: np.ndarray
    n_docs: int
    normalize: bool = True

    @property
    def n_terms(self) -> int:
        return len(self.vocab)


def _rows_to_csr(model: TfIdfModel, docs: Iterable[Document]) -> sp.csr_matrix:
    index = model.vocab.index
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for doc in docs:
        row = sorted(
            (index[t], c) for t, c in term_counts(doc).items() if t in index
        )
        indices.extend(i for i, _ in row)
        data.extend(c for _, c in row)
        indptr.append(len(indices))
    m = sp.csr_matrix(
        (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(indptr) - 1, model.n_terms),
    )
    m.data *= model.idf[m.indices]
    if model.normalize:
        norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        scale = np.repeat(np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0), np.diff(m.indptr))
        m.data *= scale
    return m


def tfidf_fit_transform(docs: Sequence[Document], vocab: Vocabulary, normalize: bool = True) -> tuple[TfIdfModel, sp.csr_matrix]:
    """Fit idf weights on ``docs`` and return their tf-idf matrix.

    tf is the raw count, idf is ``ln((1+N)/(1+df)) + 1`` and rows are scaled
    to unit Euclidean norm when ``normalize`` is set (all-zero rows stay zero).
    """
    model = TfIdfModel(vocab=vocab, idf=smoothed_idf(vocab.df, len(docs)), n_docs=len(docs), normalize=normalize)
    return model, _rows_to_csr(model, docs)


def tfidf_transform(model: TfIdfModel, doc: Document) -> sp.csr_matrix:
    """One-row tf-idf matrix for ``doc`` using the frozen vocabulary and idf."""
    return _rows_to_csr(model, [doc])


def tfidf_transform_many(model: TfIdfModel, docs: Sequence[Document]) -> sp.csr_matrix:
    return _rows_to_csr(model, docs)


def write_vocabulary(model: TfIdfModel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["term", "df", "idf"])
        for term, df, idf in zip(model.vocab.terms, model.vocab.df, model.idf):
            w.writerow([term, int(df), repr(float(idf))])


def read_vocabulary(path, normalize: bool = True, n_docs: int | None = None) -> TfIdfModel:
    """Rebuild a TfIdfModel from a vocabulary dump.

    ``n_docs`` is recovered from the idf of the first term when not given.
    """
    terms, dfs, idfs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            terms.append(row["term"])
            dfs.append(int(row["df"]))
            idfs.append(float(row["idf"]))
    if n_docs is None:
        n_docs = int(round((1 + dfs[0]) * math.exp(idfs[0] - 1.0) - 1))
    vocab = Vocabulary(tuple(terms), {t: i for i, t in enumerate(terms)}, np.array(dfs, dtype=np.int64))
    return TfIdfModel(vocab, np.array(idfs), n_docs, normalize)
