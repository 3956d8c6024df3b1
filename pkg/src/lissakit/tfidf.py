"""Bag-of-words categorical model with a closed-form damped influence.

A document is a fixed-length sequence of term indices drawn from one softmax
distribution over the vocabulary.  For this model the damped inverse
curvature has an explicit rank-one closed form, and document-pair influence
collapses, as the damping goes to zero, to a term-frequency dot product
weighted by inverse term probability.  That makes the model a desk-scale
oracle: every quantity the stochastic pipeline estimates elsewhere is exact
here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SeededRng


@dataclass(frozen=True)
class Corpus:
    """Equal-length documents over an integer vocabulary."""

    documents: tuple[tuple[int, ...], ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(
            self, "documents", tuple(tuple(int(t) for t in doc) for doc in self.documents)
        )
        if not self.documents:
            raise ValueError("corpus is empty")
        lengths = {len(doc) for doc in self.documents}
        if lengths == {0}:
            raise ValueError("documents are empty")
        if len(lengths) != 1:
            raise ValueError("documents must all have the same length")
        ids = [t for doc in self.documents for t in doc]
        if min(ids) < 0 or max(ids) >= self.vocab_size:
            raise ValueError("term index outside the vocabulary")

    @property
    def n_docs(self) -> int:
        return len(self.documents)

    @property
    def doc_length(self) -> int:
        return len(self.documents[0])

    def counts(self) -> np.ndarray:
        """Per-document term counts, shape (n_docs, vocab_size)."""
        out = np.zeros((self.n_docs, self.vocab_size))
        for i, doc in enumerate(self.documents):
            np.add.at(out[i], list(doc), 1.0)
        return out


def corpus_from_text(text: str) -> tuple[Corpus, dict[str, int]]:
    """Parse one document per line, whitespace tokens, ids by first appearance."""
    vocab: dict[str, int] = {}
    documents = []
    for line in text.splitlines():
        tokens = line.split()
        if not tokens:
            continue
        documents.append(tuple(vocab.setdefault(tok, len(vocab)) for tok in tokens))
    if not documents:
        raise ValueError("no documents in input")
    return Corpus(documents=tuple(documents), vocab_size=len(vocab)), vocab


def corpus_to_text(corpus: Corpus, id_to_token: dict[int, str] | None = None) -> str:
    """Inverse of corpus_from_text; integer ids become the tokens by default."""
    name = (lambda t: id_to_token[t]) if id_to_token else str
    return "\n".join(" ".join(name(t) for t in doc) for doc in corpus.documents) + "\n"


def sample_corpus(rng: SeededRng, n_docs: int, doc_length: int, probabilities) -> Corpus:
    """Draw documents i.i.d. from a categorical term distribution."""
    p = np.asarray(probabilities, dtype=np.float64)
    if n_docs < 1 or doc_length < 1:
        raise ValueError("need at least one document and one term")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be a distribution")
    edges = np.cumsum(p)
    edges[-1] = 1.0
    docs = []
    for _ in range(n_docs):
        draws = np.searchsorted(edges, rng.uniform(doc_length), side="right")
        docs.append(tuple(int(t) for t in draws))
    return Corpus(documents=tuple(docs), vocab_size=p.size)


@dataclass(frozen=True)
class BowParams:
    """Softmax parameters of the term distribution."""

    logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64).ravel())
        if self.logits.size < 2:
            raise ValueError("need at least two terms")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        if np.any(self.probabilities <= 0):
            raise ValueError("term probabilities underflowed to zero")

    @property
    def probabilities(self) -> np.ndarray:
        shifted = self.logits - self.logits.max()
        e = np.exp(shifted)
        return e / e.sum()

    @classmethod
    def from_probabilities(cls, p) -> "BowParams":
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be positive and sum to one")
        return cls(logits=np.log(p))


@dataclass(frozen=True)
class TfIdfWeights:
    """TF per (doc, term), DF per term, and square-root inverse-DF weights.

    idf is NaN for terms absent from every document; that flags the weight
    as undefined rather than silently dropping the term.
    """

    tf: np.ndarray
    df: np.ndarray
    idf: np.ndarray

    @property
    def undefined_terms(self) -> np.ndarray:
        return np.flatnonzero(self.df == 0)


def tfidf_weights(corpus: Corpus) -> TfIdfWeights:
    """Term frequency, document frequency, and IDF = sqrt(1/DF)."""
    counts = corpus.counts()
    tf = counts / corpus.doc_length
    df = (counts > 0).mean(axis=0)
    idf = np.full_like(df, np.nan)
    seen = df > 0
    idf[seen] = np.sqrt(1.0 / df[seen])
    return TfIdfWeights(tf=tf, df=df, idf=idf)


def bow_gradient(doc, params: BowParams) -> np.ndarray:
    """Gradient of the document log-likelihood in the logits.

    Equals |d| (tau - p) where tau holds the document's term frequencies;
    the entries always sum to zero because softmax is shift invariant.
    """
    p = params.probabilities
    doc = tuple(int(t) for t in doc)
    if not doc:
        raise ValueError("document is empty")
    if min(doc) < 0 or max(doc) >= p.size:
        raise ValueError("term index outside the vocabulary")
    counts = np.zeros(p.size)
    np.add.at(counts, list(doc), 1.0)
    return counts - len(doc) * p


def bow_curvature(params: BowParams) -> np.ndarray:
    """Per-unit-length curvature Diag(p) - p p^T of the softmax model."""
    p = params.probabilities
    return np.diag(p) - np.outer(p, p)


def bow_inverse_hessian(params: BowParams, lambda_damp: float) -> np.ndarray:
    """Closed-form inverse of (Diag(p) - p p^T + lambda I).

    Rank-one downdate of a diagonal, so the inverse is the diagonal inverse
    plus a rank-one correction: Diag(p + lambda)^-1 + d d^T / s with
    d = p / (p + lambda) and s = lambda * sum_j p_j / (p_j + lambda).
    """
    if lambda_damp <= 0:
        raise ValueError("damping must be positive")
    p = params.probabilities
    diag = 1.0 / (p + lambda_damp)
    d = p * diag
    s = lambda_damp * float(d.sum())
    return np.diag(diag) + np.outer(d, d) / s


@dataclass(frozen=True)
class PairEquivalence:
    """Exact damped influence of one document pair next to its TF forms.

    tfidf_sum is the bare weighted dot product sum_t TF TF / p_t;
    tfidf_form rescales and centers it to |d|^2 (tfidf_sum - 1), which is
    what the centered gradients actually produce as the damping vanishes.
    """

    doc_a: int
    doc_b: int
    influence_exact: float
    tfidf_sum: float
    tfidf_form: float

    @property
    def abs_diff(self) -> float:
        return abs(self.influence_exact - self.tfidf_form)


def tfidf_equivalence_check(
    corpus: Corpus, params: BowParams, lambda_damp: float
) -> list[PairEquivalence]:
    """Exact influence versus the TF-IDF limit for every unordered doc pair.

    influence_exact = g_a (H + lambda)^-1 g_b with bag-of-words gradients and
    the closed-form inverse; the gap to tfidf_form shrinks linearly in the
    damping.  Self pairs are included.
    """
    if lambda_damp <= 0:
        raise ValueError("damping must be positive")
    p = params.probabilities
    weights = tfidf_weights(corpus)
    length = corpus.doc_length
    grads = weights.tf * length - length * p
    inverse = bow_inverse_hessian(params, lambda_damp)
    influence = grads @ inverse @ grads.T
    tf_sum = weights.tf @ np.diag(1.0 / p) @ weights.tf.T
    rows = []
    for a in range(corpus.n_docs):
        for b in range(a, corpus.n_docs):
            rows.append(
                PairEquivalence(
                    doc_a=a,
                    doc_b=b,
                    influence_exact=float(influence[a, b]),
                    tfidf_sum=float(tf_sum[a, b]),
                    tfidf_form=float(length**2 * (tf_sum[a, b] - 1.0)),
                )
            )
    return rows
