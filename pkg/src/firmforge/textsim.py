"""Deterministic TF-IDF text similarity shared by library matching and memory pick-up.

The exact variant is normative for this project and is pinned by oracle tests:
tf is the raw term count, idf = ln((1 + D) / (1 + df)) + 1 over the fitted
corpus of D documents, vectors are L2-normalised, and tokens are case-folded
maximal alphanumeric runs. Texts are vectorised against the fitted vocabulary
only, so a text sharing no vocabulary with the corpus maps to the zero vector
and has similarity 0 to everything.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Case-folded maximal alphanumeric runs, in order of appearance."""
    return _TOKEN_RE.findall(text.casefold())


def cosine(va: Mapping[str, float], vb: Mapping[str, float]) -> float:
    """Dot product of two sparse vectors (cosine when both are L2-normalised)."""
    if len(vb) < len(va):
        va, vb = vb, va
    return sum(w * vb.get(t, 0.0) for t, w in va.items())


class TfidfSpace:
    """A fixed vector space fitted on a document corpus.

    The space is immutable after :meth:`fit`; concurrent reads are safe.
    """

    def __init__(self, idf: Mapping[str, float], corpus_size: int):
        self._idf = dict(idf)
        self.corpus_size = corpus_size

    @classmethod
    def fit(cls, corpus: Iterable[str]) -> "TfidfSpace":
        docs = [set(tokenize(text)) for text in corpus]
        if not docs:
            raise ValueError("corpus must be non-empty")
        df: Counter[str] = Counter()
        for terms in docs:
            df.update(terms)
        n = len(docs)
        idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in df.items()}
        return cls(idf, n)

    def vector(self, text: str) -> dict[str, float]:
        """L2-normalised tf-idf weights, restricted to the fitted vocabulary."""
        counts = Counter(t for t in tokenize(text) if t in self._idf)
        weights = {t: c * self._idf[t] for t, c in counts.items()}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        if norm == 0.0:
            return {}
        return {t: w / norm for t, w in weights.items()}

    def similarity(self, a: str, b: str) -> float:
        """Cosine similarity in [0, 1]; equal non-zero vectors score exactly 1.0."""
        va = self.vector(a)
        vb = self.vector(b)
        if va and va == vb:
            return 1.0
        return min(1.0, cosine(va, vb))
