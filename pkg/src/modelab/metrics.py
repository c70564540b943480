"""Evaluation metrics for synthesized samples and learned embeddings.

All functions are pure numpy on plain arrays. Oracles are objects exposing
``classify(x)`` (and ``posterior(x)`` where needed) and ``n_classes``.
"""
import io
from dataclasses import dataclass, fields

import numpy as np

from .errors import (EmptyCategory, EmptyInput, SingularCovariance, TooFewSamples,
                     ZeroEmbedding, ZeroExpectedMass)

EIG_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CategoryDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def empirical(cls, labels, k):
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) == 0:
            raise EmptyInput("no labels")
        return cls(np.bincount(labels, minlength=k)[:k] / len(labels))


def kl_divergence(p, q):
    """``sum p log(p / q)`` with ``0 log 0 = 0``."""
    p = p.probs if isinstance(p, CategoryDistribution) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, CategoryDistribution) else np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        raise ZeroExpectedMass("expected distribution has zero mass where observed mass is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def kl_mode_collapse(synth, targets, oracle):
    """KL between the oracle-classified distribution of ``synth`` and the target-label distribution."""
    k = oracle.n_classes
    p = CategoryDistribution.empirical(oracle.classify(synth), k)
    q = CategoryDistribution.empirical(targets, k)
    return kl_divergence(p, q)


def category_accuracy(synth, targets, oracle, categories=None):
    """Per target category, the fraction of samples the oracle assigns to that category."""
    targets = np.asarray(targets, dtype=np.int64)
    predicted = oracle.classify(synth)
    if categories is None:
        categories = range(oracle.n_classes)
    out = []
    for c in categories:
        sel = targets == c
        if not sel.any():
            raise EmptyCategory(f"no synthesized samples target category {c}")
        out.append(float(np.mean(predicted[sel] == c)))
    return np.array(out)


def intra_class_variance(embeddings, labels):
    """Mean over classes of the mean squared distance to the class centroid."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise EmptyInput("no embeddings")
    per_class = []
    for c in np.unique(labels):
        pts = x[labels == c]
        per_class.append(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    return float(np.mean(per_class))


def cosine_similarity(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroEmbedding("cosine similarity of a zero embedding")
    return np.sum(a * b, axis=1) / (na * nb)


def verification_accuracy(queries, galleries, same_identity, threshold):
    """Accuracy of predicting "same identity" when cosine similarity >= ``threshold``."""
    same_identity = np.asarray(same_identity, dtype=bool)
    sims = cosine_similarity(queries, galleries)
    if len(sims) != len(same_identity):
        raise ValueError("one flag per query/gallery pair required")
    return float(np.mean((sims >= threshold) == same_identity))


def calibrate_threshold(similarities, same_identity):
    """Threshold maximizing verification accuracy on a calibration set.

    Candidates are midpoints between consecutive sorted similarities plus
    the two ends; the first maximizer wins.
    """
    s = np.sort(np.unique(np.asarray(similarities, dtype=np.float64)))
    flags = np.asarray(same_identity, dtype=bool)
    if len(s) == 0:
        raise EmptyInput("no calibration pairs")
    candidates = np.concatenate([[s[0] - 1e-9], (s[:-1] + s[1:]) / 2.0, [s[-1] + 1e-9]])
    sims = np.asarray(similarities, dtype=np.float64)
    acc = [np.mean((sims >= t) == flags) for t in candidates]
    return float(candidates[int(np.argmax(acc))])


def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(real, synth):
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` of Gaussian fits.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S1^(1/2) S2 S1^(1/2)``.
    """
    a = np.asarray(real, dtype=np.float64)
    b = np.asarray(synth, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise TooFewSamples(f"need at least {d + 1} samples per set")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    root1 = _sqrtm_psd(s1)
    prod = root1 @ s2 @ root1
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    scale = max(1.0, float(np.max(np.abs(w))))
    if np.min(w) < -EIG_TOLERANCE * scale:
        raise SingularCovariance(f"covariance product has eigenvalue {np.min(w):.3g}")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def classifier_score(synth, posterior):
    """``exp(mean KL(posterior(x) || marginal))``; lies in ``[1, K]``."""
    p = np.asarray(posterior(synth), dtype=np.float64)
    if p.size == 0:
        raise EmptyInput("no samples")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(np.mean(np.sum(terms, axis=1))))


def mode_coverage(synth, oracle, min_count=1):
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts = np.bincount(oracle.classify(synth), minlength=oracle.n_classes)
    return int(np.sum(counts >= min_count))


@dataclass
class MetricsReport:
    kl_mode_collapse: float
    category_accuracy: tuple
    intra_class_variance: float
    verification_accuracy: float
    frechet_distance: float
    classifier_score: float
    mode_coverage: int

    def header(self):
        cols = []
        for f in fields(self):
            if f.name == "category_accuracy":
                cols += [f"category_accuracy_{i}" for i in range(len(self.category_accuracy))]
            else:
                cols.append(f.name)
        return cols

    def row(self):
        cells = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "category_accuracy":
                cells += [repr(float(v)) for v in value]
            elif isinstance(value, int):
                cells.append(str(value))
            else:
                cells.append(repr(float(value)))
        return cells

    def to_csv(self):
        return ",".join(self.header()) + "\n" + ",".join(self.row()) + "\n"

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"KL degree of mode collapse : {self.kl_mode_collapse:.4f}\n")
        acc = "  ".join(f"{a:.3f}" for a in self.category_accuracy)
        buf.write(f"category accuracy          : {acc}\n")
        buf.write(f"intra-class variance       : {self.intra_class_variance:.6f}\n")
        buf.write(f"verification accuracy      : {self.verification_accuracy:.4f}\n")
        buf.write(f"Frechet distance           : {self.frechet_distance:.4f}\n")
        buf.write(f"classifier score           : {self.classifier_score:.4f}\n")
        buf.write(f"mode coverage              : {self.mode_coverage}\n")
        return buf.getvalue()
