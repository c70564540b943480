"""Adversarial and metric-learning losses as differentiable tensor functions.

Embeddings are 1-D tensors (one triplet) or 2-D ``rows x dim`` tensors (one
triplet per row). Triplet-style functions return one value per row; batch
functions reduce with the mean over anchors.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (DegenerateBatch, DomainError, EmptyNegatives, NonFiniteInput,
                     ShapeMismatch)
from .tensor import (Tape, Tensor, as_tensor, backward, clamp, euclidean_norm, hinge, log,
                     mean, neg, reshape, scale, sub, take, tsum)

DEFAULT_MARGIN = 0.3
SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_adv_feature: float = 1.0
    lambda_at: float = 0.001

    def __post_init__(self):
        if not (np.isfinite(self.lambda_adv_feature) and np.isfinite(self.lambda_at)):
            raise NonFiniteInput("loss weights must be finite")


def _check_margin(m):
    if not m >= 0:
        raise ValueError(f"margin must be non-negative, got {m}")


def dist(u, v):
    """Euclidean distance along the last axis (with the origin epsilon)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeMismatch(f"dist of {u.shape} and {v.shape}")
    return euclidean_norm(sub(u, v), axis=-1)


def _at_terms(d_ap, d_an, d_np, m, adversarial, hinge_second):
    loss = hinge(d_ap - d_an + m)
    if not adversarial:
        return loss
    second = d_np - d_an
    if hinge_second:
        second = hinge(second)
    return loss + second


def triplet_loss(a, p, n, m=DEFAULT_MARGIN):
    """``[m + Dist(a,p) - Dist(a,n)]_+``."""
    _check_margin(m)
    return _at_terms(dist(a, p), dist(a, n), None, m, False, False)


def adversarial_triplet_loss(a, p, n, m=DEFAULT_MARGIN, hinge_second=False):
    """Triplet hinge plus the zero-sum ranking term ``Dist(n,p) - Dist(a,n)``.

    The second term is unhinged by default, so the value can be negative; it
    is bounded below by ``-Dist(a,p)``.
    """
    _check_margin(m)
    return _at_terms(dist(a, p), dist(a, n), dist(n, p), m, True, hinge_second)


def batch_hard_mining(embeddings, labels):
    """Hard positive / hard negative index per anchor of a P x K batch."""
    data = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    labels = np.asarray(labels)
    if data.ndim != 2 or len(labels) != data.shape[0]:
        raise ShapeMismatch("embeddings must be B x d with B labels")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DegenerateBatch("batch needs at least two classes")
    if counts.min() < 2:
        raise DegenerateBatch("every class needs at least two samples")
    return _kernels.batch_hard_indices(data, labels)


def batch_hard_adversarial_triplet(embeddings, labels, m=DEFAULT_MARGIN,
                                   hinge_second=False, adversarial=True):
    """Mean over anchors of the hard-mined (adversarial) triplet loss.

    With ``adversarial=False`` this is the plain batch-hard Triplet loss.
    The ranking term uses the same mined positive and negative.
    """
    _check_margin(m)
    embeddings = as_tensor(embeddings)
    pos, negi = batch_hard_mining(embeddings, labels)
    a = embeddings
    p = take(embeddings, pos)
    n = take(embeddings, negi)
    d_np = dist(n, p) if adversarial else None
    return mean(_at_terms(dist(a, p), dist(a, n), d_np, m, adversarial, hinge_second))


def batch_hard_triplet(embeddings, labels, m=DEFAULT_MARGIN):
    return batch_hard_adversarial_triplet(embeddings, labels, m, adversarial=False)


def aofs_adversarial_triplet_batch(anchors, positives, candidates, neg_mask,
                                   m=DEFAULT_MARGIN, hinge_second=False,
                                   sum_negatives=False, adversarial=True):
    """Identity-preservation loss for synthesized positives, averaged over anchors.

    ``anchors`` and ``positives`` are B x d (source and synthesized identity
    features); ``candidates`` is M x d and ``neg_mask[i, j]`` marks candidate
    ``j`` as a valid negative for anchor ``i``. The positive is fixed, only
    the negative is mined. With ``sum_negatives`` the ranking term is summed
    over every valid negative instead of using the mined one.
    """
    _check_margin(m)
    anchors, positives, candidates = as_tensor(anchors), as_tensor(positives), as_tensor(candidates)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if anchors.shape != positives.shape or anchors.shape[1] != candidates.shape[1]:
        raise ShapeMismatch("anchor, positive and negative dimensions differ")
    if neg_mask.shape != (anchors.shape[0], candidates.shape[0]):
        raise ShapeMismatch("neg_mask must be B x M")
    if not neg_mask.any(axis=1).all():
        raise EmptyNegatives("every anchor needs at least one negative")
    hard = _kernels.masked_argmin(anchors.data, candidates.data, neg_mask)
    n = take(candidates, hard)
    d_ap = dist(anchors, positives)
    d_an = dist(anchors, n)
    first = hinge(d_ap - d_an + m)
    if not adversarial:
        return mean(first)
    if not sum_negatives:
        second = dist(n, positives) - d_an
        if hinge_second:
            second = hinge(second)
        return mean(first + second)
    rows, cols = np.nonzero(neg_mask)
    nn = take(candidates, cols)
    second = dist(nn, take(positives, rows)) - dist(take(anchors, rows), nn)
    if hinge_second:
        second = hinge(second)
    return mean(first) + scale(tsum(second), 1.0 / anchors.shape[0])


def aofs_adversarial_triplet(f_id_x, f_id_synth, negatives, m=DEFAULT_MARGIN,
                             hinge_second=False, sum_negatives=False):
    """Single-anchor form: anchor ``f_id_x``, fixed positive ``f_id_synth``."""
    negatives = as_tensor(negatives)
    if negatives.data.size == 0:
        raise EmptyNegatives("negative set is empty")
    a, p = as_tensor(f_id_x), as_tensor(f_id_synth)
    if a.ndim != 1 or negatives.ndim != 2:
        raise ShapeMismatch("expected a d-vector anchor and an M x d negative set")
    a2, p2 = reshape(a, (1, -1)), reshape(p, (1, -1))
    mask = np.ones((1, negatives.shape[0]), dtype=bool)
    return aofs_adversarial_triplet_batch(a2, p2, negatives, mask, m, hinge_second,
                                          sum_negatives)


def _scores(x):
    x = as_tensor(x)
    if not np.all((x.data >= 0.0) & (x.data <= 1.0)):
        raise DomainError("discriminator scores must lie in (0, 1)")
    return clamp(x, SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def image_adversarial_loss(d_real, d_fake, g_objective="nonsaturating"):
    """Minimax value and generator objective from sigmoid scores.

    Returns ``(d_objective, g_objective)``: the discriminator maximizes
    ``mean log d_real + mean log(1 - d_fake)``; the generator minimizes
    ``mean log(1 - d_fake)`` (saturating) or ``-mean log d_fake``.
    """
    real, fake = _scores(d_real), _scores(d_fake)
    one_minus_fake = 1.0 - fake
    d_obj = mean(log(real)) + mean(log(one_minus_fake))
    if g_objective == "saturating":
        g_obj = mean(log(one_minus_fake))
    elif g_objective == "nonsaturating":
        g_obj = neg(mean(log(fake)))
    else:
        raise ValueError(f"unknown generator objective {g_objective!r}")
    return d_obj, g_obj


def feature_adversarial_loss(pool_score_real, pool_score_fake, g_objective="nonsaturating"):
    """Same form as the image-level loss, on scores from the selected pool member."""
    return image_adversarial_loss(pool_score_real, pool_score_fake, g_objective)


def overall_loss(l_adv_image, l_adv_feature, l_at, weights=LossWeights()):
    for term in (l_adv_image, l_adv_feature, l_at):
        value = term.data if isinstance(term, Tensor) else term
        if not np.all(np.isfinite(value)):
            raise NonFiniteInput("overall loss received a non-finite term")
    return (as_tensor(l_adv_image)
            + scale(l_adv_feature, weights.lambda_adv_feature)
            + scale(l_at, weights.lambda_at))


def cross_configuration(radius=3.0, dim=2):
    """Anchor at the origin with four negatives on the coordinate axes at ``radius``."""
    a = np.zeros(dim)
    negatives = np.zeros((4, dim))
    negatives[0, 0], negatives[1, 0] = radius, -radius
    negatives[2, 1], negatives[3, 1] = radius, -radius
    return a, negatives


def descend_positive(a, p0, negatives, loss="adversarial_triplet", lr=0.05, steps=2000,
                     m=DEFAULT_MARGIN):
    """Plain gradient descent on ``p`` alone under the loss summed over ``negatives``."""
    fn = {"adversarial_triplet": adversarial_triplet_loss, "triplet": triplet_loss}[loss]
    a = np.asarray(a, dtype=np.float64)
    p = Tensor(np.array(p0, dtype=np.float64), requires_grad=True)
    for _ in range(steps):
        with Tape():
            total = sum((fn(a, p, n, m) for n in np.asarray(negatives)), Tensor(0.0))
            grads = backward(total)
        g = grads.get(p)
        if g is None:
            break
        p.data = p.data - lr * g
    return p.data
