"""Extractor pre-training and conditional adversarial training.

Stage one fits the feature extractor (radius regresses the category index,
direction is shaped by a batch-hard triplet-style loss over identities).
Stage two trains the conditional generator against an image-level
discriminator and a feature-level discriminator pool on the frozen
extractor's radius, with the identity-preservation loss on its direction.
"""
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import pk_batches
from .errors import ConfigError, DivergenceDetected, ShapeMismatch
from .losses import (LossWeights, aofs_adversarial_triplet_batch, batch_hard_adversarial_triplet,
                     feature_adversarial_loss, image_adversarial_loss, overall_loss)
from .models import (ConditionalGenerator, DiscriminatorPool, FeatureExtractor,
                     discriminator_mlp, init_params)
from .tensor import Tape, Tensor, backward, mean, no_tape, neg, scale, square, sub

DIVERGENCE_LIMIT = 1e6

# independent random streams derived from the experiment seed
_STREAM_EXTRACTOR_INIT = 1
_STREAM_EXTRACTOR_BATCHES = 2
_STREAM_GAN_INIT = 3
_STREAM_GAN_SAMPLING = 4


def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


# --- optimizer ----------------------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    t: int = 0
    moments: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, hyper):
    """One adaptive-moment update of ``params`` in place.

    ``grads`` maps (or aligns with) ``params``; a parameter without a
    gradient is left untouched together with its moments.
    """
    if isinstance(grads, dict):
        grads = [grads.get(p) for p in params]
    if len(grads) != len(params):
        raise ShapeMismatch("one gradient per parameter required")
    state.t += 1
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        mv = state.moments.get(id(p))
        if mv is None:
            mv = state.moments[id(p)] = (np.zeros_like(p.data), np.zeros_like(p.data))
        _kernels.adam_update(p.data, np.require(g, np.float64, "C"), mv[0], mv[1], hyper.lr,
                             hyper.beta1, hyper.beta2, hyper.eps, state.t)
    return params, state


# --- learning-rate schedule -------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    lr0: float
    kind: str = "constant"
    decay_after: int = 25
    total_epochs: int = 50


def lr_at(schedule, epoch):
    """Constant through ``decay_after``, then linear down to 0 at ``total_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.kind == "constant" or epoch <= schedule.decay_after:
        return schedule.lr0
    span = schedule.total_epochs - schedule.decay_after
    if span <= 0:
        return schedule.lr0
    return schedule.lr0 * max(0.0, (schedule.total_epochs - epoch) / span)


# --- traces --------------------------------------------------------------------------------

GAN_COLUMNS = ("l_adv_image", "l_adv_feature", "l_at")
EXTRACTOR_COLUMNS = ("l_category", "l_at")


@dataclass
class TrainingTrace:
    columns: tuple
    records: list = field(default_factory=list)

    def add(self, epoch, terms, lr, seconds):
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be recorded in increasing order")
        row = {"epoch": epoch, **{c: float(terms[c]) for c in self.columns}}
        row["lr"] = float(lr)
        row["seconds"] = float(seconds)
        self.records.append(row)

    def losses(self):
        """Trace without wall time (the deterministic part)."""
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.records]

    def to_csv(self, wall_time=False):
        buf = io.StringIO()
        header = ("epoch", *self.columns, "lr", "seconds")
        buf.write(",".join(header) + "\n")
        for r in self.records:
            cells = [str(r["epoch"])] + [repr(r[c]) for c in self.columns] + [repr(r["lr"])]
            cells.append(f"{r['seconds']:.3f}" if wall_time else "0.0")
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()


def _guard(name, value):
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceDetected(f"{name} diverged: {value}")


# --- stage one: extractor ---------------------------------------------------------------------

def build_extractor(cfg, seed):
    ex = FeatureExtractor(cfg.data.dim, cfg.model.embedding_dim, cfg.model.extractor_hidden)
    init_params(ex.net, int(_rng(seed, _STREAM_EXTRACTOR_INIT).integers(2**63)), cfg.model.init)
    return ex


def category_from_radius(r, k):
    """Category whose regression target (index + 1) is nearest to ``r``."""
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    return np.clip(np.rint(r) - 1, 0, k - 1).astype(np.int64)


def train_extractor(cfg, dataset):
    """Fit the feature extractor; returns ``(frozen extractor, trace)``.

    The loss is ``mean (r - (category + 1))^2`` plus, when the data carry at
    least two identities, the batch-hard (adversarial) triplet loss on the
    unit direction grouped by identity.
    """
    cfg.validate()
    ex_cfg = cfg.extractor
    seed = cfg.seed
    extractor = build_extractor(cfg, seed)
    trace = TrainingTrace(EXTRACTOR_COLUMNS)
    schedule = LrSchedule(ex_cfg.lr, ex_cfg.lr_schedule, ex_cfg.decay_after, ex_cfg.epochs)
    use_identity = len(np.unique(dataset.identity)) >= 2
    batch_labels = dataset.identity if use_identity else dataset.category
    if len(np.unique(batch_labels)) < 2:
        raise ConfigError("extractor training needs at least two classes")
    spec = ex_cfg.batch_spec
    if len(np.unique(batch_labels)) < spec.T:
        spec = type(spec)(len(np.unique(batch_labels)), spec.S)
    state = AdamState()
    hyper = AdamHyper(ex_cfg.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    batch_rng = _rng(seed, _STREAM_EXTRACTOR_BATCHES)
    targets = dataset.category.astype(np.float64) + 1.0
    adversarial = ex_cfg.at_loss == "adversarial_triplet"
    start = time.perf_counter()
    for epoch in range(ex_cfg.epochs):
        hyper.lr = lr_at(schedule, epoch)
        cat_sum = at_sum = 0.0
        n = 0
        for idx in pk_batches(batch_labels, spec, int(batch_rng.integers(2**63))):
            with Tape():
                r, theta = extractor.features(dataset.features[idx])
                l_cat = mean(square(sub(r, targets[idx][:, None])))
                loss = scale(l_cat, ex_cfg.category_weight)
                if use_identity:
                    l_at = batch_hard_adversarial_triplet(
                        theta, dataset.identity[idx], ex_cfg.margin,
                        hinge_second=ex_cfg.at_hinge_second_term, adversarial=adversarial)
                    loss = loss + l_at
                    at_sum += l_at.item()
                grads = backward(loss)
            _guard("extractor loss", loss.item())
            optimizer_step(extractor.params, grads, state, hyper)
            cat_sum += l_cat.item()
            n += 1
        trace.add(epoch, {"l_category": cat_sum / n, "l_at": at_sum / n}, hyper.lr,
                  time.perf_counter() - start)
    extractor.net.freeze()
    return extractor, trace


# --- stage two: conditional GAN ------------------------------------------------------------------

@dataclass
class GanResult:
    generator: ConditionalGenerator
    pool: DiscriminatorPool
    image_disc: object
    trace: TrainingTrace


def build_gan(cfg, seed):
    k = cfg.data.K
    gen = ConditionalGenerator(cfg.data.dim, k, cfg.model.generator_hidden)
    image_disc = discriminator_mlp(cfg.data.dim, cfg.model.discriminator_hidden)
    hidden = cfg.model.discriminator_hidden
    pool = DiscriminatorPool(k if cfg.gan.use_cdp else 1, [1, *hidden, 1],
                             ["leaky_relu"] * len(hidden) + ["sigmoid"])
    seeds = _rng(seed, _STREAM_GAN_INIT).integers(2**63, size=2 + len(pool))
    init_params(gen.net, int(seeds[0]), cfg.model.init)
    init_params(image_disc, int(seeds[1]), cfg.model.init)
    for member, s in zip(pool.members, seeds[2:]):
        init_params(member, int(s), cfg.model.init)
    return gen, image_disc, pool


def _pair_exemplars(rng, dataset, by_category, target, source_ids):
    """One target-category exemplar per source, avoiding the source identity when possible."""
    cand = by_category[target]
    cand_ids = dataset.identity[cand]
    out = np.empty(len(source_ids), dtype=np.int64)
    for i, sid in enumerate(source_ids):
        allowed = cand[cand_ids != sid]
        out[i] = rng.choice(allowed if len(allowed) else cand)
    return out


def train_gan(cfg, dataset, extractor, step_callback=None):
    """Adversarial training of the conditional generator.

    Every step draws one target category ``l`` and a batch of sources from
    the other categories, then updates, in order: the image discriminator on
    exemplars of ``l`` against ``G(x|l)``; only pool member ``l`` (or the
    single feature discriminator when ``use_cdp`` is off) on the radius
    feature; and the generator on the weighted sum of its adversarial terms
    and the identity-preservation loss. ``step_callback(phase, step,
    target, pool)`` is called with ``phase`` ``"before"`` and ``"after"``
    around every step.
    """
    cfg.validate()
    gcfg = cfg.gan
    seed = cfg.seed
    k = cfg.data.K
    gen, image_disc, pool = build_gan(cfg, seed)
    trace = TrainingTrace(GAN_COLUMNS)
    schedule = LrSchedule(gcfg.lr, gcfg.lr_schedule, gcfg.decay_after, gcfg.epochs)
    weights = LossWeights(gcfg.lambda_adv_feature, gcfg.lambda_at)
    hyper = AdamHyper(gcfg.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    g_state, d_state = AdamState(), AdamState()
    pool_states = [AdamState() for _ in range(len(pool))]
    adversarial = gcfg.at_loss == "adversarial_triplet"
    rng = _rng(seed, _STREAM_GAN_SAMPLING)
    B = gcfg.batch_spec.B
    by_category = [np.flatnonzero(dataset.category == c) for c in range(k)]
    if min(len(ix) for ix in by_category) == 0:
        raise ConfigError("every category needs training samples")
    steps_per_epoch = max(1, len(dataset) // B)
    feats, ids = dataset.features, dataset.identity
    use_identity = len(np.unique(ids)) >= 2
    start = time.perf_counter()
    step = 0
    for epoch in range(gcfg.epochs):
        hyper.lr = lr_at(schedule, epoch)
        sums = dict.fromkeys(GAN_COLUMNS, 0.0)
        for _ in range(steps_per_epoch):
            target = int(rng.integers(k))
            sources = np.flatnonzero(dataset.category != target)
            src = rng.choice(sources, size=min(B, len(sources)), replace=False)
            ex_idx = _pair_exemplars(rng, dataset, by_category, target, ids[src])
            x, y = feats[src], feats[ex_idx]
            targets = np.full(len(src), target)
            member_index = target if gcfg.use_cdp else 0
            member = pool[member_index]
            if step_callback is not None:
                step_callback("before", step, target, pool)

            with no_tape():
                fake_now = gen(x, targets).data
                r_real = extractor.features(y)[0].data
                r_fake = extractor.features(fake_now)[0].data
                theta_x = extractor.features(x)[1].data
                theta_y = extractor.features(y)[1].data

            # image-level discriminator
            with Tape():
                d_obj, _ = image_adversarial_loss(image_disc(y), image_disc(fake_now))
                grads = backward(neg(d_obj))
            optimizer_step(image_disc.params, grads, d_state, hyper)

            # selected feature-level discriminator only
            with Tape():
                fd_obj, _ = feature_adversarial_loss(member(r_real), member(r_fake))
                grads = backward(neg(fd_obj))
            optimizer_step(member.params, grads, pool_states[member_index], hyper)

            # generator
            with Tape():
                fake = gen(x, targets)
                _, g_img = image_adversarial_loss(image_disc(y).detach(), image_disc(fake),
                                                  gcfg.g_objective)
                r_f, theta_f = extractor.features(fake)
                _, g_feat = feature_adversarial_loss(member(r_real).detach(), member(r_f),
                                                     gcfg.g_objective)
                l_at = Tensor(0.0)
                if use_identity:
                    cand = np.concatenate([theta_x, theta_y])
                    cand_ids = np.concatenate([ids[src], ids[ex_idx]])
                    mask = ids[src][:, None] != cand_ids[None, :]
                    l_at = aofs_adversarial_triplet_batch(
                        Tensor(theta_x), theta_f, Tensor(cand), mask, gcfg.margin,
                        hinge_second=gcfg.at_hinge_second_term,
                        sum_negatives=gcfg.at_sum_negatives, adversarial=adversarial)
                total = overall_loss(g_img, g_feat, l_at, weights)
                grads = backward(total)
            _guard("generator loss", total.item())
            _guard("discriminator objective", d_obj.item())
            _guard("feature discriminator objective", fd_obj.item())
            optimizer_step(gen.params, grads, g_state, hyper)

            if step_callback is not None:
                step_callback("after", step, target, pool)
            sums["l_adv_image"] += d_obj.item()
            sums["l_adv_feature"] += fd_obj.item()
            sums["l_at"] += l_at.item()
            step += 1
        trace.add(epoch, {c: v / steps_per_epoch for c, v in sums.items()}, hyper.lr,
                  time.perf_counter() - start)
    return GanResult(gen, pool, image_disc, trace)
