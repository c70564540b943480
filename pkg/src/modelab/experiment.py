"""End-to-end pipeline: data, extractor, GAN, evaluation."""
from dataclasses import dataclass

import numpy as np

from . import _kernels, metrics
from .data import Dataset, gen_from_spec, oracle_for, train_test_split
from .tensor import no_tape
from .training import train_extractor, train_gan

_STREAM_SPLIT = 11
_STREAM_EVAL = 12


def make_splits(cfg):
    spec = cfg.data.spec()
    dataset = gen_from_spec(spec, cfg.seed)
    train, test = train_test_split(dataset, np.random.default_rng([cfg.seed, _STREAM_SPLIT]),
                                   cfg.data.test_fraction, cfg.data.identity_disjoint)
    return dataset, train, test


def synthesis_plan(test, k, mode="others"):
    """Source indices and target categories: ``others`` pairs each test sample
    with every other category, ``same`` with its own, ``all`` with every one."""
    src, tgt = [], []
    for i, c in enumerate(test.category):
        for t in range(k):
            if mode == "all" or (mode == "same") == (t == c):
                src.append(i)
                tgt.append(t)
    return np.array(src, dtype=np.int64), np.array(tgt, dtype=np.int64)


def synthesize(generator, x, targets):
    with no_tape():
        return generator(x, targets).data


def identity_features(extractor, x):
    with no_tape():
        return extractor.features(x)[1].data


def verification_pairs(src_ids, rng):
    """Genuine pairs (i, i) and one impostor pair (j, i) per synthesized sample."""
    n = len(src_ids)
    query = np.concatenate([np.arange(n), np.empty(n, dtype=np.int64)])
    for i in range(n):
        others = np.flatnonzero(src_ids != src_ids[i])
        query[n + i] = rng.choice(others)
    gallery = np.concatenate([np.arange(n), np.arange(n)])
    flags = np.concatenate([np.ones(n, dtype=bool), np.zeros(n, dtype=bool)])
    return query, gallery, flags


def evaluate(cfg, extractor, generator, test):
    """Compute the full metrics report for ``generator`` on the held-out split."""
    k = cfg.data.K
    oracle = oracle_for(cfg.data.spec())
    rng = np.random.default_rng([cfg.seed, _STREAM_EVAL])
    src, targets = synthesis_plan(test, k, cfg.eval.targets)
    x = test.features[src]
    synth = synthesize(generator, x, targets)
    present = sorted(set(targets.tolist()))

    theta_test = identity_features(extractor, test.features)
    labels = test.identity if len(np.unique(test.identity)) >= 2 else test.category
    icv = metrics.intra_class_variance(theta_test, labels)

    verification = float("nan")
    src_ids = test.identity[src]
    if len(np.unique(src_ids)) >= 2:
        q, g, flags = verification_pairs(src_ids, rng)
        f_src = identity_features(extractor, x)
        f_syn = identity_features(extractor, synth)
        sims = metrics.cosine_similarity(f_src[q], f_syn[g])
        calib = rng.random(len(flags)) < cfg.eval.calibration_fraction
        threshold = metrics.calibrate_threshold(sims[calib], flags[calib])
        verification = metrics.verification_accuracy(f_src[q][~calib], f_syn[g][~calib],
                                                      flags[~calib], threshold)
    return metrics.MetricsReport(
        kl_mode_collapse=metrics.kl_mode_collapse(synth, targets, oracle),
        category_accuracy=tuple(metrics.category_accuracy(synth, targets, oracle, present)),
        intra_class_variance=icv,
        verification_accuracy=verification,
        frechet_distance=metrics.frechet_distance(test.features, synth),
        classifier_score=metrics.classifier_score(synth, oracle.posterior),
        mode_coverage=metrics.mode_coverage(synth, oracle, cfg.eval.mode_min_count),
    )


@dataclass
class PipelineResult:
    extractor: object
    extractor_trace: object
    gan: object
    report: metrics.MetricsReport
    train: object
    test: object


def run_pipeline(cfg, extractor=None):
    """Train both stages (reusing ``extractor`` if given) and evaluate."""
    cfg.validate()
    _, train, test = make_splits(cfg)
    ex_trace = None
    if extractor is None:
        extractor, ex_trace = train_extractor(cfg, train)
    gan = train_gan(cfg, train, extractor)
    report = evaluate(cfg, extractor, gan.generator, test)
    return PipelineResult(extractor, ex_trace, gan, report, train, test)


def identity_accuracy(extractor, train, test):
    """Nearest-class-mean identity accuracy of the unit direction features.

    Class means come from ``train``; each test embedding is assigned to the
    closest (renormalised) mean.
    """
    f_train = identity_features(extractor, train.features)
    f_test = identity_features(extractor, test.features)
    ids = np.unique(train.identity)
    means = np.stack([f_train[train.identity == i].mean(axis=0) for i in ids])
    means /= np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    pred = ids[_kernels.nearest_mean(f_test, means)]
    return float(np.mean(pred == test.identity))


def digit_dataset(images, labels, n, seed):
    """Flatten an IDX image array into a Dataset whose identity is the digit.

    A seeded subsample of ``n`` rows keeps the run at desk scale. Every row
    gets category 0, so the radial head only learns a constant.
    """
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(labels), size=min(n, len(labels)), replace=False))
    flat = images.reshape(len(images), -1)[pick]
    return Dataset(flat, np.zeros(len(pick), dtype=np.int64), labels[pick])


def digit_run(cfg, train_images, train_labels, test_images, test_labels,
              n_train=3000, n_test=1000):
    """Train an extractor on a digit corpus and return its identity accuracy."""
    train = digit_dataset(train_images, train_labels, n_train, cfg.seed)
    test = digit_dataset(test_images, test_labels, n_test, cfg.seed + 1)
    cfg = cfg.replace(**{"data.dim": train.dim, "data.K": 1})
    extractor, _ = train_extractor(cfg, train)
    return identity_accuracy(extractor, train, test)
