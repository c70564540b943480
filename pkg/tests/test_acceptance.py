"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the same condition. The expensive
pipeline runs are shared through session fixtures: one default five-seed
ablation grid on the radial-identity data and five seeds of the mixture
with and without the pool.
"""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from modelab.cli import _LOSS, cell_config, load_extractor, main
from modelab.config import ExperimentConfig
from modelab.data import RadialIdentitySpec, RadialOracle, read_idx
from modelab.experiment import digit_run, identity_accuracy, make_splits, run_pipeline
from modelab.losses import (adversarial_triplet_loss, aofs_adversarial_triplet_batch,
                            batch_hard_adversarial_triplet, batch_hard_mining,
                            batch_hard_triplet, cross_configuration, descend_positive,
                            feature_adversarial_loss, image_adversarial_loss, overall_loss,
                            triplet_loss)
from modelab.metrics import frechet_distance, kl_mode_collapse
from modelab.tensor import Tape, Tensor, backward, finite_diff
from modelab.training import train_gan

SEEDS = range(5)
ROOT = Path(__file__).resolve().parent.parent
_ELAPSED = {}


def _read_csv_row(path):
    lines = Path(path).read_text().splitlines()
    return {k: float(v) for k, v in zip(lines[0].split(","), lines[1].split(","))}


@pytest.fixture(scope="session")
def radial_grid(tmp_path_factory):
    """Default five-seed ablation grid; returns ``(out_dir, {cell: [rows]})``."""
    out = tmp_path_factory.mktemp("radial-grid")
    start = time.perf_counter()
    assert main(["ablate", "--out", str(out), "--seeds", str(len(SEEDS))]) == 0
    cells = {}
    for cell in ("cdp-at", "nocdp-at", "cdp-triplet", "nocdp-triplet"):
        cells[cell] = [_read_csv_row(out / "cells" / cell / f"seed{s}" / "metrics.csv")
                       for s in SEEDS]
    _ELAPSED["radial"] = time.perf_counter() - start
    return out, cells


@pytest.fixture(scope="session")
def mixture_runs():
    base = ExperimentConfig().replace(**{"data.kind": "mixture"})
    start = time.perf_counter()
    runs = {cdp: [run_pipeline(base.replace(**{"seed": s, "gan.use_cdp": cdp})).report
                  for s in SEEDS]
            for cdp in (True, False)}
    _ELAPSED["mixture"] = time.perf_counter() - start
    return runs


def _median(rows, key):
    return float(np.median([r[key] for r in rows]))


# --- 1. gradient oracle -----------------------------------------------------------------------

def _fd_agrees(fn, arrays):
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        grads = backward(fn(*params))
    numeric = finite_diff(lambda: fn(*params), params, 1e-6)
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        bound = np.maximum(1e-5 * np.maximum(np.abs(analytic), np.abs(numeric[p])), 1e-7)
        if not np.all(np.abs(analytic - numeric[p]) <= bound):
            return False
    return True


def _far(*gaps):
    return all(abs(g) > 1e-4 for g in gaps)


def _d(u, v):
    return float(np.linalg.norm(np.asarray(u) - np.asarray(v)))


def test_criterion_1_gradient_oracle(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    counts, failures = {}, []

    def check(name, fn, arrays):
        counts[name] = counts.get(name, 0) + 1
        if not _fd_agrees(fn, arrays):
            failures.append(name)

    while min(counts.get(k, 0) for k in ("triplet", "at", "at-hinged")) < 20:
        a, p, n = rng.normal(size=(3, 3))
        if not _far(0.3 + _d(a, p) - _d(a, n), _d(n, p) - _d(a, n)):
            continue
        check("triplet", lambda a, p, n: triplet_loss(a, p, n, 0.3), [a, p, n])
        check("at", lambda a, p, n: adversarial_triplet_loss(a, p, n, 0.3), [a, p, n])
        check("at-hinged", lambda a, p, n: adversarial_triplet_loss(a, p, n, 0.3, True), [a, p, n])

    labels = np.repeat(np.arange(3), 3)
    while counts.get("batch-hard", 0) < 20:
        x = rng.normal(size=(9, 2))
        dm = np.linalg.norm(x[:, None] - x[None], axis=-1)
        same = labels[:, None] == labels[None]
        stable = all(np.diff(np.sort(dm[i][~same[i]]))[0] > 1e-4 and
                     np.diff(np.sort(dm[i][same[i] & (np.arange(9) != i)]))[-1] > 1e-4
                     for i in range(9))
        if not stable:
            continue
        pos, neg = batch_hard_mining(x, labels)
        if not _far(*[0.3 + dm[i, pos[i]] - dm[i, neg[i]] for i in range(9)]):
            continue
        check("batch-hard", lambda e: batch_hard_adversarial_triplet(e, labels, 0.3), [x])
        check("batch-hard-triplet", lambda e: batch_hard_triplet(e, labels, 0.3), [x])

    mask = np.ones((3, 5), dtype=bool)
    while counts.get("aofs", 0) < 20:
        anc, pos_ = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        cands = rng.normal(size=(5, 2)) * 2
        dm = np.linalg.norm(anc[:, None] - cands[None], axis=-1)
        if np.any(np.diff(np.sort(dm, axis=1)[:, :2], axis=1) < 1e-4):
            continue
        hard = cands[dm.argmin(axis=1)]
        gaps = [0.3 + _d(anc[i], pos_[i]) - dm[i].min() for i in range(3)]
        gaps += [_d(hard[i], pos_[i]) - dm[i].min() for i in range(3)]
        if not _far(*gaps):
            continue
        check("aofs", lambda a, p, c: aofs_adversarial_triplet_batch(a, p, c, mask, 0.3),
              [anc, pos_, cands])
        check("aofs-summed", lambda a, p, c: aofs_adversarial_triplet_batch(
            a, p, c, mask, 0.3, sum_negatives=True), [anc, pos_, cands])

    for _ in range(20):
        real, fake = rng.uniform(0.05, 0.95, size=(2, 4))
        for mode in ("saturating", "nonsaturating"):
            check(f"image-{mode}", lambda r, f: image_adversarial_loss(r, f, mode)[0]
                  + image_adversarial_loss(r, f, mode)[1], [real, fake])
            check(f"feature-{mode}", lambda r, f: feature_adversarial_loss(r, f, mode)[1],
                  [real, fake])
        t = rng.normal(size=3)
        check("overall", lambda a, b, c: overall_loss(a, b, c),
              [t[0].reshape(()), t[1].reshape(()), t[2].reshape(())])

    elapsed = time.perf_counter() - start
    ok = not failures and min(counts.values()) >= 20 and elapsed < 10.0
    verdict(1, ok, f"{len(counts)} loss forms, >= {min(counts.values())} points each, "
                   f"{len(failures)} mismatches, {elapsed:.1f} s (< 10 s)")
    assert ok, failures


# --- 2. loss fixtures ----------------------------------------------------------------------------

def test_criterion_2_loss_fixtures(verdict):
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(ROOT / "tests" / "test_losses.py")],
                          capture_output=True, text=True, cwd=ROOT)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    ok = proc.returncode == 0
    verdict(2, ok, f"loss module fixtures: {summary}")
    assert ok, proc.stdout[-3000:]


# --- 3. zero-sum geometry ------------------------------------------------------------------------

def test_criterion_3_zero_sum_geometry(verdict):
    start = time.perf_counter()
    a, negatives = cross_configuration(3.0)
    p0 = np.array([0.7, 0.4])
    p_at = descend_positive(a, p0, negatives, "adversarial_triplet", lr=0.05, steps=2000)
    p_tri = descend_positive(a, p0, negatives, "triplet", lr=0.05, steps=2000)
    at_gap = float(np.linalg.norm(p_at - a))
    tri_change = abs(float(np.linalg.norm(p_tri - a) - np.linalg.norm(p0 - a)))
    elapsed = time.perf_counter() - start
    ok = at_gap < 1e-3 and tri_change < 1e-9 and elapsed < 5.0
    verdict(3, ok, f"summed AT |p-a| = {at_gap:.2e} (< 1e-3); triplet change = "
                   f"{tri_change:.1e} (< 1e-9); {elapsed:.1f} s (< 5 s)")
    assert ok


# --- 4. mode collapse ordering -------------------------------------------------------------------

def test_criterion_4_mode_collapse_ordering(verdict, radial_grid, mixture_runs):
    _, cells = radial_grid
    radial = (_median(cells["cdp-at"], "kl_mode_collapse"),
              _median(cells["nocdp-at"], "kl_mode_collapse"))
    mixture = tuple(float(np.median([r.kl_mode_collapse for r in mixture_runs[cdp]]))
                    for cdp in (True, False))
    # the radial grid also trains the triplet cells, so this overstates the cost
    minutes = (_ELAPSED["radial"] + _ELAPSED["mixture"]) / 60.0
    ok = all(c < w and c < 0.5 * w for c, w in (radial, mixture)) and minutes < 15.0
    verdict(4, ok, f"median KL radial CDP {radial[0]:.4f} vs w/o {radial[1]:.4f}; "
                   f"mixture CDP {mixture[0]:.4f} vs w/o {mixture[1]:.4f} (CDP < 0.5 w/o); "
                   f"{minutes:.1f} min (< 15 min)")
    assert ok


# --- 5. selection isolation ----------------------------------------------------------------------

def test_criterion_5_selection_isolation(verdict, radial_grid):
    out, _ = radial_grid
    cfg = cell_config(ExperimentConfig(), 0, "cdp", "at")
    extractor = load_extractor(cfg, out / "extractors" / "at-seed0" / "extractor.mlab")
    _, train, _ = make_splits(cfg)
    state = {"steps": 0, "violations": 0, "targets": set()}

    def callback(phase, step, target, pool):
        flats = [m.flat().tobytes() for m in pool.members]
        if phase == "before":
            state["before"] = flats
            return
        state["steps"] += 1
        state["targets"].add(target)
        for j, (old, new) in enumerate(zip(state["before"], flats)):
            if j != target and old != new:
                state["violations"] += 1

    train_gan(cfg, train, extractor, step_callback=callback)
    ok = state["violations"] == 0 and state["steps"] > 0 and len(state["targets"]) == cfg.data.K
    verdict(5, ok, f"{state['steps']} steps of a default run, {state['violations']} "
                   f"non-selected members changed")
    assert ok


# --- 6. intra-class variance ordering ------------------------------------------------------------

def test_criterion_6_intra_class_variance(verdict, radial_grid):
    out, cells = radial_grid
    icv_at = _median(cells["cdp-at"], "intra_class_variance")
    icv_tri = _median(cells["cdp-triplet"], "intra_class_variance")
    acc = {}
    for loss in ("at", "triplet"):
        vals = []
        for s in SEEDS:
            cfg = cell_config(ExperimentConfig(), s, "cdp", loss)
            _, train, test = make_splits(cfg)
            ex = load_extractor(cfg, out / "extractors" / f"{loss}-seed{s}" / "extractor.mlab")
            vals.append(identity_accuracy(ex, train, test))
        acc[loss] = float(np.median(vals))
    ok = icv_at < icv_tri and acc["at"] >= acc["triplet"]
    verdict(6, ok, f"median ICV AT {icv_at:.6f} < Triplet {icv_tri:.6f}; identity accuracy "
                   f"AT {acc['at']:.4f} >= Triplet {acc['triplet']:.4f}")
    assert ok


# --- 7. synthesis accuracy floor -----------------------------------------------------------------

def test_criterion_7_synthesis_accuracy(verdict, radial_grid):
    _, cells = radial_grid
    keys = [f"category_accuracy_{c}" for c in range(4)]
    cdp = [_median(cells["cdp-at"], k) for k in keys]
    base = [_median(cells["nocdp-at"], k) for k in keys]
    lower = sum(b < c for b, c in zip(base, cdp))
    ok = min(cdp) >= 0.90 and lower >= 3
    verdict(7, ok, "median per-category accuracy CDP "
            + "/".join(f"{v:.3f}" for v in cdp) + " (>= 0.90); w/o CDP "
            + "/".join(f"{v:.3f}" for v in base) + f", lower on {lower} of 4 (>= 3)")
    assert ok


# --- 8. identity permanence ordering -------------------------------------------------------------

def test_criterion_8_identity_permanence(verdict, radial_grid):
    _, cells = radial_grid
    at = _median(cells["cdp-at"], "verification_accuracy")
    tri = _median(cells["cdp-triplet"], "verification_accuracy")
    ok = at >= tri and at >= 0.95
    verdict(8, ok, f"median verification AT {at:.4f} >= Triplet {tri:.4f}; AT >= 0.95")
    assert ok


def test_ablation_verdicts_all_pass(radial_grid):
    out, _ = radial_grid
    rows = (out / "verdicts.csv").read_text().splitlines()[1:]
    assert len(rows) == 4
    assert all(r.split(",")[-2] == "pass" and r.endswith(",ok") for r in rows), rows


# --- 9. metric analytic cases --------------------------------------------------------------------

def test_criterion_9_metric_cases(verdict, radial_grid, mixture_runs):
    oracle = RadialOracle(RadialIdentitySpec())
    targets = np.repeat(np.arange(4), 25)
    kl = kl_mode_collapse(np.tile([[3.0, 0.0]], (100, 1)), targets, oracle)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(500, 2))
    fd_same = frechet_distance(x, x.copy())
    fd_shift = frechet_distance(rng.normal(0.0, 1.0, size=(10_000, 1)),
                                rng.normal(1.0, 1.0, size=(10_000, 1)))
    _, cells = radial_grid
    scores = [r["classifier_score"] for rows in cells.values() for r in rows]
    scores += [r.classifier_score for runs in mixture_runs.values() for r in runs]
    in_range = all(1.0 - 1e-12 <= s <= 4.0 + 1e-12 for s in scores)
    ok = (abs(kl - math.log(4)) <= 1e-9 and abs(fd_same) <= 1e-9
          and abs(fd_shift - 1.0) <= 0.05 and in_range)
    verdict(9, ok, f"KL {kl:.12f} vs ln 4; FD identical {fd_same:.1e}; FD shift {fd_shift:.4f}; "
                   f"classifier score in [1, 4] on {len(scores)} runs: {in_range}")
    assert ok


# --- 10. reproducibility -------------------------------------------------------------------------

def _csvs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*.csv"))}


def test_criterion_10_reproducibility(verdict, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    Path("fast.cfg").write_text("extractor.epochs = 3\ngan.epochs = 2\n")
    first = [
        (["gen-data", "--config", "fast.cfg", "--out", "data"], "data", "gen-data"),
        (["train", "--stage", "extractor", "--config", "fast.cfg", "--out", "ex"], "ex",
         "train-extractor"),
        (["train", "--stage", "gan", "--config", "fast.cfg", "--out", "gan",
          "--extractor", "ex/extractor.mlab"], "gan", "train-gan"),
        (["eval", "--config", "fast.cfg", "--out", "ev", "--extractor", "ex/extractor.mlab",
          "--generator", "gan/generator.mlab"], "ev", "eval"),
        (["ablate", "--config", "fast.cfg", "--out", "ab", "--seeds", "1"], "ab", "ablate"),
    ]
    mismatched = []
    n_files = 0
    for argv, out, command in first:
        assert main(argv) == 0
        again = f"{out}-again"
        sub = "train" if command.startswith("train") else command
        assert main([sub, "--config", f"{out}/manifest-{command}.json", "--out", again]) == 0
        a, b = _csvs(out), _csvs(again)
        n_files += len(a)
        if a != b or not a:
            mismatched.append(command)
    ok = not mismatched
    verdict(10, ok, f"{len(first)} commands re-run from their manifests, {n_files} CSV files, "
                    f"mismatches: {mismatched or 'none'}")
    assert ok


# --- 11. optional digit corpus -------------------------------------------------------------------

def _find_idx(root, stem):
    for name in (stem, stem + ".gz"):
        if (root / name).is_file():
            return root / name
    return None


def test_criterion_11_digit_corpus(verdict):
    root = os.environ.get("MODELAB_IDX_DIR")
    if not root:
        pytest.skip("MODELAB_IDX_DIR not set; optional digit-corpus criterion skipped")
    root = Path(root)
    paths = [_find_idx(root, s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                          "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
    if None in paths:
        pytest.skip(f"IDX files not found under {root}")
    train_x, train_y = read_idx(paths[0], paths[1])
    test_x, test_y = read_idx(paths[2], paths[3])
    start = time.perf_counter()
    acc = {}
    for loss in ("at", "triplet"):
        vals = []
        for s in range(3):
            cfg = ExperimentConfig(seed=s).replace(**{
                "extractor.at_loss": _LOSS[loss], "model.embedding_dim": 16,
                "model.extractor_hidden": (128,)})
            vals.append(digit_run(cfg, train_x, train_y, test_x, test_y))
        acc[loss] = float(np.median(vals))
    elapsed = time.perf_counter() - start
    ok = acc["at"] >= acc["triplet"] and elapsed < 20 * 60
    verdict(11, ok, f"median digit accuracy AT {acc['at']:.4f} >= Triplet "
                    f"{acc['triplet']:.4f}; {elapsed / 60:.1f} min (< 20 min)")
    assert ok
