"""Synthetic labelled datasets with analytic oracles, P x K batching, IDX and CSV io."""
import gzip
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import BadMagic, CountMismatch, InsufficientData, InvalidSpec, TruncatedFile


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    category: int
    identity: int


@dataclass
class Dataset:
    """Column-oriented collection of labelled samples."""

    features: np.ndarray
    category: np.ndarray
    identity: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.category = np.asarray(self.category, dtype=np.int64)
        self.identity = np.asarray(self.identity, dtype=np.int64)
        n = len(self.features)
        if len(self.category) != n or len(self.identity) != n:
            raise InvalidSpec("features and labels differ in length")

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return LabeledSample(self.features[i], int(self.category[i]), int(self.identity[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.features[index], self.category[index], self.identity[index])


# --- radial-identity testbed -----------------------------------------------------

@dataclass(frozen=True)
class RadialIdentitySpec:
    K: int = 4
    I: int = 8
    band_radii: tuple = (1.0, 2.0, 3.0, 4.0)
    radial_noise: float = 0.1
    angular_noise: float = 0.05
    n_per_cell: int = 50
    dim: int = 2

    def validate(self):
        radii = np.asarray(self.band_radii, dtype=np.float64)
        if self.K < 1 or self.I < 1 or self.n_per_cell < 1 or self.dim < 2:
            raise InvalidSpec("K, I, n_per_cell must be positive and dim >= 2")
        if len(radii) != self.K:
            raise InvalidSpec(f"need {self.K} band radii, got {len(radii)}")
        if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
            raise InvalidSpec("band radii must be positive and strictly increasing")
        if self.radial_noise < 0 or self.angular_noise < 0:
            raise InvalidSpec("noise levels must be non-negative")
        if np.any(np.diff(radii) <= 6.0 * self.radial_noise):
            raise InvalidSpec("adjacent bands must be more than 6 radial sigmas apart")

    def directions(self):
        """Unit direction of every identity (equally spaced on the circle for dim 2)."""
        if self.dim == 2:
            angles = 2.0 * np.pi * np.arange(self.I) / self.I
            return np.stack([np.cos(angles), np.sin(angles)], axis=1)
        # fixed stream so directions do not depend on the sampling seed
        u = np.random.default_rng(0x5EED).normal(size=(self.I, self.dim))
        return u / np.linalg.norm(u, axis=1, keepdims=True)


def gen_radial_identity(spec=RadialIdentitySpec(), seed=0):
    """Samples ``rho * u_identity + eps`` with ``rho ~ N(radius_category, sigma_r)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    dirs = spec.directions()
    feats, cats, ids = [], [], []
    for i in range(spec.I):
        for c in range(spec.K):
            n = spec.n_per_cell
            rho = rng.normal(spec.band_radii[c], spec.radial_noise, size=(n, 1))
            eps = rng.normal(0.0, spec.angular_noise, size=(n, spec.dim))
            feats.append(rho * dirs[i] + eps)
            cats.append(np.full(n, c))
            ids.append(np.full(n, i))
    return Dataset(np.concatenate(feats), np.concatenate(cats), np.concatenate(ids))


class RadialOracle:
    """Analytic judges for radial-identity data: band by norm, identity by direction."""

    def __init__(self, spec=RadialIdentitySpec()):
        self.spec = spec
        self.radii = np.asarray(spec.band_radii, dtype=np.float64)
        self.dirs = spec.directions()
        self.n_classes = spec.K

    def classify(self, x):
        """Nearest band center by Euclidean norm; ties go to the lower band."""
        norms = np.linalg.norm(np.atleast_2d(x), axis=1)
        return _kernels.nearest_center(norms, self.radii)

    def identify(self, x):
        """Identity whose direction has the largest inner product with ``x``."""
        return np.argmax(np.atleast_2d(x) @ self.dirs.T, axis=1)

    def posterior(self, x):
        """Band posterior from the radial Gaussian likelihood with equal priors."""
        norms = np.linalg.norm(np.atleast_2d(x), axis=1)
        sigma = max(self.spec.radial_noise, 1e-3)
        logits = -0.5 * ((norms[:, None] - self.radii[None, :]) / sigma) ** 2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


# --- Gaussian mixture testbed --------------------------------------------------------

def square_corners(side=4.0):
    h = side / 2.0
    return ((-h, -h), (h, -h), (h, h), (-h, h))


@dataclass(frozen=True)
class GaussianMixtureSpec:
    K: int = 4
    means: tuple = field(default_factory=square_corners)
    sigma: float = 0.2
    n_per_mode: int = 400


def gen_gaussian_mixture(K=4, means=None, sigma=0.2, n_per_mode=400, seed=0):
    """``n_per_mode`` isotropic Gaussian draws around each mean; identity is 0."""
    means = np.asarray(square_corners() if means is None else means, dtype=np.float64)
    if means.ndim != 2 or len(means) != K:
        raise InvalidSpec(f"need {K} means")
    if not sigma > 0:
        raise InvalidSpec("sigma must be positive")
    if n_per_mode < 1:
        raise InvalidSpec("n_per_mode must be positive")
    if len(np.unique(means, axis=0)) != K:
        raise InvalidSpec("means must be distinct")
    rng = np.random.default_rng(seed)
    feats = [mu + sigma * rng.normal(size=(n_per_mode, means.shape[1])) for mu in means]
    cats = np.repeat(np.arange(K), n_per_mode)
    return Dataset(np.concatenate(feats), cats, np.zeros(K * n_per_mode, dtype=np.int64))


def gen_from_spec(spec, seed):
    if isinstance(spec, RadialIdentitySpec):
        return gen_radial_identity(spec, seed)
    return gen_gaussian_mixture(spec.K, spec.means, spec.sigma, spec.n_per_mode, seed)


class MixtureOracle:
    """Exact Bayes posterior of an equal-weight isotropic Gaussian mixture."""

    def __init__(self, means, sigma):
        self.means = np.asarray(means, dtype=np.float64)
        self.sigma = float(sigma)
        self.n_classes = len(self.means)

    def classify(self, x):
        return _kernels.nearest_mean(np.atleast_2d(x), self.means)

    def posterior(self, x):
        x = np.atleast_2d(x)
        d2 = np.sum((x[:, None, :] - self.means[None, :, :]) ** 2, axis=-1)
        logits = -0.5 * d2 / self.sigma ** 2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def oracle_for(spec):
    if isinstance(spec, RadialIdentitySpec):
        return RadialOracle(spec)
    return MixtureOracle(spec.means, spec.sigma)


# --- splitting and batching ------------------------------------------------------------

def train_test_split(dataset, seed, test_fraction=0.2, identity_disjoint=False):
    """Stratified split by (identity, category), or by whole identities."""
    rng = np.random.default_rng(seed)
    test = np.zeros(len(dataset), dtype=bool)
    if identity_disjoint:
        ids = np.unique(dataset.identity)
        n_test = max(1, int(round(test_fraction * len(ids))))
        held = rng.permutation(ids)[:n_test]
        test = np.isin(dataset.identity, held)
    else:
        cells = dataset.identity * (dataset.category.max() + 1) + dataset.category
        for cell in np.unique(cells):
            idx = np.flatnonzero(cells == cell)
            n_test = int(round(test_fraction * len(idx)))
            test[rng.permutation(idx)[:n_test]] = True
    return dataset.subset(np.flatnonzero(~test)), dataset.subset(np.flatnonzero(test))


@dataclass(frozen=True)
class BatchSpec:
    T: int = 4
    S: int = 8

    def __post_init__(self):
        if self.T < 2 or self.S < 2:
            raise InvalidSpec("batches need T >= 2 classes and S >= 2 samples per class")

    @property
    def B(self):
        return self.T * self.S


def pk_batches(labels, batch_spec, seed, n_batches=None):
    """Yield index arrays of ``T`` distinct classes with ``S`` samples each.

    ``labels`` is an integer array (or a :class:`Dataset`, batched by
    identity). Sampling within a batch is without replacement. The default
    number of batches is one epoch: ``max(len // B, ceil(classes / T))``, so
    every eligible class appears at least once.
    """
    if isinstance(labels, Dataset):
        labels = labels.identity
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= batch_spec.S].tolist()
    if len(eligible) < batch_spec.T:
        raise InsufficientData(
            f"need {batch_spec.T} classes with >= {batch_spec.S} samples, have {len(eligible)}")
    members = {c: np.flatnonzero(labels == c) for c in eligible}
    if n_batches is None:
        n_batches = max(len(labels) // batch_spec.B, -(-len(eligible) // batch_spec.T))
    queue = []
    for _ in range(n_batches):
        chosen = []
        while len(chosen) < batch_spec.T:
            pick = next((q for q in queue if q not in chosen), None)
            if pick is None:
                queue.extend(rng.permutation(eligible).tolist())
                continue
            queue.remove(pick)
            chosen.append(pick)
        yield np.concatenate([rng.choice(members[c], batch_spec.S, replace=False)
                              for c in chosen])


# --- file formats -------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _open_bytes(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img = _open_bytes(images_path)
    lab = _open_bytes(labels_path)
    if len(img) < 16:
        raise TruncatedFile(f"{images_path}: header too short")
    if len(lab) < 8:
        raise TruncatedFile(f"{labels_path}: header too short")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES:
        raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES:#010x}")
    magic, n_lab = struct.unpack(">II", lab[:8])
    if magic != IDX_LABELS:
        raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABELS:#010x}")
    if len(img) - 16 < n_img * rows * cols:
        raise TruncatedFile(f"{images_path}: expected {n_img * rows * cols} pixel bytes")
    if len(lab) - 8 < n_lab:
        raise TruncatedFile(f"{labels_path}: expected {n_lab} label bytes")
    if n_img != n_lab:
        raise CountMismatch(f"{n_img} images but {n_lab} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    images = pixels.reshape(n_img, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    return images, labels


def dataset_to_csv(dataset):
    buf = io.StringIO()
    header = [f"x{j}" for j in range(dataset.dim)] + ["category", "identity"]
    buf.write(",".join(header) + "\n")
    for x, c, i in zip(dataset.features, dataset.category, dataset.identity):
        buf.write(",".join(repr(float(v)) for v in x) + f",{c},{i}\n")
    return buf.getvalue()


def write_dataset_csv(path, dataset):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(dataset))


def read_dataset_csv(path):
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(table[:, :-2], table[:, -2].astype(np.int64), table[:, -1].astype(np.int64))
