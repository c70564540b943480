"""Toy network zoo: MLPs, the conditional generator, the feature extractor
with spherical decomposition, and the conditional discriminator pool."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, InvalidLabel, NearZeroEmbedding, ShapeMismatch
from .tensor import (Tensor, as_tensor, concat, div, euclidean_norm, leaky_relu, matmul,
                     one_hot_embed, relu, reshape, sigmoid, tanh)

LEAKY_SLOPE = 0.2
INIT_SCHEMES = ("uniform-fan-in", "normal")
NORMAL_STD = 0.02

_ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": relu,
    "leaky_relu": lambda x: leaky_relu(x, LEAKY_SLOPE),
    "tanh": tanh,
    "sigmoid": sigmoid,
}


class Mlp:
    """Fully connected network; ``activations[i]`` follows layer ``i``."""

    def __init__(self, layer_dims, activations=None):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeMismatch(f"invalid layer dims {layer_dims}")
        n = len(self.layer_dims) - 1
        if activations is None:
            activations = ["leaky_relu"] * (n - 1) + ["linear"]
        if len(activations) != n:
            raise ShapeMismatch("need one activation per layer")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.activations = list(activations)
        self.params = []
        for din, dout in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.params.append(Tensor(np.zeros((din, dout)), requires_grad=True))
            self.params.append(Tensor(np.zeros(dout), requires_grad=True))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameter_count(self):
        return sum(p.data.size for p in self.params)

    def __call__(self, x):
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeMismatch(f"expected (B, {self.in_dim}) input, got {h.shape}")
        for i, act in enumerate(self.activations):
            h = _ACTIVATIONS[act](matmul(h, self.params[2 * i]) + self.params[2 * i + 1])
        return h

    def flat(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def load_flat(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.parameter_count():
            raise ShapeMismatch("parameter vector length does not match the network")
        offset = 0
        for p in self.params:
            p.data[...] = values[offset:offset + p.data.size].reshape(p.shape)
            offset += p.data.size

    def copy(self):
        other = Mlp(self.layer_dims, self.activations)
        other.load_flat(self.flat())
        return other

    def freeze(self):
        for p in self.params:
            p.requires_grad = False
        return self


def init_params(mlp, seed, scheme="uniform-fan-in"):
    """Reinitialize ``mlp`` in place from ``seed`` and return its parameters.

    ``uniform-fan-in`` draws weights and biases from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); ``normal`` draws weights from N(0, 0.02^2) with zero
    biases.
    """
    rng = np.random.default_rng(seed)
    for i in range(0, len(mlp.params), 2):
        w, b = mlp.params[i], mlp.params[i + 1]
        fan_in = w.shape[0]
        if scheme == "uniform-fan-in":
            bound = 1.0 / np.sqrt(fan_in)
            w.data[...] = rng.uniform(-bound, bound, size=w.shape)
            b.data[...] = rng.uniform(-bound, bound, size=b.shape)
        elif scheme == "normal":
            w.data[...] = rng.normal(0.0, NORMAL_STD, size=w.shape)
            b.data[...] = 0.0
        else:
            raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return mlp.params


# --- spherical decomposition ---------------------------------------------------

@dataclass(frozen=True)
class DecomposedEmbedding:
    r: float
    theta: np.ndarray


def decompose(embedding):
    """Split an embedding into radius ``r`` and unit direction ``theta``."""
    e = np.asarray(embedding.data if isinstance(embedding, Tensor) else embedding,
                   dtype=np.float64)
    r = float(np.sqrt(np.sum(e * e)))
    if r <= 1e-9:
        raise NearZeroEmbedding(f"embedding norm {r:.3g} too small to decompose")
    return DecomposedEmbedding(r, e / r)


def decompose_batch(embeddings):
    """Differentiable row-wise decomposition: ``(r: B x 1, theta: B x d)``."""
    e = as_tensor(embeddings)
    r = euclidean_norm(e, axis=-1, keepdims=True)
    return r, div(e, r)


# --- labels and the pool --------------------------------------------------------

def label_index(label, k=None):
    """Index of the 1 entry of a one-hot label; raises ``InvalidLabel`` otherwise."""
    v = np.asarray(label, dtype=np.float64).reshape(-1)
    if k is not None and v.size != k:
        raise InvalidLabel(f"label has length {v.size}, expected {k}")
    ones = np.flatnonzero(v == 1.0)
    if len(ones) != 1 or np.count_nonzero(v) != 1:
        raise InvalidLabel(f"not a one-hot label: {v.tolist()}")
    return int(ones[0])


class DiscriminatorPool:
    """K identical discriminators, one per category, picked by the target label."""

    def __init__(self, k, layer_dims, activations=None):
        if k < 1:
            raise ValueError("pool needs at least one member")
        self.members = [Mlp(layer_dims, activations) for _ in range(k)]

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def select(self, label):
        return label_index(label, len(self.members))


def select(pool, label):
    return pool.select(label)


def discriminator_mlp(in_dim, hidden=(32, 32)):
    dims = [in_dim, *hidden, 1]
    return Mlp(dims, ["leaky_relu"] * len(hidden) + ["sigmoid"])


class ConditionalGenerator:
    """Maps ``concat(x, one_hot(target))`` to a sample of the same dimension."""

    def __init__(self, sample_dim, n_categories, hidden=(64, 64, 64)):
        self.sample_dim = sample_dim
        self.n_categories = n_categories
        self.net = Mlp([sample_dim + n_categories, *hidden, sample_dim])

    @property
    def params(self):
        return self.net.params

    def __call__(self, x, targets):
        """``targets`` are integer category indices, one per row of ``x``."""
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.sample_dim:
            raise ShapeMismatch(f"expected (B, {self.sample_dim}) samples, got {x.shape}")
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if len(targets) != x.shape[0]:
            raise ShapeMismatch("one target per sample required")
        return self.net(concat([x, one_hot_embed(targets, self.n_categories)], axis=1))


def generate(g, x, label):
    """Synthesize from a single sample (or batch) and a one-hot target label."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = reshape(x, (1, -1))
    k = label_index(label, g.n_categories)
    return g(x, np.full(x.shape[0], k))


def identity_generator(sample_dim, n_categories, hidden=(64, 64, 64)):
    """Generator whose output equals its input sample for every target.

    Each hidden layer carries ``[x, -x]``; since ``leaky(x) - leaky(-x) =
    (1 + slope) x`` the next layer recovers ``x`` exactly. Needs every
    hidden width to be at least ``2 * sample_dim``.
    """
    g = ConditionalGenerator(sample_dim, n_categories, hidden)
    d = sample_dim
    if min(hidden) < 2 * d:
        raise ShapeMismatch("hidden layers must be at least twice the sample dimension")
    eye = np.eye(d)
    split = np.hstack([eye, -eye])
    for p in g.params:
        p.data[...] = 0.0
    g.params[0].data[:d, :2 * d] = split
    merge = np.vstack([eye, -eye]) / (1.0 + LEAKY_SLOPE)
    for i in range(1, len(hidden)):
        g.params[2 * i].data[:2 * d, :2 * d] = merge @ split
    g.params[-2].data[:2 * d, :] = merge
    return g


class FeatureExtractor:
    """Embedding network whose output decomposes into (r, theta)."""

    def __init__(self, sample_dim, embedding_dim=2, hidden=(32, 32)):
        if embedding_dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        self.net = Mlp([sample_dim, *hidden, embedding_dim])

    @property
    def params(self):
        return self.net.params

    def __call__(self, x):
        return self.net(x)

    def features(self, x):
        return decompose_batch(self.net(x))


# --- checkpoints -------------------------------------------------------------------

MAGIC = b"MLAB"
VERSION = 1


def save_mlp(path, mlp):
    """Header ``MLAB | u32 version | u32 n | n x u32 dims`` then float64 LE params."""
    dims = mlp.layer_dims
    header = MAGIC + struct.pack(f"<II{len(dims)}I", VERSION, len(dims), *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mlp.flat().astype("<f8").tobytes())


def read_checkpoint(path):
    """Return ``(layer_dims, params)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a modelab checkpoint")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + 4 * n:
        raise CheckpointFormatError(f"{path}: truncated header")
    dims = list(struct.unpack_from(f"<{n}I", blob, 12))
    body = blob[12 + 4 * n:]
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(body) != 8 * expected:
        raise CheckpointFormatError(f"{path}: expected {expected} parameters")
    return dims, np.frombuffer(body, dtype="<f8").astype(np.float64)


def load_mlp(path, activations=None):
    dims, values = read_checkpoint(path)
    mlp = Mlp(dims, activations)
    mlp.load_flat(values)
    return mlp
