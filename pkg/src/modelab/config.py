"""Experiment configuration and its flat ``section.key = value`` text format.

    # comments start with '#'
    seed = 3
    data.kind = mixture
    gan.use_cdp = false
    model.generator_hidden = 64, 64, 64
"""
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .data import BatchSpec, GaussianMixtureSpec, RadialIdentitySpec, square_corners
from .errors import ConfigError, ConfigParseError


@dataclass
class DataConfig:
    kind: str = "radial"
    K: int = 4
    I: int = 8
    band_radii: tuple = (1.0, 2.0, 3.0, 4.0)
    radial_noise: float = 0.1
    angular_noise: float = 0.05
    n_per_cell: int = 50
    dim: int = 2
    mixture_side: float = 4.0
    mixture_sigma: float = 0.2
    n_per_mode: int = 400
    test_fraction: float = 0.2
    identity_disjoint: bool = False

    def spec(self):
        if self.kind == "radial":
            return RadialIdentitySpec(self.K, self.I, tuple(self.band_radii), self.radial_noise,
                                      self.angular_noise, self.n_per_cell, self.dim)
        if self.kind == "mixture":
            if self.K != 4 or self.dim != 2:
                raise ConfigError("the mixture testbed is the 2-D four-corner square")
            return GaussianMixtureSpec(self.K, square_corners(self.mixture_side),
                                       self.mixture_sigma, self.n_per_mode)
        raise ConfigError(f"unknown data.kind {self.kind!r}")


@dataclass
class ModelConfig:
    embedding_dim: int = 2
    generator_hidden: tuple = (64, 64, 64)
    discriminator_hidden: tuple = (32, 32)
    extractor_hidden: tuple = (32, 32)
    init: str = "uniform-fan-in"


@dataclass
class OptimConfig:
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ExtractorConfig:
    epochs: int = 50
    lr: float = 0.002
    lr_schedule: str = "constant"
    decay_after: int = 25
    T: int = 4
    S: int = 8
    margin: float = 0.3
    at_loss: str = "adversarial_triplet"
    at_hinge_second_term: bool = True
    category_weight: float = 1.0

    @property
    def batch_spec(self):
        return BatchSpec(self.T, self.S)


@dataclass
class GanConfig:
    epochs: int = 50
    lr: float = 0.001
    lr_schedule: str = "linear-decay-after"
    decay_after: int = 25
    T: int = 4
    S: int = 8
    margin: float = 0.3
    lambda_adv_feature: float = 1.0
    lambda_at: float = 0.3
    use_cdp: bool = True
    at_loss: str = "adversarial_triplet"
    g_objective: str = "nonsaturating"
    at_hinge_second_term: bool = True
    at_sum_negatives: bool = False
    extractor_checkpoint: str = ""

    @property
    def batch_spec(self):
        return BatchSpec(self.T, self.S)


@dataclass
class EvalConfig:
    targets: str = "others"
    mode_min_count: int = 10
    calibration_fraction: float = 0.5
    generator_checkpoint: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    trace_wall_time: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for name in ("extractor", "gan"):
            stage = getattr(self, name)
            if stage.epochs < 0:
                raise ConfigError(f"{name}.epochs must be non-negative")
            if not stage.lr > 0:
                raise ConfigError(f"{name}.lr must be positive")
            if stage.lr_schedule not in ("constant", "linear-decay-after"):
                raise ConfigError(f"{name}.lr_schedule must be constant or linear-decay-after")
            if stage.margin < 0:
                raise ConfigError(f"{name}.margin must be non-negative")
            if stage.at_loss not in ("triplet", "adversarial_triplet"):
                raise ConfigError(f"{name}.at_loss must be triplet or adversarial_triplet")
            if stage.T < 2 or stage.S < 2:
                raise ConfigError(f"{name}.T and {name}.S must be at least 2")
        if self.gan.g_objective not in ("saturating", "nonsaturating"):
            raise ConfigError("gan.g_objective must be saturating or nonsaturating")
        if self.model.init not in ("uniform-fan-in", "normal"):
            raise ConfigError("model.init must be uniform-fan-in or normal")
        if self.eval.targets not in ("others", "same", "all"):
            raise ConfigError("eval.targets must be others, same or all")
        self.data.spec()
        return self

    def replace(self, **dotted):
        """Copy with ``{"gan.use_cdp": False, ...}`` overrides."""
        text = config_to_text(self)
        extra = "".join(f"{k} = {_format(v)}\n" for k, v in dotted.items())
        return parse_config(text + extra)


_SECTIONS = ("data", "model", "optim", "extractor", "gan", "eval")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw, default, line):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigParseError(str(exc), line) from exc


def parse_config(text):
    cfg = ExperimentConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1:
            target, name = cfg, parts[0]
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            target, name = getattr(cfg, parts[0]), parts[1]
        else:
            raise ConfigParseError(f"unknown key {key!r}", lineno)
        if name in _SECTIONS or not hasattr(target, name) or name.startswith("_"):
            raise ConfigParseError(f"unknown key {key!r}", lineno)
        setattr(target, name, _coerce(value, getattr(target, name), lineno))
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_text(cfg):
    """Canonical text form: every key, fixed order; parses back to an equal config."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                lines.append(f"{f.name}.{sub.name} = {_format(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    """Git-style blob hash of the canonical config text."""
    body = config_to_text(cfg).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()
