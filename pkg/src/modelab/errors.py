"""Exception hierarchy shared by every modelab module.

Each class carries an ``exit_code`` so the command-line runner can map a
failure to a documented process status without a lookup table elsewhere.
"""


class ModelabError(Exception):
    exit_code = 1


# tensor core
class ShapeMismatch(ModelabError, ValueError):
    exit_code = 10


class DomainError(ModelabError, ValueError):
    exit_code = 11


class NonScalarLoss(ModelabError, ValueError):
    exit_code = 12


class NoActiveTape(ModelabError, RuntimeError):
    exit_code = 13


# losses
class DegenerateBatch(ModelabError, ValueError):
    exit_code = 20


class EmptyNegatives(ModelabError, ValueError):
    exit_code = 21


class NonFiniteInput(ModelabError, ValueError):
    exit_code = 22


# models
class NearZeroEmbedding(ModelabError, ValueError):
    exit_code = 30


class InvalidLabel(ModelabError, ValueError):
    exit_code = 31


class CheckpointFormatError(ModelabError, ValueError):
    exit_code = 32


# data
class InvalidSpec(ModelabError, ValueError):
    exit_code = 40


class InsufficientData(ModelabError, ValueError):
    exit_code = 41


class BadMagic(ModelabError, ValueError):
    exit_code = 42


class TruncatedFile(ModelabError, ValueError):
    exit_code = 43


class CountMismatch(ModelabError, ValueError):
    exit_code = 44


# training
class ConfigError(ModelabError, ValueError):
    exit_code = 50


class DivergenceDetected(ModelabError, RuntimeError):
    exit_code = 51


# metrics
class ZeroExpectedMass(ModelabError, ValueError):
    exit_code = 60


class EmptyCategory(ModelabError, ValueError):
    exit_code = 61


class EmptyInput(ModelabError, ValueError):
    exit_code = 62


class ZeroEmbedding(ModelabError, ValueError):
    exit_code = 63


class SingularCovariance(ModelabError, ValueError):
    exit_code = 64


class TooFewSamples(ModelabError, ValueError):
    exit_code = 65


# cli
class ConfigParseError(ModelabError, ValueError):
    exit_code = 70

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingCheckpoint(ModelabError, FileNotFoundError):
    exit_code = 71


class IoError(ModelabError, OSError):
    exit_code = 72
