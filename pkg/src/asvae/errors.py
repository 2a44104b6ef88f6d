"""Exception types shared across the package.

Every failure mode raised deliberately by this package derives from
:class:`AsvaeError`, so callers can catch one type at the boundary. The
subtypes distinguish the four kinds of misuse that matter operationally:
bad shapes, bad numeric domains, violated API contracts, and bad state
transitions (such as reusing a spent autodiff tape).
"""

from __future__ import annotations


class AsvaeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AsvaeError):
    """Operands have incompatible or unsupported shapes."""


class DomainError(AsvaeError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(AsvaeError):
    """An API precondition was violated by the caller."""


class StateError(AsvaeError):
    """An object was used in a state that does not permit the operation."""


class NumericsError(AsvaeError):
    """A non-finite value appeared where finite numbers are required."""


class TrainingError(AsvaeError):
    """A training run failed to meet a stated floor or budget."""


class ConfigError(AsvaeError):
    """A configuration file or flag set is malformed or inconsistent."""


class FormatError(AsvaeError):
    """Base class for binary file format violations."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(FormatError):
    """The file's format version is not supported."""


class TruncationError(FormatError):
    """The file ended before a complete record could be read."""


class ChecksumError(FormatError):
    """The file's trailing checksum does not match its contents."""
