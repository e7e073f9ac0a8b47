"""Exception hierarchy.

Everything raised on purpose by this package derives from DomainParError, so
callers can catch one type at the boundary. Subclasses also derive from the
closest builtin (ValueError, RuntimeError, LookupError) to stay friendly to
generic handlers.
"""


class DomainParError(Exception):
    """Base class for all errors raised by domainpar."""


class DimensionError(DomainParError, ValueError):
    """Operand shapes or axes are incompatible for the requested op."""


class ShapeError(DomainParError, ValueError):
    """A result shape would be invalid (e.g. conv output extent < 1)."""


class UnsupportedConfigError(DomainParError, ValueError):
    """The configuration is outside the supported envelope (even kernel,
    sharded contraction dim, >2 mesh axes, ...)."""


class MetadataError(DomainParError, ValueError):
    """Sharding metadata is inconsistent with itself or with an argument."""


class IntegrityError(MetadataError):
    """Metadata disagrees with the data it describes (local tensor shape,
    replica divergence)."""


class MeshError(DomainParError, RuntimeError):
    """One or more ranks failed; carries per-rank failures."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})


class CollectiveError(DomainParError, RuntimeError):
    """A collective could not complete (mismatched shapes, timeout, peer
    exit)."""


class HaloError(CollectiveError):
    """A halo request exceeded what the neighbor holds."""


class UnsupportedOperationError(DomainParError, LookupError):
    """No handler and no dense fallback are registered for an op name."""


class DegenerateInputError(DomainParError, ValueError):
    """Input is degenerate for the op (zero-extent reduction axis, ...)."""


class FitError(DomainParError, ValueError):
    """Scaling-law fit is underdetermined or degenerate."""
