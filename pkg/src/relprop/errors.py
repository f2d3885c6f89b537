"""Exception hierarchy shared by all relprop modules.

Every error carries a short machine-readable ``category`` used by the CLI
to emit ``error:<category>: message`` lines and pick the exit code.
"""


class RelpropError(Exception):
    """Base class for all engine errors."""

    category = "validation"


class DimensionError(RelpropError):
    """Tensor or layer shapes do not compose."""

    category = "dimension"


class GeometryError(RelpropError):
    """Convolution/pooling geometry has no exact output extent."""

    category = "geometry"


class InvalidValueError(RelpropError):
    """A numeric value violates an invariant (non-finite, sigma <= 0, pixel range)."""

    category = "value"


class ParseError(RelpropError):
    """A model or image file could not be parsed."""

    category = "parse"


class SchemaError(RelpropError):
    """A model file parses as JSON but misses required structure."""

    category = "schema"


class PolicyError(RelpropError):
    """A propagation policy rejects the layer (e.g. positive bias under require_nonpositive)."""

    category = "policy"


class PreconditionError(RelpropError):
    """A propagation rule was called outside its domain."""

    category = "precondition"


class UnsupportedFusionError(RelpropError):
    """The requested closed-form fusion is not exact; lowering is the alternative."""

    category = "unsupported-fusion"
