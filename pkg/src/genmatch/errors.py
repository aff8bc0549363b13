"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes (config 2, data format 3,
divergence 4); everything else is a plain crash.
"""


class GenMatchError(Exception):
    """Base class for all engine errors."""


class ConfigError(GenMatchError):
    """Invalid or inconsistent configuration, including empty response sets."""

    exit_code = 2


class DataFormatError(GenMatchError):
    """Malformed embedding file or record.

    Carries enough context to locate the damage: a byte offset and, when
    known, the record index.
    """

    exit_code = 3

    def __init__(self, message, offset=None, record_index=None):
        parts = [message]
        if offset is not None:
            parts.append(f"byte offset {offset}")
        if record_index is not None:
            parts.append(f"record {record_index}")
        super().__init__(": ".join(parts))
        self.offset = offset
        self.record_index = record_index


class DivergenceError(GenMatchError):
    """Training or inference hit NaN/Inf; names the offending quantity."""

    exit_code = 4


class ContractError(GenMatchError):
    """A caller violated an op precondition (wrong shape, bad domain)."""


class DimensionError(ContractError):
    """Tensor shapes do not line up for the requested op."""


class UnsupportedOpError(ContractError):
    """Op not defined for this model variant."""
