"""Exception taxonomy. The CLI maps these onto distinct exit codes."""


class FedAnomError(Exception):
    """Base class for all package errors."""


class ConfigError(FedAnomError):
    """Invalid configuration (bad dimensions, contradictory flags, ...)."""


class DataError(FedAnomError):
    """Dataset problems: missing files, malformed CSV, insufficient rows."""


class TransportError(FedAnomError):
    """Messaging failures: unreachable broker, timeouts, protocol breaks."""


class WireFormatError(TransportError):
    """Malformed bytes on the wire."""


class BadMagicError(WireFormatError):
    pass


class VersionMismatchError(WireFormatError):
    pass


class TruncatedPayloadError(WireFormatError):
    pass


class FingerprintMismatchError(WireFormatError):
    """Serialized model does not match the expected architecture."""


class TrainingDivergedError(FedAnomError):
    """Non-finite loss or parameters encountered during training."""
