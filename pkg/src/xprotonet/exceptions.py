class XProtoNetError(Exception):
    """Base class for package errors."""


class ConfigError(XProtoNetError, ValueError):
    """Invalid configuration value or shape contract violation."""


class PruningError(XProtoNetError):
    """Pruning would leave a class without any active prototype."""


class ProjectionError(XProtoNetError):
    """Projection could not be carried out (empty pool, missing boxes)."""


class CheckpointError(XProtoNetError):
    """Corrupt or incompatible checkpoint."""


class DataError(XProtoNetError, ValueError):
    """Malformed dataset input."""
