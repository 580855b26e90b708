"""Exception types; the CLI maps each family to an exit code."""


class CycleXRError(Exception):
    exit_code = 1


class ConfigError(CycleXRError, ValueError):
    exit_code = 2


class DataError(CycleXRError, ValueError):
    exit_code = 3


class PreconditionError(CycleXRError, RuntimeError):
    exit_code = 4


class ShapeError(CycleXRError, ValueError):
    """Tensor, checkpoint or vocabulary shapes do not line up."""

    exit_code = 4
