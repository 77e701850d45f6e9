"""Exception taxonomy and process exit codes.

Every error raised on purpose by this package derives from TileCascadeError so
callers can catch one thing. The CLI maps the taxonomy onto small integer exit
codes; anything not ours is a bug and is allowed to escape with a traceback.
"""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class TileCascadeError(Exception):
    """Base class for all deliberate failures."""


class ValidationError(TileCascadeError):
    """Bad configuration, bad geometry, bad shapes, bad inputs."""


class GeometryError(ValidationError):
    """Tile/canvas arithmetic that does not come out even."""


class ShapeError(ValidationError):
    """An array did not have the shape a contract requires."""


class ConfigError(ValidationError):
    """A config file or argument set failed validation."""


class DatasetError(ValidationError):
    """A data source could not yield what was asked of it."""


class NumericError(TileCascadeError):
    """Non-finite values where finite ones are required."""


class CheckpointError(TileCascadeError):
    """A checkpoint file is malformed or truncated."""


class TileError(TileCascadeError):
    """A tile job failed; carries the tile's grid index."""

    def __init__(self, index, message):
        super().__init__(f"tile {index}: {message}")
        self.index = index


class StateError(TileCascadeError):
    """An object was driven through its lifecycle in the wrong order."""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, CheckpointError)):
        return EXIT_IO
    if isinstance(exc, TileCascadeError):
        return EXIT_VALIDATION
    return 1
