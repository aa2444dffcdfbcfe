"""Exception types shared across the package."""


class MapStateError(RuntimeError):
    """Operation requires the opposite finalization state of the map."""


class MapFormatError(ValueError):
    """A serialized map, cloud, or feature image is malformed."""


class MapIOError(OSError):
    """A serialized file is truncated or otherwise unreadable."""


class MapCorruptionError(RuntimeError):
    """Map internals reference entries that do not exist."""


class GenerationError(RuntimeError):
    """Scene or trajectory synthesis could not satisfy its constraints."""
