"""Error types shared across modules (engine-level errors live in tensor.py)."""


class InputError(ValueError):
    """Caller-supplied data violates an operation's input contract."""


class NoPathError(RuntimeError):
    """Goal unreachable from start in the free space."""


class WorldGenError(RuntimeError):
    """World generation failed validation after the configured retries."""
