"""Exception hierarchy shared by every vqkv module."""


class VQKVError(Exception):
    """Base class for all vqkv errors."""


class InvalidInputError(VQKVError, ValueError):
    """Bad shapes, dimensions, ranges or parameter values."""


class InvalidCodeError(VQKVError, IndexError):
    """A code index is outside its codebook."""


class InvalidStateError(VQKVError, RuntimeError):
    """An operation was called on a cache in the wrong state."""


class DivergedError(VQKVError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss became non-finite ({value}) in epoch {epoch}")
        self.epoch = epoch
        self.value = value


class FormatError(VQKVError, ValueError):
    """A binary file is malformed; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
