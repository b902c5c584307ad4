"""Exception hierarchy shared across the package."""


class PrefixDpoError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PrefixDpoError, ValueError):
    pass


class ConfigError(PrefixDpoError, ValueError):
    pass


class DataError(PrefixDpoError, ValueError):
    pass


class LayoutOverflowError(DataError):
    """A row does not fit in the fixed collation length."""


class UnpackableSampleError(DataError):
    def __init__(self, index: int, length: int, capacity: int):
        self.index = index
        self.length = length
        self.capacity = capacity
        super().__init__(
            f"sample {index} has unit length {length} > packing capacity {capacity}"
        )


class InvariantError(PrefixDpoError, RuntimeError):
    """Internal contract violated (e.g. a fully masked attention row)."""


class StaleCacheError(PrefixDpoError, RuntimeError):
    pass


class CacheMissError(PrefixDpoError, KeyError):
    pass
