"""Exception types raised across the package."""


class UnlearnLabError(Exception):
    pass


class ConfigurationError(UnlearnLabError, ValueError):
    pass


class InputShapeError(UnlearnLabError, ValueError):
    pass


class DimensionError(UnlearnLabError, ValueError):
    pass


class LabelError(UnlearnLabError, ValueError):
    pass


class FormatError(UnlearnLabError, ValueError):
    """A file on disk does not follow its declared layout."""


class IdError(UnlearnLabError, KeyError):
    pass


class HashMismatchError(UnlearnLabError):
    """An unlearning request does not match the stored training-set digests."""


class InsufficientPopulationError(UnlearnLabError, ValueError):
    pass


class UndefinedRateError(UnlearnLabError, ValueError):
    pass


class DataEnvironmentError(UnlearnLabError, OSError):
    """Required datasets are missing from the data directory."""


class ConvergenceWarning(UserWarning):
    pass
