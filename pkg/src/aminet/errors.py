"""Exception hierarchy shared by every module."""


class AmiNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AmiNetError, ValueError):
    pass


class ContractError(AmiNetError, ValueError):
    """A caller violated a documented precondition."""


class DegenerateBagError(AmiNetError, ValueError):
    """A bag (or softmax row) has no valid instance."""


class VocabularyError(AmiNetError, IndexError):
    pass


class ConfigError(AmiNetError, ValueError):
    pass


class DataError(AmiNetError, ValueError):
    pass


class GenerationError(DataError):
    """Synthetic generation could not satisfy its target."""
