class DataError(ValueError):
    """Input data is missing, malformed, or inconsistent."""


class VolumeFormatError(DataError):
    """A header/raw volume pair does not match the on-disk format."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
