class ConfigError(ValueError):
    pass


class FingerprintError(ValueError):
    """A checkpoint was written for a different network architecture."""


class NumericError(ArithmeticError):
    pass
