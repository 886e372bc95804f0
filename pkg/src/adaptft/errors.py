"""Exception types shared across the package."""


class AdaptftError(Exception):
    pass


class DimensionError(AdaptftError, ValueError):
    pass


class SizeError(AdaptftError, ValueError):
    pass


class ConfigError(AdaptftError, ValueError):
    pass


class RangeError(AdaptftError, ValueError):
    pass


class ContractError(AdaptftError, ValueError):
    pass


class FormatError(AdaptftError, ValueError):
    pass
