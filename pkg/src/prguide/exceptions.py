"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operands do not share the same C x W x H shape."""


class InvalidScalesError(ValueError):
    """Guidance scales make a requested quantity undefined."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class UnknownConditionError(ParameterError):
    """A condition selects no mixture component (or an unregistered id)."""


class ConfigurationError(ValueError):
    """Sampler or experiment configuration is inconsistent."""


class NumericalDivergenceError(FloatingPointError):
    """A latent became non-finite during sampling."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"non-finite latent produced at timestep t={t}")


class FormatError(ValueError):
    """A binary or CSV payload does not match its documented format."""
