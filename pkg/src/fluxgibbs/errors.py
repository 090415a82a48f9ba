"""Exception types shared by the compiled and pure-Python kernels."""


class NotPositiveDefiniteError(ArithmeticError):
    """A matrix expected to be symmetric positive definite is not."""


class SliceSamplingError(RuntimeError):
    """Slice-sampler interval construction or shrinkage failed."""


class ConfigMismatchError(ValueError):
    """Artifacts produced under different configurations were mixed."""
