class InputDomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingError(RuntimeError):
    """Numerical failure during optimization (non-finite loss or gradient)."""
