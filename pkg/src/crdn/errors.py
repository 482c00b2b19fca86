"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigError(ValueError):
    """Invalid model, training or command-line configuration."""


class FormatError(ValueError):
    """A file on disk is truncated, corrupt or of the wrong kind."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during training."""
