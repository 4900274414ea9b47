"""Exception hierarchy shared across the package."""


class OAMixerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(OAMixerError, ValueError):
    pass


class ParameterError(OAMixerError, ValueError):
    pass


class ConfigError(OAMixerError, ValueError):
    pass


class FormatError(OAMixerError, ValueError):
    pass


class ValidationError(OAMixerError, ValueError):
    pass


class StateError(OAMixerError, RuntimeError):
    pass


class InputError(OAMixerError, ValueError):
    pass


class DeterminismError(OAMixerError, RuntimeError):
    pass


class InvariantError(OAMixerError, RuntimeError):
    pass


class SpecError(OAMixerError, ValueError):
    pass


class TrainingDivergedError(OAMixerError, RuntimeError):
    def __init__(self, step: int, norms: dict):
        self.step = step
        self.norms = norms
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if kv[1] == kv[1] else float("-inf"))[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step}; largest parameter norms: {detail}")
