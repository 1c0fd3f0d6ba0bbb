"""Exception and warning types shared across the package."""


class ParameterError(ValueError):
    """A constructor or operation received an out-of-range parameter."""


class NumericError(RuntimeError):
    """A numerical evaluation produced non-finite values.

    Carries the offending state (and step index, when raised inside a chain
    loop) so failures can be reproduced.
    """

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class StabilityError(RuntimeError):
    """Scheme parameters fall outside the stability region of a linear target."""


class HypothesisError(RuntimeError):
    """A verification routine was invoked with its hypotheses violated.

    The message names the violated clause.
    """


class ConfigError(ValueError):
    """A configuration file or override is malformed; names the offending key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DomainWarning(UserWarning):
    """A potential was evaluated outside its configured box in strict mode."""
