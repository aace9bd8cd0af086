"""Exception types shared across the engine components."""


class RailsaleError(Exception):
    """Base class for engine errors."""


class ConfigError(RailsaleError):
    pass


class LayoutError(ConfigError):
    pass


class ClockRegressionError(RailsaleError):
    pass


class CacheTypeError(RailsaleError):
    pass


class CommitRejected(RailsaleError):
    """A record-store commit referenced an unknown table or key; nothing was applied."""


class PoisonMessage(RailsaleError):
    pass


class ContainerNotInitialized(RailsaleError):
    pass


class SeatsExhausted(RailsaleError):
    """Tokens were granted but no seat can serve the segment."""


class DuplicateSubmission(RailsaleError):
    pass


class StaleForm(RailsaleError):
    pass


class InvalidTransition(RailsaleError):
    pass


class OrderNotFound(RailsaleError):
    pass


class PermissionDenied(RailsaleError):
    pass


class RoutingError(RailsaleError):
    pass


class ContractViolation(RailsaleError):
    pass


class BlockError(RailsaleError):
    """Wrong block or key length handed to the cipher."""


class PaddingError(RailsaleError):
    pass
