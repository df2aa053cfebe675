"""Exception types raised across reidkit."""


class ReIDKitError(Exception):
    pass


class InvalidGroupingError(ReIDKitError, ValueError):
    pass


class UnsupportedPresetError(ReIDKitError, ValueError):
    pass


class NoTargetError(ReIDKitError, ValueError):
    pass


class InvalidConfigError(ReIDKitError, ValueError):
    pass


class InvalidLabelError(ReIDKitError, ValueError):
    pass


class ShapeError(ReIDKitError, ValueError):
    pass


class NoNegativesError(ReIDKitError, ValueError):
    """A mining batch holds a single identity, so no negative exists."""


class EmptyEvaluationError(ReIDKitError, ValueError):
    """Every query was filtered out before scoring."""


class FingerprintError(ReIDKitError, ValueError):
    """Checkpoint and run config describe different architectures."""


class NonFiniteLossError(ReIDKitError, FloatingPointError):
    def __init__(self, message, batch_indices=None):
        super().__init__(message)
        self.batch_indices = batch_indices


class QueryLookupError(ReIDKitError, KeyError):
    pass
