"""Engine-level exceptions."""


class ChrFailure(Exception):
    """A builtin failed or `fail` ran: the whole derivation fails."""


class ChrRuntimeError(Exception):
    """Internal fault: type error, unbound input, broken invariant."""


class DepthLimitExceeded(ChrRuntimeError):
    """Activation nesting exceeded the configured bound (likely a
    non-terminating program)."""
