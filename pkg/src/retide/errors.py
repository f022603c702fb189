"""Exception hierarchy shared across the package."""


class RetideError(Exception):
    """Base class for all errors raised by retide."""


class InvalidArgument(RetideError, ValueError):
    """An argument violates a documented precondition."""


class ProtocolViolation(RetideError):
    """Malformed wire data, bad magic, unknown message type, or a broken tile set."""


class PayloadTooLarge(ProtocolViolation):
    """Declared payload length exceeds the configured maximum."""


class IncompleteMessage(ProtocolViolation):
    """The byte stream ended before a full message was read."""


class ServerError(RetideError):
    """The server answered a job with an Error message."""

    def __init__(self, job_id, code, message):
        super().__init__(f"job {job_id}: {message} (code {int(code)})")
        self.job_id = job_id
        self.code = code
        self.message = message
