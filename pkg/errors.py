# CPRec errors
# Every failure the CLI can report maps to one stable exit code.


class CPRecError(Exception):
    """Base class for all recoverable pipeline failures."""

    exit_code = 1


# ----------------------------------------------------
# Ingestion
# ----------------------------------------------------
class MalformedRecord(CPRecError):
    exit_code = 2

    def __init__(self, line_no: int, line: str, reason: str = "expected two tab-separated tokens"):
        self.line_no = line_no
        self.line = line
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class MissingProducer(CPRecError):
    exit_code = 2

    def __init__(self, item_token: str):
        self.item_token = item_token
        super().__init__(f"item {item_token!r} has no producer attribution")


class EmptyAfterFilter(CPRecError):
    exit_code = 3

    def __init__(self, min_actions: int):
        self.min_actions = min_actions
        super().__init__(f"nothing survives a {min_actions}-action filter")


# ----------------------------------------------------
# Training
# ----------------------------------------------------
class NonFiniteLoss(CPRecError):
    exit_code = 4

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")


class DimensionMismatch(CPRecError):
    exit_code = 5


class SamplerStarved(CPRecError):
    exit_code = 6

    def __init__(self, user: int, attempts: int):
        self.user = user
        self.attempts = attempts
        super().__init__(f"no valid negative for user {user} after {attempts} rejections")


# ----------------------------------------------------
# Evaluation / configuration
# ----------------------------------------------------
class EmptyCandidateSet(CPRecError):
    exit_code = 7

    def __init__(self, user: int):
        self.user = user
        super().__init__(f"user {user} has no unobserved items to rank against")


class ConfigError(CPRecError):
    exit_code = 8


class NotReproducible(CPRecError):
    exit_code = 9
