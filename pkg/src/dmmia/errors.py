"""Exception hierarchy shared by every module.

``DmmiaError`` subclasses are user-facing (bad input, bad config, missing
artifacts) and map to exit code 1 in the CLI; anything else is a bug.
"""


class DmmiaError(Exception):
    """Base class for expected, user-facing failures."""


class ShapeError(DmmiaError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(DmmiaError, ArithmeticError):
    """Non-finite values or a numerical-domain violation."""


class ContractError(DmmiaError, ValueError):
    """A precondition of an operation was violated."""


class ParseError(DmmiaError, ValueError):
    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} [{', '.join(where)}]" if where else message)


class CheckpointError(DmmiaError):
    pass


class ConfigError(DmmiaError):
    pass


class MissingInputError(DmmiaError, FileNotFoundError):
    pass


class TrainingError(DmmiaError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
