"""Exception types shared across stages."""


class ValidationError(ValueError):
    """Input violates a structural or semantic contract."""


class ParseError(ValidationError):
    """Malformed input file; carries the offending path and line."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class StageError(RuntimeError):
    """A pipeline stage failed or a required predecessor is missing."""

    def __init__(self, stage: str, cause: str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
