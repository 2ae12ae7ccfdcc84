class FormatError(ValueError):
    """An input file does not follow its documented format."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and artifacts written so far."""

    def __init__(self, stage: str, cause: BaseException, artifacts=()):
        self.stage = stage
        self.cause = cause
        self.artifacts = [str(a) for a in artifacts]
        msg = f"stage '{stage}' failed: {cause}"
        if self.artifacts:
            msg += f" (artifacts so far: {', '.join(self.artifacts)})"
        super().__init__(msg)
