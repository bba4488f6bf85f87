"""Exception type shared by every module of the toolkit."""


class ToolkitError(ValueError):
    """A contract violation with a short machine-readable ``code``.

    Codes are stable strings such as ``"shape"``, ``"empty"``, ``"degenerate"``
    so callers (and the CLI) can branch on them without parsing messages.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"[{code}] {message}" if message else f"[{code}]")
