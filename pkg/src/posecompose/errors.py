"""Error type shared across the package.

Every failure that callers are expected to branch on carries a stable
string code (e.g. "DEGENERATE_POSE"); messages are free-form.
"""


class DomainError(ValueError):
    """Input violates a documented precondition or contract."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
