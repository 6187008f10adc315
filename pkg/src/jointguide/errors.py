"""Exception hierarchy.

Every error carries a ``category`` used by the CLI for its one-line summary.
"""


class JointGuideError(Exception):
    category = "error"


class ConfigurationError(JointGuideError, ValueError):
    category = "config"


class GraphError(JointGuideError, ValueError):
    category = "graph"


class StateError(JointGuideError, RuntimeError):
    category = "state"


class DegenerateInputError(JointGuideError, ValueError):
    category = "degenerate-input"


class FixtureError(JointGuideError, KeyError):
    category = "fixture"

    def __str__(self):
        return str(self.args[0]) if self.args else "fixture error"


class TransportError(JointGuideError, RuntimeError):
    category = "transport"

    def __init__(self, message, attempts):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class CacheError(JointGuideError, ValueError):
    category = "cache"

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(JointGuideError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


class TrainingError(JointGuideError, RuntimeError):
    category = "training"
