"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FlatsomaticError(Exception):
    exit_code = 1


class ParseError(FlatsomaticError, ValueError):
    """Malformed input file: bad token, missing column or unreadable path."""

    exit_code = 2

    def __init__(self, message, line=None, token=None, path=None):
        self.message = message
        self.line = line
        self.token = token
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)

    def at(self, path):
        """Copy of this error naming ``path``."""
        return type(self)(self.message, line=self.line, token=self.token, path=path)


class FormatError(ParseError):
    """Header lacks a required column."""


class EmptyVocabularyError(FlatsomaticError, ValueError):
    exit_code = 3

    def __init__(self, min_freq):
        self.min_freq = min_freq
        super().__init__(f"vocabulary empty after filtering (min_freq={min_freq})")


class ConfigError(FlatsomaticError, ValueError):
    exit_code = 4

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class ShapeError(FlatsomaticError, ValueError):
    exit_code = 5
