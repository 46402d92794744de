"""Exception hierarchy shared by the library and the CLI."""


class OpenSetLTError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    category = "error"


class DimensionError(OpenSetLTError, ValueError):
    exit_code = 2
    category = "dimension error"


class ConfigError(OpenSetLTError, ValueError):
    """Raised with every offending key when a config fails validation."""

    exit_code = 2
    category = "config error"

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DatasetError(OpenSetLTError):
    exit_code = 3
    category = "dataset error"


class MismatchError(OpenSetLTError, ValueError):
    """Checkpoint, manifest and dataset disagree (class counts, sample counts)."""

    exit_code = 4
    category = "mismatch error"


class NonFiniteLossError(OpenSetLTError, FloatingPointError):
    exit_code = 5
    category = "numerical error"

    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is not finite ({value})")
