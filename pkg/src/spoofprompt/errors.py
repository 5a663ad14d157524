"""Exception hierarchy shared by every module.

Each error carries a short machine-parseable ``code`` so the CLI can emit
``error: <CODE>: <message>`` on a single stderr line and exit nonzero.
"""


class SpoofPromptError(Exception):
    """Base class for all package errors."""

    code = "INTERNAL"


class DimensionError(SpoofPromptError):
    """Operand shapes do not line up."""

    code = "DIMENSION"


class ParameterError(SpoofPromptError):
    """A numeric hyperparameter is out of its legal range."""

    code = "PARAMETER"


class ConfigError(SpoofPromptError):
    """An architecture or run configuration is inconsistent."""

    code = "CONFIG"


class DegenerateInputError(SpoofPromptError):
    """Input is degenerate for the requested operation (e.g. zero vector)."""

    code = "DEGENERATE_INPUT"


class InputError(SpoofPromptError):
    """Caller-supplied data is malformed."""

    code = "INPUT"


class NonFiniteError(SpoofPromptError):
    """An operation produced NaN or Inf; names the offending operation."""

    code = "NONFINITE"

    def __init__(self, op_name: str, detail: str = ""):
        self.op_name = op_name
        msg = f"non-finite values produced by operation '{op_name}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AutodiffError(SpoofPromptError):
    """Misuse of the reverse-mode tape (e.g. backward on a non-scalar)."""

    code = "AUTODIFF"


class CheckpointError(SpoofPromptError):
    """Checkpoint archive is missing, corrupt, or mismatched."""

    code = "CHECKPOINT"


class LoaderError(SpoofPromptError):
    """Dataset manifest or image file failed to load; names the row."""

    code = "LOADER"


class SplitError(SpoofPromptError):
    """Dataset split cannot satisfy its stratification contract."""

    code = "SPLIT"


class TrainAbortError(SpoofPromptError):
    """Training aborted; message names the first non-finite intermediate."""

    code = "TRAIN_ABORT"


class OverwriteError(SpoofPromptError):
    """Refusing to clobber an existing run directory without --force."""

    code = "OVERWRITE"
