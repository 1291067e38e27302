"""
Errors - Exception hierarchy shared by every lab stage
CLI maps ConfigurationError/UsageError to exit code 1, everything else to 2
"""


class LabError(Exception):
    """Base class for all lab failures"""
    exit_code = 2


class ConfigurationError(LabError):
    """Invalid configuration, template, target name or shape combination"""
    exit_code = 1


class UsageError(LabError):
    """API called outside its contract"""
    exit_code = 1


class TapeError(UsageError):
    """Backward requested on a tape that was already consumed"""


class NumericFault(LabError):
    """NaN or Inf appeared in values, gradients or a loss"""


class StageDependencyError(LabError):
    """An upstream artifact is missing"""
    exit_code = 1

    def __init__(self, stage, detail=""):
        self.stage = stage
        message = f"missing upstream artifact - run `{stage}` first"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ManifestMismatchError(LabError):
    """Run directory was produced by a different configuration"""
    exit_code = 1


class SanityCheckError(LabError):
    """A trained artifact failed its acceptance check"""


class BlindnessViolation(LabError):
    """Bias label leaked into an outbound summarizer framing"""
