"""Exception hierarchy shared by the library, the CLI and the MCP server."""

from typing import Optional


class RemixSepError(Exception):
    """Base class for every error raised by remixsep."""


class SignalError(RemixSepError, ValueError):
    """Invalid waveform, spectrogram or STFT parameters."""


class SceneError(RemixSepError, ValueError):
    """Invalid array geometry, scene description or source set."""


class SeparatorError(RemixSepError, ValueError):
    """Dimension mismatch or invalid input in the mask/SCM/MVDR path."""


class ObjectiveError(RemixSepError, ValueError):
    """Invalid inputs to a loss function."""


class GraphError(RemixSepError):
    """Malformed autodiff graph (cycle, non-scalar loss)."""


class CheckpointError(RemixSepError):
    """Unreadable, incompatible or corrupt checkpoint."""


class ConfigError(RemixSepError, ValueError):
    """Malformed run configuration."""


class DataError(RemixSepError):
    """Missing or inconsistent dataset files."""


class DivergenceError(RemixSepError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
