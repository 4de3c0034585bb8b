"""
Blockprobe - Exception hierarchy

Every error raised on purpose by Blockprobe derives from BlockprobeError so
the CLI can map it to an exit code.
"""

from typing import Optional, Sequence


class BlockprobeError(Exception):
    """Base class for all Blockprobe errors"""


class ConfigError(BlockprobeError):
    """Run configuration is invalid or incomplete (exit code 1)"""


class ReflectorUnreachableError(ConfigError):
    """SNI reflector did not complete a handshake from the control side"""


class ScenarioError(ConfigError):
    """Scenario file violates the schema"""

    def __init__(self, message: str, path: Optional[Sequence] = None):
        self.path = ".".join(str(p) for p in (path or [])) or "$"
        super().__init__(f"{self.path}: {message}")


class SignatureError(ConfigError):
    """Censor signature file is malformed or holds an invalid regex"""


class InsufficientControlsError(BlockprobeError):
    """Too few control observations for a 3-sigma comparison"""


class EmptySampleError(BlockprobeError):
    """MRF requested over a channel with no answer observations"""


class SimulatorStartupError(BlockprobeError):
    """Simulator endpoint could not bind its port"""
