"""Exception types shared across the package.

UnivocError marks every failure this package raises on purpose, so the CLI
can catch one type; each concrete class still derives from ValueError or
RuntimeError for callers that only know the builtins.
"""


class UnivocError(Exception):
    """Base for all deliberate failures raised by this package."""


class InputError(UnivocError, ValueError):
    """Input data violates a documented domain (range, emptiness, dtype)."""


class ShapeError(UnivocError, ValueError):
    """An array argument has the wrong shape for the requested operation."""


class ConfigError(UnivocError, ValueError):
    """A configuration object is invalid or inconsistent with its peers."""


class BalanceError(ConfigError):
    """A listening-test layout cannot be balanced with the given counts."""


class ManifestError(UnivocError, ValueError):
    """A corpus manifest is malformed or references missing audio."""


class CheckpointError(UnivocError, ValueError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class DegenerateTestError(UnivocError, ValueError):
    """A statistical test has no valid answer (e.g. zero-variance pairs)."""


class TrainingDiverged(UnivocError, RuntimeError):
    """The training loss became non-finite; carries the offending batch."""

    def __init__(self, step: int, utterance_ids: list[str]):
        self.step = step
        self.utterance_ids = list(utterance_ids)
        super().__init__(
            f"non-finite loss at step {step}; batch utterances: "
            + ", ".join(self.utterance_ids)
        )
