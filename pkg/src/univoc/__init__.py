"""Speaker-independent neural vocoder with listening-test tooling.

The public surface groups into four layers: waveform/feature handling
(`dsp`), the autoregressive model and its training loop (`model`,
`training`, `synthesis`), speaker-similarity anchor selection
(`simselect`), and listening-test planning, serving, and analysis
(`evalstats`, `evalservice`).
"""

from .dsp import (
    AudioBuffer,
    MelConfig,
    MelSpectrogram,
    extract_mel,
    load_mel,
    load_wav,
    mulaw_decode,
    mulaw_encode,
    save_mel,
    save_wav,
)
from .errors import (
    BalanceError,
    CheckpointError,
    ConfigError,
    DegenerateTestError,
    InputError,
    ManifestError,
    ShapeError,
    TrainingDiverged,
    UnivocError,
)
from .evalservice import RatingStore, Service, export_ratings
from .evalstats import (
    RatingRecord,
    SessionPlan,
    analyze,
    holm_bonferroni,
    load_plan,
    paired_t_test,
    plan_sessions,
    relative_mushra,
    save_plan,
)
from .model import (
    ModelConfig,
    ModelParams,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
)
from .simselect import SpeakerGmm, fit_gmm, gmm_kld, load_gmm, save_gmm, select_anchor
from .synthesis import copy_synthesis, generate
from .training import CorpusManifest, TrainConfig, load_manifest, train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "BalanceError",
    "CheckpointError",
    "ConfigError",
    "CorpusManifest",
    "DegenerateTestError",
    "InputError",
    "ManifestError",
    "MelConfig",
    "MelSpectrogram",
    "ModelConfig",
    "ModelParams",
    "RatingRecord",
    "RatingStore",
    "Service",
    "SessionPlan",
    "ShapeError",
    "SpeakerGmm",
    "TrainConfig",
    "TrainingDiverged",
    "UnivocError",
    "analyze",
    "copy_synthesis",
    "export_ratings",
    "extract_mel",
    "fit_gmm",
    "generate",
    "gmm_kld",
    "holm_bonferroni",
    "load_checkpoint",
    "load_manifest",
    "load_mel",
    "load_gmm",
    "load_plan",
    "load_wav",
    "mulaw_decode",
    "mulaw_encode",
    "nll_loss",
    "paired_t_test",
    "plan_sessions",
    "relative_mushra",
    "save_checkpoint",
    "save_gmm",
    "save_mel",
    "save_plan",
    "save_wav",
    "select_anchor",
    "train",
]
