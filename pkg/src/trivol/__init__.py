"""Three-stage training for 3-class classification of 3D volumes.

Stages: (1) two-view redundancy-reduction pretraining on unlabeled volumes,
(2) frozen-teacher self-distillation on labeled task-related volumes,
(3) fine-tuning on the small target dataset with 5-fold cross-validation.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, StageHyperParams, default_config, desk_config, load_config
from .errors import TrivolError
from .pipeline import TrainingStrategy, run_strategy

__all__ = [
    "ExperimentConfig",
    "StageHyperParams",
    "TrainingStrategy",
    "TrivolError",
    "default_config",
    "desk_config",
    "load_config",
    "run_strategy",
    "__version__",
]
