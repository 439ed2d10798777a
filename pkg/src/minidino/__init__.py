"""Self-distillation pretraining for low-parameter vision backbones.

Subpackages cover the full pipeline: data loading and multi-crop
augmentation, numpy backbones with reverse-mode autodiff, schedules and the
SGD step, the momentum-teacher self-distillation loop, offline teacher to
student distillation, and KNN / linear-probe evaluation.
"""

__version__ = "0.1.0"
