"""Teacher/student domain adaptation for frame classifiers on synthetic acoustic data."""

from . import corpus, distill, evaluation, experiments, features, network, signal

__all__ = ["corpus", "distill", "evaluation", "experiments", "features", "network",
           "signal"]
__version__ = "0.1.0"
