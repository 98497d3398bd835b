"""Speaker-verification back-end toolkit.

Embedding transforms, PLDA and pairwise-SVM scoring, score normalization,
calibration/fusion and detection metrics.
"""
from .core import (DataError, EmbeddingSet, OperatingPoint, PRIMARY_OPERATING_POINTS, ScoreSet,
                   TrialKey, TrialList)
from .formats import FileFormatError

__version__ = "0.1.0"

__all__ = ["DataError", "EmbeddingSet", "FileFormatError", "OperatingPoint",
           "PRIMARY_OPERATING_POINTS", "ScoreSet", "TrialKey", "TrialList", "__version__"]
