"""
Contextrast
Contextual contrastive learning with fused class anchors and boundary-aware
negative sampling for semantic segmentation
"""
from .exceptions import (ArgumentError, ConfigurationError, ContextrastError, FormatError, NumericError,
                         StateError, UndefinedMetricError)

__version__ = '1.0.0'

__all__ = [
    'ArgumentError', 'ConfigurationError', 'ContextrastError', 'FormatError', 'NumericError',
    'StateError', 'UndefinedMetricError', '__version__',
]
