"""1-D CNN classification of UHF partial-discharge signals.

Modules: :mod:`~uhfpd.dataset` (records and the binary file format),
:mod:`~uhfpd.synth` (synthetic signal generator), :mod:`~uhfpd.preprocess`
(normalization schemes and FFT features), :mod:`~uhfpd.nn` (network and
optimizer), :mod:`~uhfpd.trainer` (protocol and metrics),
:mod:`~uhfpd.experiments` and :mod:`~uhfpd.cli`.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .dataset import Dataset, Measurement, OutputClass, SourceClass, load, save
from .exceptions import ConfigError, DataError, LeakageDetected, PDError
from .preprocess import FFTMagnitude, FeaturePipeline, MinMaxNormalizer, NormScheme
from .trainer import CNNClassifier, ConfusionMatrix, TrainConfig

__all__ = [
    "CNNClassifier", "ConfigError", "ConfusionMatrix", "DataError", "Dataset",
    "FFTMagnitude", "FeaturePipeline", "LeakageDetected", "Measurement", "MinMaxNormalizer",
    "NormScheme", "OutputClass", "PDError", "SourceClass", "TrainConfig", "load", "save",
    "__version__",
]
