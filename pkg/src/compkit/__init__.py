import lazy_import

from . import arg, composite, errors, imgcore, io, log, pyramid  # noqa: F401
from .__about__ import __version__  # noqa: F401

# torch-backed modules
neuralcore = lazy_import.lazy_module("compkit.neuralcore")
mlf = lazy_import.lazy_module("compkit.mlf")
augment = lazy_import.lazy_module("compkit.augment")
evalbench = lazy_import.lazy_module("compkit.evalbench")
pipeline = lazy_import.lazy_module("compkit.pipeline")

# tricks the IDE to recognize the lazy imports, so that it can provide code completion
# won't be executed
if 1.0 == 1.01:
    from . import augment, evalbench, mlf, neuralcore, pipeline


__all__ = [
    "arg",
    "errors",
    "io",
    "log",
    "imgcore",
    "pyramid",
    "composite",
    "neuralcore",
    "mlf",
    "augment",
    "evalbench",
    "pipeline",
]
