"""lrpexport: emit portable .lrp.json fixture bundles with framework logits."""

from .architectures import ARCHITECTURES, Architecture, build_torch
from .export import (
    export_architecture,
    export_architectures,
    export_synthetic,
    numpy_forward,
    synthetic_model_dicts,
    train_classifier,
    evaluate,
)

__version__ = "0.1.0"
