"""Bridge from pretrained encoder checkpoints to marginrepair tensor bundles."""

from .bundling import FORMAT_VERSION, write_bundle
from .extract import (
    PARITY_TOLERANCE,
    ExtractionResult,
    ExtractionSpec,
    LayerResolutionError,
    extract,
)

__version__ = "0.1.0"
