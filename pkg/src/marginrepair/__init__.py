"""Margin-constrained QP repair of linear-head classifiers.

Given a frozen feature extractor's embeddings, the engine corrects
misclassified samples by solving an iterative convex quadratic program over
a low-rank update of one dense layer, and emits per-sample certificates:
margin guarantees and Lipschitz robustness radii.
"""

from .bundle import (
    FORMAT_VERSION,
    BundleFormatError,
    SampleTable,
    TensorBundle,
    load,
    load_report,
    save,
    write_report,
)
from .cert import (
    CertificateReport,
    ProximityReport,
    RemainCertEntry,
    RepairCertEntry,
    StressReport,
    certify,
    gap_lipschitz_bound,
    lipschitz_bound,
    proximity_bands,
    robustness_radius,
    stress_test,
    uniform_ball,
)
from .errors import (
    GenerationError,
    InfeasibleRepairError,
    InternalInvariantError,
    NumericFailureError,
    UnconvergedTraceError,
)
from .gsn import (
    GsnFtConfig,
    GsnFtTrace,
    gap_sensitivity_norm,
    gsn_ft,
    mean_sensitivity,
    sensitivity_coefficients,
)
from .linalg import SvdResult, spectral_norm, truncated_svd
from .model import (
    ACTIVATIONS,
    HeadModel,
    Sample,
    activate,
    activation_derivative,
    competitor,
    forward,
    gap,
    logits,
    logits_batch,
    predict,
)
from .qp import (
    QpProblem,
    QpSolution,
    RepairHyper,
    assemble,
    kkt_residuals,
    remain_coefficients,
    repair_coefficients,
    solve,
)
from .repair import RepairOutcome, RepairTrace, repair
from .synth import SynthConfig, SynthProblem, generate

__version__ = "0.1.0"
