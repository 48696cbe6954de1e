"""Distributed Tucker tensor PCA on simulated machines."""

from .estimators import (
    HeteroEstimates,
    TransferEstimates,
    estimate_common_rank,
    estimate_local_joint_rank,
    estimate_noise_level,
    estimate_ranks,
    hetero_distributed_pca,
    hetero_local_matrix,
    heterogeneity_measure,
    homo_distributed_pca,
    local_projected_matrix,
    optimal_weights,
    pooled_pca,
    transfer_pca,
    two_iteration_pca,
)
from .inference import (
    InferenceSummary,
    confidence_region_contains,
    estimate_lambda,
    inference_summary,
    normal_quantile,
    summarize,
)
from .runtime import CommLedger, Coordinator, MachineState, SubspaceMessage
from .simgen import (
    GroundTruth,
    ScenarioConfig,
    adversarial_init,
    gen_heterogeneous,
    gen_homogeneous,
    gen_spike,
    initialize,
    reconstruction_error,
)
from .tensor import (
    kron,
    matricize,
    mode_product,
    qr_orthonormalize,
    read_dtpt,
    rho,
    sin_theta,
    svd_top_r,
    tensorize,
    write_dtpt,
)
from .tucker import FactorEstimates, hooi, hosvd

__version__ = "0.1.0"
