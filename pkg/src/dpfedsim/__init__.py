"""Deterministic simulator of client-level differentially private
federated learning: DP-FedAvg, DP-FedSAM and sparsified variants, with a
Renyi-DP accountant and update-norm / sharpness diagnostics."""

from .nn import Batch, MlpArchitecture, evaluate, init_params, loss_and_grad
from .optim import OptimizerState, sam_perturbation, sam_step, sgd_step
from .privacy import (
    ClipResult,
    PrivacyLedger,
    PrivacySpec,
    add_dp_noise,
    aggregation_sensitivity,
    clip_update,
    epsilon_after,
    ledger_compose,
    ledger_epsilon,
    rdp_sampled_gaussian,
)
from .data import (
    Dataset,
    Partition,
    generate_synthetic,
    load_dataset,
    partition_dirichlet,
    partition_iid,
    save_dataset,
)
from .federation import (
    FederationConfig,
    LocalUpdateReport,
    RoundRecord,
    aggregate,
    local_round,
    run_experiment,
    sample_clients,
    sparsify,
)
from .metrics import (
    NormHistogram,
    SharpnessProbe,
    empirical_sensitivity,
    landscape_slice,
    sharpness_probe,
    update_norm_histogram,
)

__version__ = "0.1.0"
