"""Simulator and analysis toolkit for two-timescale hybrid federated learning:
local SGD on devices, D2D consensus inside clusters, and sampled global
aggregation."""
from .analysis import (
    AnalysisConstants,
    ResourceModel,
    cost_to_accuracy,
    estimate_constants,
    lemma1_bound,
    prop1_bound,
    resource_accounting,
    theorem1_check,
    theorem2_envelope,
    time_to_accuracy,
)
from .data import (
    FederatedDataset,
    LabeledPool,
    Shard,
    load_idx,
    partition_label_skew,
    split_pool,
    synth_classification,
    synth_quadratic,
)
from .engine import Hyperparameters, TraceRecord, run_fedavg_baseline, run_tthf
from .model import LossModel
from .topology import (
    ClusterTopology,
    build_network,
    generate_random_geometric_cluster,
    metropolis_weights,
    spectral_radius,
    tune_radius_for_spectral_target,
)

__version__ = "0.1.0"
