"""Node-adaptive inference for linear-propagation graph neural networks.

Features are smoothed hop by hop over a normalised adjacency; each node
stops propagating once its features are close enough to the stationary
state of its connected component, and is classified by the classifier
trained for that propagation order.
"""

from .datasets import PRESETS, DatasetBundle, SbmConfig, generate_sbm, load_dataset, load_dataset_dir, write_dataset
from .distill import (
    AttentionScorer,
    ClassifierBank,
    DistillConfig,
    ensemble_teacher,
    load_bank,
    offline_distill,
    online_distill,
    save_bank,
    soft_ce,
)
from .engine import (
    Candidate,
    ExitRecord,
    InferenceOutcome,
    NapConfig,
    infer,
    exit_histogram,
    infer_batch,
    make_grid,
    pareto_front,
    sweep,
    vanilla_infer,
)
from .errors import ConfigError, InputError, NAIError, NumericError
from .graph import Graph, InductiveSplit, build_graph, connected_components, extend_graph, propagate_hop
from .metering import MacsBreakdown, MacsTrace, benchmark, comparison_table, meter_macs
from .propagation import (
    PropagatedStack,
    StationarySummary,
    layered_support,
    precompute_stack,
    smoothness_distance,
    stationary_state,
    stationary_summary,
    update_summary,
)
from .training import Classifier, TrainConfig, gradient_check, train_base

__version__ = "0.1.0"
