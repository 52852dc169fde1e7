"""feldsim: deterministic federated edge learning simulator.

Edge nodes train local models, perturb their clipped update deltas with a
calibrated Gaussian mechanism, and upload asynchronously to an aggregator
that detects poisoned sub-models and mixes updates under a staleness
controlled rule. Everything runs on a simulated clock and is bitwise
reproducible from a single master seed.
"""

from .analysis import (
    MetricsRow,
    QuadraticProblem,
    QuadraticRun,
    QuadraticRunConfig,
    VarianceEstimate,
    check_convergence,
    emit_metrics,
    estimate_variance_constants,
    read_metrics_csv,
    run_quadratic_experiment,
    theorem_bound,
)
from .asyncsim import (
    DataAssignment,
    DistSpec,
    EventQueue,
    NodeProfile,
    SimConfig,
    SimResult,
    TimingConfig,
    UpdateMsg,
    aggregate_aldp,
    aggregate_async,
    comm_efficiency,
    pick_malicious,
    prepare_assignment,
    run_simulation,
    select_topk,
)
from .attacks import (
    AttackConfig,
    LeakageConfig,
    ReconstructionResult,
    attack_success_rate,
    flip_labels,
    invert_gradient,
)
from .data import DataSpec, gen_synthetic, load_cache, load_idx, partition, save_cache
from .detection import (
    DetectionConfig,
    DetectionReport,
    aggregate_normal,
    detect,
    evaluate_submodels,
    run_detection,
    threshold_topk,
)
from .learner import (
    Dataset,
    Example,
    ModelSpec,
    PerBatchNoise,
    TrainConfig,
    evaluate,
    gradient,
    init_model,
    local_train,
    loss,
    param_count,
)
from .params import Layout, ParamVector
from .privacy import AccountantState, PrivacyParams, account, clip, perturb, sigma_for
from .streams import stream

__version__ = "0.1.0"
