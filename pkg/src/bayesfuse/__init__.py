"""bayesfuse: variational Bayesian classification heads over precomputed
multimodal embeddings, with Monte Carlo uncertainty estimates and
uncertainty-gated late fusion."""

from .data import (
    ModalityInfo,
    MultimodalDataset,
    SplitSpec,
    SynthModality,
    SynthSpec,
    generate_synthetic,
    import_csv,
    load_dataset,
    save_dataset,
    split,
)
from .fusion import (
    AvUCounts,
    FusionPolicy,
    avu,
    avu_counts,
    fit_fusion_policy,
    fuse,
    optimal_threshold,
)
from .heads import (
    DeterministicHead,
    VariationalDenseLayer,
    VariationalHead,
    forward_deterministic,
    forward_flipout,
    forward_mean,
    forward_sampled,
    init_deterministic_head,
    init_variational_head,
    kl_to_prior,
    load_checkpoint,
    save_checkpoint,
)
from .linalg import RngStream, matmul, sample_gaussian, sample_rademacher, softmax_rows
from .metrics import (
    Curve,
    DensityHistogram,
    density_histogram,
    micro_pr_curve,
    micro_roc_curve,
    ood_separation,
    topk_accuracy,
)
from .training import (
    TrainConfig,
    TrainHistory,
    cross_entropy_loss,
    elbo_loss,
    grad_cross_entropy,
    grad_elbo,
    plateau_scheduler_step,
    sgd_momentum_step,
    train,
)
from .uncertainty import (
    PredictiveDistribution,
    bald,
    mc_dropout_predict,
    mc_predict,
    predictive_entropy,
)

__version__ = "0.1.0"
