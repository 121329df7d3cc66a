"""Fairness-aware kinship verification at desk scale.

A fair contrastive loss with a learned per-pair debias term, a multi-task
pair model with cross-image attention and an adversarial (gradient-reversed)
race branch, dataset-manifest construction with race-consensus and
family-disjoint splitting, and cross-race fairness metrics.
"""

from .records import (
    IdentityRecord,
    KinEdge,
    KinType,
    PairSample,
    RaceLabel,
    RACES,
    RACE_INDEX,
    SourceRow,
)
from .manifest import (
    DistributionTable,
    ManifestError,
    MergeResult,
    SplitManifest,
    build_split_manifest,
    cap_identity_images,
    consensus_race,
    generate_pairs,
    merge_sources,
    split_by_family,
)
from .synth import ImageStore, Population, SynthConfig, make_population
from .losses import (
    BiasVector,
    LossBreakdown,
    SimMatrix,
    batch_bias,
    bias_vector_from_features,
    cosine,
    cosine_matrix,
    fair_contrastive_loss,
    fair_loss_probabilities,
    loss_grad_wrt_sims,
    p_ij,
    pair_bias,
    race_ce,
    supcon_loss,
    total_loss,
)
from .model import (
    AttentionFusion,
    Backbone,
    DebiasLayer,
    FeaturePack,
    KinshipModel,
    ModelConfig,
    RaceHead,
    build_model,
    grad_reverse,
)
from .cbam import CBAM
from .trainer import (
    TrainConfig,
    TrainData,
    TrainLogRecord,
    TrainResult,
    TrainingAborted,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .metrics import (
    AngleReport,
    FairnessReport,
    intra_inter_angles,
    per_race_accuracy,
    race_probe_accuracy,
    select_threshold,
    std_trajectory,
    export_embeddings,
)
from .pipeline import RunConfig, run_pipeline
from .seeding import derive_seed

__version__ = "0.1.0"
