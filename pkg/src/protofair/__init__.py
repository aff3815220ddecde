"""Prototype-based matrix factorization with popularity-bias interventions.

Implicit-feedback recommendation models (classic MF and a prototype-based
variant) together with two embedding-space interventions: keeping only the
k nearest prototypes per entity, and a penalty that spreads prototypes
apart by pushing their normalized Gram matrix toward the identity. Ships
with leave-one-out evaluation, fairness metrics, embedding diagnostics,
and a seeded, reproducible CLI.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    DataError,
    Interaction,
    Split,
    load_interactions,
    load_item_groups,
    long_tail_items,
    make_split,
    popularity_deciles,
)
from .model import (
    ALL_PROTOTYPES,
    FilterSpec,
    ModelParams,
    SimilarityVector,
    affinity,
    batch_scores,
    cosine_embed,
    init_params,
    load_checkpoint,
    save_checkpoint,
    topk_filter,
)
from .train import (
    Adam,
    LossBreakdown,
    NumericalError,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    gradients,
    regularizer_gradient,
    regularizer_penalty,
    sampled_softmax_loss,
    sweep,
    train,
)
from .evaluation import (
    EvalReport,
    RankRecord,
    evaluate,
    group_mean_ranks,
    hit_ratio,
    long_tail_metrics,
    ndcg,
    rank_all,
)
from .diagnostics import (
    DistanceProfile,
    GramStats,
    distance_profile,
    export_embeddings,
    gram_stats,
)
