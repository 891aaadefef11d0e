"""Ranking models that pick the user-uploaded photo best explaining a recommendation.

The package trains and evaluates scorers of user-photo affinity on corpora of
(user, item, photo) authorship triads with precomputed per-photo feature
vectors.  It ships the pairwise-ranking model (``brie``), the two binary
classification predecessors (``mf_elvis``, ``elvis``), the centroid and
random baselines, both negative-sampling regimes, and the offline
ranking-evaluation protocol (Recall@k, NDCG@k, AUC, median percentile).
"""

__version__ = "0.1.0"

from .corpus import (
    Corpus,
    CorpusError,
    Interaction,
    PhotoFeatureTable,
    SplitAssignment,
    SyntheticSpec,
    TRAIN,
    VAL,
    TEST,
    build_corpus,
    generate_synthetic,
    ingest_features,
    ingest_interactions,
    partition,
)
from .sampling import (
    BinarySample,
    PairSample,
    SamplingError,
    batch_stream,
    expand_static,
    sample_pairwise_epoch,
)
from .models import (
    ModelConfig,
    ModelError,
    ModelParams,
    count_params,
    init_params,
    load_params,
    make_scorer,
    project_photo,
    save_params,
)
from .training import (
    AdamState,
    EarlyStopConfig,
    EpochStats,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    adam_step,
    bce_loss,
    bpr_loss,
    track_resources,
    train,
)
from .evaluation import (
    EvaluationError,
    MetricReport,
    RankedCase,
    TestCase,
    activity_sweep,
    aggregate,
    auc_single_positive,
    build_test_cases,
    ndcg_at_k,
    percentile_of_positive,
    rank_candidates,
    recall_at_k,
)
