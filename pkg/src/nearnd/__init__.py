"""Near-distribution novelty detection.

Train a score-based generative model on a single normal class, stop it
prematurely inside a target FID band to synthesize near-distribution
outliers, fine-tune a feature extractor to separate normal from synthetic
samples, and score test inputs by k-NN distance to a memory bank of normal
embeddings.
"""

from .benchmark import (
    ClosenessTable,
    RestClassifierConfig,
    bottom_i,
    build_fsde_testset,
    closeness_scores,
    nearest_class,
    train_aux_classifier,
    train_rest_classifier,
)
from .data import (
    MODEL_RANGE,
    STORAGE_RANGE,
    ImageBatch,
    IngestionError,
    LabeledDataset,
    NDSplit,
    SplitError,
    as_model_range,
    load_dataset,
    load_image_dir,
    make_near_nd_split,
    make_one_vs_all_split,
    to_model_range,
    to_storage_range,
)
from .encoder import (
    ConvBackbone,
    EmbeddingMatrix,
    FinetuneConfig,
    HeadClassifier,
    TrainingReport,
    backbone_fingerprint,
    classifier_probs,
    embed,
    finetune,
    load_backbone,
    make_backbone,
    save_backbone,
)
from .evaluation import DetectorReport, auroc, evaluate_detector, rank_correlation
from .fid import FeatureStats, compute_stats, frechet_distance, load_stats, save_stats
from .generator import (
    CheckpointRecord,
    GenerationRun,
    GeneratorTrainConfig,
    SelectedCheckpoint,
    make_fid_probe,
    select_checkpoint,
    train_generator,
)
from .memory import (
    MemoryBank,
    NoveltyScorer,
    build_memory,
    decide,
    load_memory,
    novelty_score,
    save_memory,
    score_batch,
    score_embeddings,
)
from .sde import (
    DivergenceError,
    SamplerConfig,
    VESchedule,
    VPSchedule,
    dsm_loss,
    make_schedule,
    perturb,
    reverse_step,
    sample,
    sample_tensor,
)
from .scorenets import MLPScoreNet, UNetScoreNet, build_score_net

__version__ = "0.1.0"
