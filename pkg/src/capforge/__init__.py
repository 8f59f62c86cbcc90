"""Pseudolabeling pipeline for vision-language embeddings.

The pipeline detects classes whose text embeddings point away from their
image clusters, realigns them with enhanced descriptions, builds an
initial top-k pseudolabel set, and fine-tunes small residual adapters
under a confusion-aware calibrated margin loss — all over precomputed,
unit-norm embedding vectors.
"""

from .adapters import (AdapterModel, SGDMomentum, forward_logits, image_embed,
                       load_model, loss_and_grads, save_model, text_embed)
from .alignment import (DescriptionCandidate, FileDescriptionProvider,
                        MockDescriptionProvider, NetworkDescriptionProvider,
                        PseudolabelRecord, PseudolabelSet, build_initial_pl,
                        enhance_mismatched, fetch_candidates,
                        select_optimal_description)
from .cluster import (ClusterModel, SeededKMeans, cosine_sim, cosine_sim_matrix,
                      kmeans, l2_normalize, row_softmax)
from .dataset import (EmbeddingDataset, SplitSpec, load_dataset, make_ssl_split,
                      make_trzsl_split, save_dataset)
from .errors import (CapError, ClusteringError, DatasetFormatError,
                     DivergenceError, InsufficientCandidatesError,
                     ProviderError, ProviderUnavailableError, ValidationError)
from .margin import (MarginState, build_margin_state, class_prototypes,
                     margin_loss, margin_loss_batch, margin_matrix,
                     similarity_matrix, tendency_stats)
from .metrics import (EvalReport, accuracy_report, cluster_concentration,
                      confidence_density, find_confused_groups, full_report,
                      harmonic_mean, local_ece)
from .mismatch import (MismatchDetector, MismatchReport, auto_threshold,
                       detect_mismatch, zero_shot_logits, zero_shot_predict)
from .synth import GroundTruth, SynthSpec, generate, make_descriptions, write_synth_dataset
from .trainer import (CapClassifier, TrainConfig, fixmatch_select, grow_pl,
                      learning_rate, refresh_margin, run_training, train_epoch,
                      write_metric_log)

__version__ = "0.1.0"

__all__ = [
    "AdapterModel", "SGDMomentum", "forward_logits", "image_embed",
    "load_model", "loss_and_grads", "save_model", "text_embed",
    "FileDescriptionProvider", "MockDescriptionProvider",
    "NetworkDescriptionProvider", "PseudolabelRecord", "PseudolabelSet",
    "DescriptionCandidate", "build_initial_pl", "enhance_mismatched",
    "fetch_candidates",
    "select_optimal_description",
    "ClusterModel", "SeededKMeans", "cosine_sim", "cosine_sim_matrix",
    "kmeans", "l2_normalize", "row_softmax",
    "EmbeddingDataset", "SplitSpec", "load_dataset", "make_ssl_split",
    "make_trzsl_split", "save_dataset",
    "CapError", "ClusteringError", "DatasetFormatError", "DivergenceError",
    "InsufficientCandidatesError", "ProviderError",
    "ProviderUnavailableError", "ValidationError",
    "MarginState", "build_margin_state", "class_prototypes", "margin_loss",
    "margin_loss_batch", "margin_matrix", "similarity_matrix",
    "tendency_stats",
    "EvalReport", "accuracy_report", "cluster_concentration",
    "confidence_density", "find_confused_groups", "full_report",
    "harmonic_mean", "local_ece",
    "MismatchDetector", "MismatchReport", "auto_threshold", "detect_mismatch",
    "zero_shot_logits", "zero_shot_predict",
    "GroundTruth", "SynthSpec", "generate", "make_descriptions",
    "write_synth_dataset",
    "CapClassifier", "TrainConfig", "fixmatch_select", "grow_pl",
    "learning_rate", "refresh_margin", "run_training", "train_epoch",
    "write_metric_log",
]
