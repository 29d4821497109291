"""Tri-modal contrastive alignment with intra- and cross-modal relation distillation."""

__version__ = "0.1.0"

from .embedding_space import (  # noqa: E402
    EmbeddingBatch,
    Modality,
    SynthConfig,
    TripletDataset,
    gen_synthetic_triplets,
    l2_normalize,
    load_dataset,
    load_embeddings,
    save_dataset,
    save_embeddings,
)
from .evaluation import retrieval_eval, similarity_mae, zero_shot_classify  # noqa: E402
from .losses import LossParams, WeightLogits, alignment_loss, dynamic_weights, total_loss  # noqa: E402
from .relations import (  # noqa: E402
    RelationForm,
    relation_euclidean,
    relation_partial_order,
    relation_similarity,
)
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    "EmbeddingBatch",
    "LossParams",
    "Modality",
    "RelationForm",
    "SynthConfig",
    "TrainConfig",
    "TripletDataset",
    "WeightLogits",
    "alignment_loss",
    "dynamic_weights",
    "gen_synthetic_triplets",
    "l2_normalize",
    "load_dataset",
    "load_embeddings",
    "relation_euclidean",
    "relation_partial_order",
    "relation_similarity",
    "retrieval_eval",
    "save_dataset",
    "save_embeddings",
    "similarity_mae",
    "total_loss",
    "train",
    "zero_shot_classify",
]
