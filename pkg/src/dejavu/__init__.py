"""Weakly supervised, season-invariant dense features trained with a
contextual-similarity triplet loss."""
from .features import (ContractError, DataError, FormatError, feature_at, load_feature_map,
                       load_image_ppm, save_feature_map, save_image_ppm)
from .similarity import (SimilarityConfig, contextual_similarity,
                         contextual_similarity_backward, pairwise_distances)

__version__ = "0.1.0"
