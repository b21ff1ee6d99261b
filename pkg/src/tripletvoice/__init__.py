"""Speaker embeddings from spectrogram patches trained with a triplet loss,
with cluster-quality metrics and distance-based forensic likelihood ratios."""

__version__ = "0.1.0"
