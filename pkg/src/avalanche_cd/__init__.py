"""Bi-temporal SAR avalanche change detection: normalization, patches, a Siamese
difference scorer, tiled inference with blending, threshold tuning and evaluation."""

__version__ = "0.1.0"
