"""Predict spatially resolved gene expression from histology patch embeddings.

The pipeline runs in ordered stages over a manifest of slides: count and
sparsity filtering, library-size normalization, log transform, median-based
zero imputation, spatially-variable gene selection, local graph construction,
two-stage model training, and masked evaluation.  Each stage reads and writes
plain TSV artifacts so any step can be inspected or rerun in isolation.
"""

__version__ = "0.1.0"
