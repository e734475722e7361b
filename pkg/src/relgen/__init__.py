"""relgen: document-level relation extraction as symbolic sequence generation.

The package treats a document's relation matrix as the object of interest
and provides deterministic codecs between matrices and flat symbol
sequences, grammar-constrained decoding over those sequences, negative
cell sampling plans, a small from-scratch encoder-decoder for end-to-end
experiments, and corpus-level evaluation.
"""

__version__ = "0.1.0"
