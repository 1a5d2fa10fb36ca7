"""Outcome modeling for animal adverse-event reports.

Pipeline stages: ingest quarterly report JSON, harmonize terms against
veterinary ontologies, prepare model-ready matrices, rebalance, train tree
ensembles, expand training data with margin-based pseudo-labeling, and
explain predictions with exact per-tree Shapley attributions.
"""

__version__ = "0.1.0"
