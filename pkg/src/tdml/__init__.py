"""Triplet metric learning with retrieval evaluation.

Train small embedding networks with a batch-all triplet loss, reduce
embedding dimension by PCA or a learned FC layer, and score retrieval
quality with ANMRR, mAP and precision at k.
"""

__version__ = "0.1.0"
