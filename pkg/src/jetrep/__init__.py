"""Desk-scale benchmark for jet representation-learning objectives.

One fixed particle-cloud transformer encoder, four pretraining objectives
plus supervised references, standardized physics preprocessing and
augmentation, hierarchical stratified sampling, and the full evaluation
metric suite — all self-contained on 64-bit numpy.
"""

__version__ = "0.1.0"
