"""Desk-scale vectorized BEV map construction with shape priors.

Subpackages cover the whole pipeline: synthetic scenes and BEV features,
prior fitting by permutation-invariant clustering, a transformer decoder
with prior reference points and decoupled deformable cross-attention,
hierarchical bipartite matching with stability instrumentation, and
Chamfer-distance average precision evaluation.
"""

__version__ = "0.1.0"
