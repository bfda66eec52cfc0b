"""Desk-scale retinal fundus screening toolkit.

Two-phase pipeline: multi-label fundus classification over a rigorous
preprocessing chain, plus an interpretable review layer (vessel
segmentation, similar-case retrieval, saliency, enhanced views) served
over HTTP to a clinician workstation.
"""

__version__ = "0.1.0"
