"""Retrieval-augmented multimodal EHR prediction.

The pipeline enhances multimodal EHR records (lab time series + clinical
notes) with knowledge retrieved from a disease knowledge graph, encodes
every modality into a shared space, and fuses them with an adaptive
attention network for binary clinical prediction (mortality / readmission).
Everything runs offline at desk scale: the reference embedder is a
deterministic trigram hasher and the shipped knowledge graph is a
miniature fixture in the production schema.
"""

__version__ = "0.1.0"
