"""Threshold-gated retrieval-augmented answering over hyperbolic embeddings.

Subsystems:

- :mod:`hyperrag.geometry`: Lorentz-model hyperbolic operations
- :mod:`hyperrag.alignment`: modality encoders and geodesic alignment
- :mod:`hyperrag.gate`: confidence gate and relevance filtering
- :mod:`hyperrag.spectral`: Laplacian eigensolvers and subgraph refinement
- :mod:`hyperrag.transport`: exact and entropic optimal transport
- :mod:`hyperrag.generation`: token generation and blended losses
- :mod:`hyperrag.pipeline`: end-to-end training, answering, evaluation
- :mod:`hyperrag.synth`: deterministic synthetic corpus generator
- :mod:`hyperrag.io`: bundle serialization and canonical JSON
- :mod:`hyperrag.conformance`: independent brute-force oracles
- :mod:`hyperrag.cli`: command-line entry point
"""

__version__ = "0.1.0"
